// coupalign command-line tool: gen-data | train | eval | ablate | gradcheck | export-attn
//
// Exit codes: 0 ok, 1 other failure, 2 config error, 3 data error, 4 numeric failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "coupalign/ablation.hpp"
#include "coupalign/export.hpp"
#include "coupalign/gradcheck_suite.hpp"
#include "coupalign/trainer.hpp"

namespace fs = std::filesystem;
using namespace coupalign;

namespace {

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "key = value config file");
  cmd->add_option("--set", a.sets, "override, e.g. --set wpa.mode=uni (repeatable)");
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&a](std::uint64_t s) { a.seed = s; a.seed_given = true; }, "run seed");
  cmd->add_option("--out-dir", a.out_dir, "output directory");
}

RunConfig resolve_config(const CommonArgs& a, const std::string& fallback_file = {}) {
  RunConfig cfg;
  if (!a.config.empty()) {
    apply_config_file(cfg, a.config);
  } else if (!fallback_file.empty()) {
    apply_config_file(cfg, fallback_file);
  }
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  if (a.seed_given) cfg.seed = a.seed;
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

/// A run directory holds config.resolved.txt and best.catn.
CoupAlign<float> load_model(const RunConfig& cfg, const fs::path& checkpoint) {
  CoupAlign<float> model(cfg.model, cfg.seed);
  model.params().load_entries(catn::load(checkpoint));
  return model;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Referring image segmentation toy with word-pixel and sentence-mask alignment"};
  app.require_subcommand(1);

  CommonArgs gen_args;
  std::size_t gen_n = 500, gen_n_val = 100, gen_n_test = 100;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark (train/val/test)");
  add_common(gen, gen_args);
  gen->add_option("--n", gen_n, "training samples");
  gen->add_option("--n-val", gen_n_val, "validation samples");
  gen->add_option("--n-test", gen_n_test, "test samples");
  gen->add_option("--out", gen_args.out_dir, "output directory (alias of --out-dir)");

  CommonArgs train_args;
  std::string resume;
  auto* train = app.add_subcommand("train", "train one model");
  add_common(train, train_args);
  train->add_option("--resume", resume, "checkpoint (last.catn) to continue from");

  CommonArgs eval_args;
  std::string eval_run, eval_ckpt, eval_split = "test";
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, eval_args);
  eval->add_option("--run-dir", eval_run, "training output directory");
  eval->add_option("--checkpoint", eval_ckpt, "parameter file (default: <run-dir>/best.catn)");
  eval->add_option("--split", eval_split, "val, test or all");

  CommonArgs ablate_args;
  std::string grid = "components";
  std::size_t ablate_seeds = 3;
  auto* ablate = app.add_subcommand("ablate", "train an ablation grid over several seeds");
  add_common(ablate, ablate_args);
  ablate->add_option("--grid", grid, "components, stages, queries or acceptance");
  ablate->add_option("--seeds", ablate_seeds, "seeds per cell");

  std::size_t gc_seeds = 3;
  std::string gc_only;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks (64-bit)");
  gradcheck->add_option("--seeds", gc_seeds, "seeds per check");
  gradcheck->add_option("--only", gc_only, "run a single named check");

  CommonArgs exp_args;
  std::string exp_run, exp_ckpt, exp_split = "val";
  std::size_t exp_index = 0;
  auto* exporter = app.add_subcommand("export-attn", "write attention maps of one sample as PGM images");
  add_common(exporter, exp_args);
  exporter->add_option("--run-dir", exp_run, "training output directory");
  exporter->add_option("--checkpoint", exp_ckpt, "parameter file (default: <run-dir>/best.catn)");
  exporter->add_option("--split", exp_split, "split to draw the sample from");
  exporter->add_option("--index", exp_index, "sample index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      RunConfig cfg = resolve_config(gen_args);
      if (gen_args.seed_given) cfg.data.seed = gen_args.seed;
      cfg.data.n_train = gen_n;
      cfg.data.n_val = gen_n_val;
      cfg.data.n_test = gen_n_test;
      if (gen_args.out_dir.empty()) throw ConfigError("gen-data needs --out");
      const Dataset d = generate_dataset(cfg.data, cfg.model.image_size, cfg.model.t_max);
      save_dataset(d, gen_args.out_dir, cfg.data.seed);
      std::cout << "wrote " << d.train.size() << "/" << d.val.size() << "/" << d.test.size()
                << " samples to " << gen_args.out_dir << "\n";
    } else if (*train) {
      const RunConfig cfg = resolve_config(train_args);
      if (train_args.out_dir.empty()) throw ConfigError("train needs --out-dir");
      const Dataset data = resolve_dataset(cfg);
      TrainOptions opts;
      opts.out_dir = train_args.out_dir;
      opts.log = &std::cout;
      Trainer trainer(cfg, data, opts);
      if (!resume.empty()) trainer.load_checkpoint(resume);
      trainer.run();
      std::cout << "best val oIoU " << (trainer.best_val() ? trainer.best_val()->oiou : 0.0) << " at epoch "
                << trainer.best_epoch() << "; outputs in " << train_args.out_dir << "\n";
    } else if (*eval) {
      const std::string fallback = eval_run.empty() ? "" : (fs::path(eval_run) / "config.resolved.txt").string();
      const RunConfig cfg = resolve_config(eval_args, fallback);
      const fs::path ckpt = !eval_ckpt.empty() ? fs::path(eval_ckpt) : fs::path(eval_run) / "best.catn";
      if (eval_ckpt.empty() && eval_run.empty()) throw ConfigError("eval needs --run-dir or --checkpoint");
      const CoupAlign<float> model = load_model(cfg, ckpt);
      const Dataset data = resolve_dataset(cfg);
      const fs::path out = !eval_args.out_dir.empty() ? fs::path(eval_args.out_dir) : fs::path(eval_run);
      std::vector<std::string> splits;
      if (eval_split == "all") splits = {"val", "test"};
      else splits = {eval_split};
      std::string metrics = metrics_header() + "\n", hist = "split,lo,hi,count\n";
      for (const auto& split : splits) {
        const EvalAccumulator acc = evaluate(model, data.split(split));
        metrics += metrics_row(split, acc.finalize()) + "\n";
        const auto h = acc.iou_histogram();
        for (std::size_t k = 0; k < h.size(); ++k) {
          hist += split + "," + fmt_value(kHistogramEdges[k]) + "," + fmt_value(kHistogramEdges[k + 1]) + "," +
                  std::to_string(h[k]) + "\n";
        }
      }
      std::cout << metrics;
      if (!out.empty()) {
        fs::create_directories(out);
        write_text(out / "eval_metrics.csv", metrics);
        write_text(out / "eval_histogram.csv", hist);
      }
    } else if (*ablate) {
      const RunConfig cfg = resolve_config(ablate_args);
      const Dataset data = resolve_dataset(cfg);
      const auto cells = ablation_grid(grid);
      const fs::path out = ablate_args.out_dir;
      const auto rows = run_ablation(cfg, cells, ablate_seeds, data, out, &std::cout);
      const auto summary = summarize(rows);
      std::cout << "\n" << ablation_table(summary);
      if (!out.empty()) {
        write_text(out / "ablation.csv", ablation_rows_csv(rows));
        write_text(out / "ablation_summary.csv", ablation_summary_csv(summary));
        write_text(out / "ablation.txt", ablation_table(summary));
      }
    } else if (*gradcheck) {
      bool ok = true;
      bool found = false;
      for (const auto& c : grad_check_cases()) {
        if (!gc_only.empty() && c.name != gc_only) continue;
        found = true;
        double worst = 0;
        std::size_t checked = 0, kinks = 0;
        for (std::size_t s = 0; s < gc_seeds; ++s) {
          const GradCheckResult r = c.run(s + 1);
          worst = std::max(worst, r.max_rel_error);
          checked += r.checked;
          kinks += r.excluded_kinks;
        }
        const bool pass = worst < 1e-4;
        ok = ok && pass;
        std::cout << (pass ? "ok   " : "FAIL ") << c.name << "  max rel err " << worst << "  coords " << checked
                  << "  kinks skipped " << kinks << "\n";
      }
      if (!found) throw ConfigError("no gradient check named '" + gc_only + "'");
      return ok ? 0 : 4;
    } else if (*exporter) {
      const std::string fallback = exp_run.empty() ? "" : (fs::path(exp_run) / "config.resolved.txt").string();
      const RunConfig cfg = resolve_config(exp_args, fallback);
      if (exp_ckpt.empty() && exp_run.empty()) throw ConfigError("export-attn needs --run-dir or --checkpoint");
      const fs::path ckpt = !exp_ckpt.empty() ? fs::path(exp_ckpt) : fs::path(exp_run) / "best.catn";
      const CoupAlign<float> model = load_model(cfg, ckpt);
      const Dataset data = resolve_dataset(cfg);
      const auto& samples = data.split(exp_split);
      if (exp_index >= samples.size()) throw ConfigError("--index beyond the " + exp_split + " split");
      const fs::path out = !exp_args.out_dir.empty() ? fs::path(exp_args.out_dir) : fs::path(exp_run) / "attn";
      const auto files = export_attention(model, samples[exp_index], out);
      std::cout << "expression: " << detokenize(samples[exp_index].tokens) << "\nwrote " << files.size()
                << " files to " << out << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
