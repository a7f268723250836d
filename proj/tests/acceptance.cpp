// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when
// all selected criteria pass. Training criteria use the toy config.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "coupalign/ablation.hpp"
#include "coupalign/gradcheck_suite.hpp"
#include "oracles.hpp"

using namespace coupalign;
namespace fs = std::filesystem;
using TD = Tensor<double>;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

TD random(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  const std::size_t n = coupalign::numel(s);
  return TD(std::move(s), oracle::random_vec(n, rng, lo, hi));
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// 1. Finite differences over every case, three seeds, two-minute budget.
Outcome gradient_integrity() {
  Outcome o;
  const auto t0 = Clock::now();
  std::string worst_case;
  double worst = 0;
  for (const auto& c : grad_check_cases()) {
    double case_worst = 0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) case_worst = std::max(case_worst, c.run(seed).max_rel_error);
    if (case_worst >= 1e-4) o.require(false, c.name + " max rel err " + fmt(case_worst));
    if (case_worst > worst) {
      worst = case_worst;
      worst_case = c.name;
    }
  }
  const double secs = seconds_since(t0);
  o.require(secs < 120, "took " + fmt(secs) + " s");
  if (o.pass) o.detail = "worst " + worst_case + " " + fmt(worst) + ", " + fmt(secs) + " s";
  return o;
}

// 2. Library ops against the naive loops, 20 instances each.
Outcome oracle_equivalence() {
  Outcome o;
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> ext(1, 6), fac(1, 4), ch(1, 3);
  double worst[5] = {0, 0, 0, 0, 0};
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = ext(rng), k = ext(rng), n = ext(rng);
    const auto a = oracle::random_vec(m * k, rng), b = oracle::random_vec(k * n, rng);
    worst[0] = std::max(worst[0], oracle::max_abs_diff(matmul(TD({m, k}, a), TD({k, n}, b)).values(),
                                                       oracle::matmul(a, b, m, k, n)));

    const std::size_t ci = ch(rng), co = ch(rng), ks = trial % 2 ? 1 : 3, pad = ks / 2, stride = trial % 4 ? 1 : 2;
    const auto x = oracle::random_vec(5 * 5 * ci, rng), w = oracle::random_vec(ks * ks * ci * co, rng);
    worst[1] = std::max(worst[1], oracle::max_abs_diff(conv2d(TD({5, 5, ci}, x), TD({ks, ks, ci, co}, w), stride, pad)
                                                           .values(),
                                                       oracle::conv2d(x, 5, 5, ci, w, ks, ks, co, stride, pad)));

    const std::size_t h = ext(rng), wd = ext(rng), c = ch(rng), f = fac(rng);
    const auto img = oracle::random_vec(h * wd * c, rng);
    worst[2] = std::max(worst[2], oracle::max_abs_diff(bilinear_upsample(TD({h, wd, c}, img), f).values(),
                                                       oracle::bilinear(img, h, wd, c, f)));

    // InfoNCE on a 4×4 grid of 3-d features; both sets are kept non-empty.
    const TD y1 = random({4, 4, 3}, rng);
    std::vector<double> mask(16 * 16, 0.0);
    std::vector<int> fg(16, 0);
    std::bernoulli_distribution coin(0.4);
    for (std::size_t cell = 0; cell < 16; ++cell) fg[cell] = cell == 0 || (cell != 1 && coin(rng));
    for (std::size_t py = 0; py < 16; ++py)
      for (std::size_t px = 0; px < 16; ++px) mask[py * 16 + px] = fg[(py / 4) * 4 + px / 4];
    for (bool normalize : {true, false}) {
      const double tau = normalize ? 0.07 : 1.0;
      worst[3] = std::max(worst[3], std::abs(aux_loss(y1, TD({16, 16}, mask), tau, normalize).item() -
                                             oracle::infonce(y1.values(), fg, 3, tau, normalize)));
    }

    const TD logits = random({5, 7}, rng, -8, 8);
    std::vector<double> bits(35);
    for (double& v : bits) v = coin(rng) ? 1.0 : 0.0;
    worst[4] = std::max(worst[4], std::abs(seg_loss(logits, TD({5, 7}, bits)).item() -
                                           oracle::bce(logits.values(), bits)));
  }
  const char* names[5] = {"matmul", "conv2d", "bilinear", "InfoNCE", "BCE"};
  std::string all;
  for (int i = 0; i < 5; ++i) {
    o.require(worst[i] < 1e-6, std::string(names[i]) + " max abs diff " + fmt(worst[i]));
    all += std::string(i ? ", " : "") + names[i] + " " + fmt(worst[i]);
  }
  if (o.pass) o.detail = all;
  return o;
}

// 3. Metrics against brute-force counting; prec monotone on every evaluation.
Outcome metric_exactness(const std::vector<EvalSummary>& extra) {
  Outcome o;
  std::mt19937_64 rng(3);
  std::bernoulli_distribution coin(0.35);
  EvalAccumulator acc;
  std::uint64_t inter = 0, uni = 0;
  std::vector<std::uint64_t> hist(5, 0);
  std::uint64_t over[3] = {0, 0, 0};
  std::vector<double> ious;
  for (int k = 0; k < 100; ++k) {
    std::vector<std::uint8_t> p(64), g(64);
    for (auto& x : p) x = coin(rng);
    for (auto& x : g) x = coin(rng);
    acc.accumulate(p, g);
    const oracle::Counts c = oracle::pixel_counts(p, g);
    inter += c.inter;
    uni += c.uni;
    // Thresholds and buckets on integer counts: iou > t  <=>  10·inter > 10t·uni.
    for (int t = 0; t < 3; ++t) over[t] += c.uni == 0 || 10 * c.inter > std::uint64_t(5 + 2 * t) * c.uni;
    if (c.uni > 0 && 2 * c.inter < c.uni) ++hist[10 * c.inter / c.uni];
    ious.push_back(c.uni == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(c.uni));
    if (acc.ious().back() != ious.back()) o.require(false, "IoU of pair " + std::to_string(k));
  }
  const auto s = acc.finalize();
  o.require(acc.total_intersection() == inter && acc.total_union() == uni, "cumulative counts");
  o.require(s.oiou == static_cast<double>(inter) / static_cast<double>(uni), "oIoU");
  double total = 0;
  for (double v : ious) total += v;
  o.require(s.miou == total / 100.0, "mIoU");
  o.require(s.prec50 == static_cast<double>(over[0]) / 100 && s.prec70 == static_cast<double>(over[1]) / 100 &&
                s.prec90 == static_cast<double>(over[2]) / 100,
            "prec@X");
  const auto h = acc.iou_histogram();
  o.require(std::equal(h.begin(), h.end(), hist.begin(), hist.end()), "histogram");
  std::vector<EvalSummary> all = extra;
  all.push_back(s);
  std::size_t bad = 0;
  for (const auto& e : all) bad += !(e.prec90 <= e.prec70 && e.prec70 <= e.prec50);
  o.require(bad == 0, std::to_string(bad) + " evaluations violate prec monotonicity");
  if (o.pass) o.detail = "100 pairs exact; monotone on " + std::to_string(all.size()) + " evaluations";
  return o;
}

// 4. SMA weights and WPA masking.
Outcome alignment_invariants() {
  Outcome o;
  std::mt19937_64 rng(4);
  auto sma_cfg = [](std::size_t n) {
    ModelConfig c;
    c.n_queries = n;
    c.d_q = 4;
    c.d_s = 3;
    c.d_lang = 4;
    return c;
  };
  double worst_norm = 0;
  std::size_t nonpositive = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(trial) % 7;
    ParamStore<double> ps;
    std::mt19937_64 init(static_cast<std::uint64_t>(trial));
    const SmaParams<double> p(ps, sma_cfg(n), init);
    const auto r = sma(random({n, 4}, rng, -5, 5), random({2, 3, 3}, rng), random({1, 4}, rng, -5, 5), p);
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      nonpositive += !(r.q_w[i] > 0.0);
      total += r.q_w[i];
    }
    worst_norm = std::max(worst_norm, std::abs(total - 1.0));
  }
  o.require(nonpositive == 0, std::to_string(nonpositive) + " non-positive weights");
  o.require(worst_norm <= 1e-6, "normalization off by " + fmt(worst_norm));

  std::size_t single_mismatch = 0;
  double worst_scale = 0;
  for (int trial = 0; trial < 50; ++trial) {
    ParamStore<double> ps1, ps4;
    std::mt19937_64 init(static_cast<std::uint64_t>(trial));
    const SmaParams<double> p1(ps1, sma_cfg(1), init), p4(ps4, sma_cfg(4), init);
    const auto r = sma(random({1, 4}, rng), random({3, 3, 3}, rng), random({1, 4}, rng), p1);
    if (r.m.values() != r.y_n.values()) ++single_mismatch;
    const TD q = random({4, 4}, rng), y1 = random({2, 2, 3}, rng), l_g = random({1, 4}, rng);
    const auto a = sma(q, y1, l_g, p4), b = sma(q, y1, scale(l_g, 1e3), p4);
    for (std::size_t i = 0; i < 4; ++i) worst_scale = std::max(worst_scale, std::abs(a.q_w[i] - b.q_w[i]));
  }
  o.require(single_mismatch == 0, "N=1 map differs from Y_N[0] in " + std::to_string(single_mismatch) + " cases");
  o.require(worst_scale <= 1e-6, "Q_w moves by " + fmt(worst_scale) + " under L_g scaling");

  std::size_t leaked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    ParamStore<double> ps;
    std::mt19937_64 init(static_cast<std::uint64_t>(trial));
    const WpaParams<double> p(ps, 1, 4, 6, 8, init);
    std::vector<std::uint8_t> valid(6);
    for (auto& v : valid) v = rng() % 2;
    valid[0] = 1;
    const auto r = bi_attn(random({9, 4}, rng), random({6, 6}, rng, -30, 30), p, valid);
    for (std::size_t px = 0; px < 9; ++px)
      for (std::size_t j = 0; j < 6; ++j) leaked += !valid[j] && r.attn[px * 6 + j] != 0.0;
  }
  o.require(leaked == 0, std::to_string(leaked) + " masked attention entries are non-zero");
  if (o.pass) o.detail = "1000 inputs, max |sum-1| " + fmt(worst_norm) + ", scale drift " + fmt(worst_scale);
  return o;
}

// 7. Bitwise determinism, round trips and resume.
Outcome determinism(const fs::path& out) {
  Outcome o;
  RunConfig cfg;
  apply_config_text(cfg, "data.n_train = 32\ndata.n_val = 8\ndata.n_test = 8\ntrain.epochs = 2\ntrain.batch_size = 8\n"
                         "optim.lr0 = 1e-3\noptim.lr_end = 1e-4\noptim.max_decay_epoch = 2\n");
  cfg.seed = 5;
  const Dataset data = resolve_dataset(cfg);
  const fs::path a = out / "determinism_a", b = out / "determinism_b", r = out / "determinism_resume";
  for (const auto& d : {a, b, r}) fs::remove_all(d);
  for (const auto& d : {a, b}) {
    TrainOptions opts;
    opts.out_dir = d;
    Trainer(cfg, data, opts).run();
  }
  o.require(slurp(a / "trace.csv") == slurp(b / "trace.csv"), "trace.csv differs between identical runs");
  o.require(slurp(a / "last.catn") == slurp(b / "last.catn"), "checkpoints differ between identical runs");

  // CATN: decode(encode(x)) re-encodes to the same bytes, for both dtypes.
  std::mt19937_64 rng(7);
  std::vector<float> f(50);
  for (auto& x : f) x = static_cast<float>(oracle::random_vec(1, rng, -1e3, 1e3)[0]);
  f[0] = -0.0f;
  f[1] = std::numeric_limits<float>::denorm_min();
  f[2] = std::numeric_limits<float>::max();
  const std::vector<catn::Entry> entries{{"f", {5, 10}, f}, {"d", {7}, oracle::random_vec(7, rng, -1e9, 1e9)}};
  const auto bytes = catn::encode(entries);
  const auto back = catn::decode(bytes);
  o.require(catn::encode(back) == bytes, "CATN re-encoding changed bytes");
  const auto& g = std::get<std::vector<float>>(back[0].values);
  o.require(std::memcmp(g.data(), f.data(), f.size() * sizeof(float)) == 0, "CATN float payload changed");

  // Checkpoint: load into a fresh trainer and save again.
  {
    Trainer t(cfg, data);
    t.load_checkpoint(a / "last.catn");
    t.save_checkpoint(out / "determinism_resaved.catn");
    o.require(slurp(out / "determinism_resaved.catn") == slurp(a / "last.catn"), "checkpoint round trip changed bytes");
  }

  // Stop after epoch 1, resume in a new trainer, compare with the full run.
  {
    TrainOptions opts;
    opts.out_dir = r;
    Trainer first(cfg, data, opts);
    first.run(4);
  }
  TrainOptions opts;
  opts.out_dir = r;
  Trainer second(cfg, data, opts);
  second.load_checkpoint(r / "last.catn");
  second.run();
  o.require(slurp(r / "trace.csv") == slurp(a / "trace.csv"), "resumed trace differs");
  o.require(slurp(r / "last.catn") == slurp(a / "last.catn"), "resumed final checkpoint differs");
  o.require(slurp(r / "best.catn") == slurp(a / "best.catn"), "resumed best parameters differ");
  if (o.pass) o.detail = "trace, CATN, checkpoint and resume bit-identical";
  return o;
}

// 8. Loss anchors.
Outcome loss_anchors() {
  Outcome o;
  std::mt19937_64 rng(8);
  double worst = 0;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> m(48);
    for (double& v : m) v = static_cast<double>(rng() % 2);
    worst = std::max(worst, std::abs(seg_loss(TD::zeros({6, 8}), TD({6, 8}, m)).item() - std::log(2.0)));
  }
  o.require(worst <= 1e-6, "seg_loss(0) off by " + fmt(worst));
  const double nce = aux_loss(TD({1, 2, 2}, {1, 0, 0, 1}), TD({1, 2}, {1, 0}), 1.0).item();
  o.require(std::abs(nce - 0.626524) <= 1e-5, "orthogonal InfoNCE " + fmt(nce));
  if (o.pass) o.detail = "ln 2 off by " + fmt(worst) + ", InfoNCE " + fmt(nce);
  return o;
}

struct RunRecord {
  std::string cell;
  std::uint64_t seed = 0;
  EvalSummary best;
  std::vector<EvalSummary> history;
  double seconds = 0;
};

std::vector<RunRecord> train_cells(const RunConfig& base, const std::vector<AblationCell>& cells, const Dataset& data,
                                   const fs::path& out) {
  std::vector<RunRecord> runs;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (std::uint64_t k = 0; k < 3; ++k) {
      RunConfig cfg = base;
      for (const auto& [key, value] : cells[c].overrides) cfg.set(key, value);
      cfg.seed = base.seed + k;
      TrainOptions opts;
      opts.out_dir = out / (cells[c].name + "_seed" + std::to_string(cfg.seed));
      const auto t0 = Clock::now();
      Trainer trainer(cfg, data, opts);
      trainer.run();
      RunRecord r{cells[c].name, cfg.seed, *trainer.best_val(), trainer.val_history(), seconds_since(t0)};
      std::cerr << "  " << r.cell << " seed " << r.seed << ": best val mIoU " << r.best.miou << " prec@0.5 "
                << r.best.prec50 << " (" << r.seconds << " s)\n";
      runs.push_back(std::move(r));
    }
  }
  return runs;
}

// 5. Every seed of the full model reaches the bar within the epoch and time budget.
Outcome toy_training(const std::vector<RunRecord>& runs) {
  Outcome o;
  std::string summary;
  for (const auto& r : runs) {
    if (r.cell != "full") continue;
    double best_miou = 0, best_p50 = 0;
    bool reached = false;
    for (const auto& e : r.history) {
      reached = reached || (e.miou >= 0.60 && e.prec50 >= 0.60);
      best_miou = std::max(best_miou, e.miou);
      best_p50 = std::max(best_p50, e.prec50);
    }
    const std::string tag = "seed " + std::to_string(r.seed);
    o.require(reached, tag + " peaks at mIoU " + fmt(best_miou) + " prec@0.5 " + fmt(best_p50));
    o.require(r.seconds < 1200, tag + " took " + fmt(r.seconds) + " s");
    summary += (summary.empty() ? "" : ", ") + tag + " mIoU " + fmt(best_miou) + " in " + fmt(r.seconds) + " s";
  }
  if (o.pass) o.detail = summary;
  return o;
}

// 6. Mean val mIoU ordering with a 0.01 noise allowance.
Outcome directional_ablation(const std::vector<RunRecord>& runs) {
  Outcome o;
  std::map<std::string, double> mean;
  std::map<std::string, int> count;
  for (const auto& r : runs) {
    mean[r.cell] += r.best.miou;
    ++count[r.cell];
  }
  for (auto& [cell, m] : mean) m /= count[cell];
  const std::pair<const char*, const char*> order[] = {
      {"full", "uni-wpa"}, {"uni-wpa", "no-wpa"}, {"full", "sma-off"}, {"full", "aux-off"}};
  std::string table;
  for (const auto& [cell, m] : mean) table += (table.empty() ? "" : ", ") + cell + " " + fmt(m);
  for (const auto& [hi, lo] : order) {
    const double gap = mean[hi] - mean[lo];
    o.require(gap >= -0.01, std::string(hi) + " - " + lo + " = " + fmt(gap));
  }
  o.detail = o.pass ? table : o.detail + " (" + table + ")";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string out_dir = (fs::temp_directory_path() / "coupalign_acceptance").string();
  std::string config = COUPALIGN_TOY_CONFIG;
  std::vector<int> only;
  app.add_option("--out-dir", out_dir, "directory for training runs");
  app.add_option("--config", config, "config for the training criteria");
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8}
                                              : std::set<int>(only.begin(), only.end());
  const fs::path out = out_dir;
  fs::create_directories(out);

  std::map<int, Outcome> results;
  auto record = [&](int id, const char* name, const std::function<Outcome()>& f) {
    if (!selected.count(id)) return;
    std::cerr << "running " << id << " (" << name << ")\n";
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    o.detail = std::string(name) + ": " + o.detail;
    std::cerr << (o.pass ? "PASS " : "FAIL ") << id << " " << o.detail << "\n";
    results[id] = o;
  };

  record(1, "gradient integrity", gradient_integrity);
  record(2, "oracle equivalence", oracle_equivalence);
  std::vector<RunRecord> runs;
  if (selected.count(5) || selected.count(6)) {
    try {
      RunConfig base;
      apply_config_file(base, config);
      const Dataset data = resolve_dataset(base);
      auto cells = ablation_grid("acceptance");
      if (!selected.count(6)) cells.resize(1);
      std::cerr << "training " << cells.size() << " cells x 3 seeds with " << config << "\n";
      runs = train_cells(base, cells, data, out);
    } catch (const std::exception& e) {
      std::cerr << "training failed: " << e.what() << "\n";
    }
  }
  std::vector<EvalSummary> evals;
  for (const auto& r : runs) evals.insert(evals.end(), r.history.begin(), r.history.end());

  record(3, "metric exactness", [&] { return metric_exactness(evals); });
  record(4, "alignment invariants", alignment_invariants);
  record(7, "determinism and persistence", [&] { return determinism(out); });
  record(8, "loss anchors", loss_anchors);
  record(5, "toy training", [&] {
    if (runs.empty()) throw std::runtime_error("no training runs");
    return toy_training(runs);
  });
  record(6, "directional ablation", [&] {
    if (runs.empty()) throw std::runtime_error("no training runs");
    return directional_ablation(runs);
  });

  bool all = true;
  for (const auto& [id, o] : results) {
    std::cout << (o.pass ? "PASS " : "FAIL ") << id << " " << o.detail << "\n";
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
