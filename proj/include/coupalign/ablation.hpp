#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "coupalign/trainer.hpp"

namespace coupalign {

struct AblationCell {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;
};

struct AblationRow {
  std::string cell;
  std::uint64_t seed = 0;
  EvalSummary val;  // at the best-oIoU epoch
  std::size_t best_epoch = 0;
};

struct AblationSummary {
  std::string cell;
  std::size_t runs = 0;
  double miou_mean = 0, miou_sd = 0, oiou_mean = 0, oiou_sd = 0, prec50_mean = 0;
};

/// Named grids: "components" ({off,uni,bi} WPA × SMA on/off × aux on/off),
/// "stages" (WPA stage subsets), "queries" (N sweep) and "acceptance" (the
/// five cells compared by the directional ablation check).
inline std::vector<AblationCell> ablation_grid(const std::string& name) {
  std::vector<AblationCell> cells;
  if (name == "components") {
    for (const char* mode : {"off", "uni", "bi"})
      for (const char* sma : {"true", "false"})
        for (const char* aux : {"true", "false"}) {
          cells.push_back({std::string("wpa=") + mode + " sma=" + (sma[0] == 't' ? "on" : "off") +
                               " aux=" + (aux[0] == 't' ? "on" : "off"),
                           {{"wpa.mode", mode}, {"sma.enabled", sma}, {"aux.enabled", aux}}});
        }
  } else if (name == "stages") {
    for (const char* st : {"1,2,3,4", "1,2", "3,4", "4", "3", "2", "1"}) {
      cells.push_back({std::string("stages=") + st, {{"wpa.mode", "bi"}, {"wpa.stages", st}}});
    }
  } else if (name == "queries") {
    for (const char* n : {"4", "16", "64"}) cells.push_back({std::string("N=") + n, {{"model.n_queries", n}}});
  } else if (name == "acceptance") {
    cells = {{"full", {}},
             {"uni-wpa", {{"wpa.mode", "uni"}}},
             {"no-wpa", {{"wpa.mode", "off"}}},
             {"sma-off", {{"sma.enabled", "false"}}},
             {"aux-off", {{"aux.enabled", "false"}}}};
  } else {
    throw ConfigError("unknown ablation grid '" + name + "' (components, stages, queries, acceptance)");
  }
  return cells;
}

/// Trains every cell with seeds base.seed, base.seed+1, ... on one dataset.
/// `out_root`, when set, receives one run directory per (cell, seed).
inline std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<AblationCell>& cells,
                                             std::size_t seeds, const Dataset& data, const fs::path& out_root = {},
                                             std::ostream* log = nullptr) {
  std::vector<AblationRow> rows;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (std::size_t k = 0; k < seeds; ++k) {
      RunConfig cfg = base;
      for (const auto& [key, value] : cells[c].overrides) cfg.set(key, value);
      cfg.seed = base.seed + k;
      TrainOptions opts;
      if (!out_root.empty()) opts.out_dir = out_root / ("cell" + std::to_string(c) + "_seed" + std::to_string(cfg.seed));
      Trainer trainer(cfg, data, opts);
      trainer.run();
      if (!trainer.best_val()) throw ContractError("ablation run produced no validation metrics");
      rows.push_back({cells[c].name, cfg.seed, *trainer.best_val(), trainer.best_epoch()});
      if (log) {
        *log << cells[c].name << " seed " << cfg.seed << ": val mIoU " << rows.back().val.miou << " oIoU "
             << rows.back().val.oiou << " prec@0.5 " << rows.back().val.prec50 << "\n";
        log->flush();
      }
    }
  }
  return rows;
}

inline std::vector<AblationSummary> summarize(const std::vector<AblationRow>& rows) {
  std::vector<AblationSummary> out;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const AblationSummary& s) { return s.cell == r.cell; });
    if (it == out.end()) {
      out.push_back({r.cell});
      it = out.end() - 1;
    }
    ++it->runs;
  }
  for (auto& s : out) {
    std::vector<double> miou, oiou;
    double p50 = 0;
    for (const auto& r : rows) {
      if (r.cell != s.cell) continue;
      miou.push_back(r.val.miou);
      oiou.push_back(r.val.oiou);
      p50 += r.val.prec50;
    }
    auto mean_sd = [](const std::vector<double>& v) {
      double m = 0;
      for (double x : v) m += x;
      m /= static_cast<double>(v.size());
      double ss = 0;
      for (double x : v) ss += (x - m) * (x - m);
      return std::pair{m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
    };
    std::tie(s.miou_mean, s.miou_sd) = mean_sd(miou);
    std::tie(s.oiou_mean, s.oiou_sd) = mean_sd(oiou);
    s.prec50_mean = p50 / static_cast<double>(s.runs);
  }
  return out;
}

inline std::string ablation_rows_csv(const std::vector<AblationRow>& rows) {
  std::string out = "cell,seed,oIoU,mIoU,prec50,prec70,prec90,n,best_epoch\n";
  for (const auto& r : rows) {
    const std::string m = metrics_row(r.cell, r.val);
    out += r.cell + "," + std::to_string(r.seed) + m.substr(r.cell.size()) + "," + std::to_string(r.best_epoch) + "\n";
  }
  return out;
}

inline std::string ablation_summary_csv(const std::vector<AblationSummary>& s) {
  std::string out = "cell,runs,mIoU_mean,mIoU_sd,oIoU_mean,oIoU_sd,prec50_mean\n";
  for (const auto& x : s) {
    out += x.cell + "," + std::to_string(x.runs) + "," + fmt_value(x.miou_mean) + "," + fmt_value(x.miou_sd) + "," +
           fmt_value(x.oiou_mean) + "," + fmt_value(x.oiou_sd) + "," + fmt_value(x.prec50_mean) + "\n";
  }
  return out;
}

inline std::string ablation_table(const std::vector<AblationSummary>& s) {
  std::size_t width = 4;
  for (const auto& x : s) width = std::max(width, x.cell.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width)) << "cell" << "  runs  mIoU (mean ± sd)   oIoU (mean ± sd)   prec@0.5\n";
  out << std::fixed << std::setprecision(4);
  for (const auto& x : s) {
    out << std::left << std::setw(static_cast<int>(width)) << x.cell << "  " << std::setw(4) << x.runs << "  "
        << x.miou_mean << " ± " << x.miou_sd << "   " << x.oiou_mean << " ± " << x.oiou_sd << "   " << x.prec50_mean
        << "\n";
  }
  return out.str();
}

}  // namespace coupalign
