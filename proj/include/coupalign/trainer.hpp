#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "coupalign/data_synth.hpp"
#include "coupalign/losses.hpp"
#include "coupalign/metrics.hpp"
#include "coupalign/model.hpp"
#include "coupalign/optim.hpp"

namespace coupalign {

namespace fs = std::filesystem;

inline std::string fmt_value(double v) { return detail::fmt_double(v); }

struct TraceRow {
  std::size_t step = 0;
  double total = 0, seg = 0, aux = 0, lr = 0;
};

/// Binarized predictions (σ(M') ≥ 0.5, i.e. logit ≥ 0) scored against the masks.
template <class T>
EvalAccumulator evaluate(const CoupAlign<T>& model, const std::vector<Sample>& samples, std::size_t batch = 16) {
  NoGradScope<T> no_grad;
  EvalAccumulator acc;
  for (std::size_t b = 0; b < samples.size(); b += batch) {
    const std::size_t e = std::min(samples.size(), b + batch);
    std::vector<Tensor<T>> images;
    std::vector<std::vector<int>> tokens;
    for (std::size_t i = b; i < e; ++i) {
      images.push_back(samples[i].image_tensor<T>());
      tokens.push_back(samples[i].tokens);
    }
    const auto preds = model.forward(images, tokens, false);
    for (std::size_t i = b; i < e; ++i) {
      const auto& logits = preds[i - b].logits.values();
      std::vector<std::uint8_t> bits(logits.size());
      for (std::size_t p = 0; p < logits.size(); ++p) bits[p] = logits[p] >= T(0);
      acc.accumulate(bits, samples[i].mask_bits());
    }
  }
  return acc;
}

inline std::string metrics_header() { return "split,oIoU,mIoU,prec50,prec70,prec90,n"; }

inline std::string metrics_row(const std::string& split, const EvalSummary& s) {
  return split + "," + fmt_value(s.oiou) + "," + fmt_value(s.miou) + "," + fmt_value(s.prec50) + "," +
         fmt_value(s.prec70) + "," + fmt_value(s.prec90) + "," + std::to_string(s.n);
}

/// Resolves the dataset a config refers to: loaded from `data.dir` when set,
/// otherwise generated in memory.
inline Dataset resolve_dataset(const RunConfig& cfg) {
  if (!cfg.data.dir.empty()) return load_dataset(cfg.data.dir);
  return generate_dataset(cfg.data, cfg.model.image_size, cfg.model.t_max);
}

struct TrainOptions {
  fs::path out_dir;             // empty: nothing is written
  std::ostream* log = nullptr;  // per-epoch progress lines
  bool eval_each_epoch = true;
};

/// Step-at-a-time trainer. Shuffling is derived from (seed, epoch) so the
/// whole state fits in a checkpoint: parameters, buffers, optimizer moments
/// and the (epoch, batch) position.
class Trainer {
 public:
  using Model = CoupAlign<float>;

  Trainer(const RunConfig& cfg, const Dataset& data, TrainOptions opts = {})
      : cfg_(cfg), data_(data), opts_(std::move(opts)), model_(std::make_unique<Model>(cfg.model, cfg.seed)) {
    cfg_.validate();
    if (data_.train.empty()) throw DataError("training split is empty");
    for (const auto* split : {&data_.train, &data_.val, &data_.test}) {
      for (const auto& s : *split) {
        if (s.height != cfg_.model.image_size || s.width != cfg_.model.image_size) {
          throw DataError("sample of size " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                          " does not match model.image_size " + std::to_string(cfg_.model.image_size));
        }
        if (s.tokens.size() != cfg_.model.t_max) throw DataError("token sequence length does not match model.t_max");
      }
    }
    opt_ = AdamW<float>(model_->params(), cfg_.optim);
    batches_per_epoch_ = (data_.train.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    if (!opts_.out_dir.empty()) {
      fs::create_directories(opts_.out_dir);
      std::ofstream(opts_.out_dir / "config.resolved.txt") << cfg_.resolved();
    }
  }

  const RunConfig& config() const { return cfg_; }
  Model& model() { return *model_; }
  const Model& model() const { return *model_; }
  const std::vector<TraceRow>& trace() const { return trace_; }
  const std::vector<EvalSummary>& val_history() const { return val_history_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t step_count() const { return opt_.steps(); }
  bool done() const { return epoch_ >= cfg_.epochs; }
  const std::optional<EvalSummary>& best_val() const { return best_val_; }
  std::size_t best_epoch() const { return best_epoch_; }

  /// Order of training indices for an epoch.
  std::vector<std::size_t> epoch_order(std::size_t epoch) const {
    std::vector<std::size_t> order(data_.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(splitmix64(cfg_.seed ^ splitmix64(0x5348554646ULL + epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  }

  double current_lr() const {
    return poly_lr(static_cast<double>(epoch_) + static_cast<double>(batch_) / static_cast<double>(batches_per_epoch_),
                   cfg_.optim);
  }

  /// One optimizer step on the next batch; finishes the epoch (validation,
  /// checkpoints) when the batch was the epoch's last.
  LossReport step() {
    if (done()) throw ContractError("train step after the final epoch");
    if (order_epoch_ != epoch_) {
      order_ = epoch_order(epoch_);
      order_epoch_ = epoch_;
    }
    const std::size_t b0 = batch_ * cfg_.batch_size, b1 = std::min(order_.size(), b0 + cfg_.batch_size);
    std::vector<Tensor<float>> images, masks;
    std::vector<std::vector<int>> tokens;
    for (std::size_t i = b0; i < b1; ++i) {
      const Sample& s = data_.train[order_[i]];
      images.push_back(s.image_tensor<float>());
      masks.push_back(s.mask_tensor<float>());
      tokens.push_back(s.tokens);
    }
    const double lr = current_lr();
    LossReport report;
    model_->params().zero_grad();
    {
      Tape<float> tape;
      TapeScope<float> scope(tape);
      const auto preds = model_->forward(images, tokens, true);
      std::vector<Tensor<float>> logits, y1;
      for (const auto& p : preds) {
        logits.push_back(p.logits);
        y1.push_back(p.y1);
      }
      const Tensor<float> loss = total_loss(logits, y1, masks, cfg_.loss.lambda, cfg_.loss.tau, cfg_.loss.aux_enabled,
                                            cfg_.loss.aux_normalize, &report);
      if (!std::isfinite(report.total)) abort_numeric("loss became " + fmt_value(report.total));
      try {
        backward(loss);
      } catch (const NumericError& e) {
        abort_numeric(e.what());
      }
    }
    try {
      opt_.step(model_->params(), lr);
    } catch (const NumericError& e) {
      abort_numeric(e.what());
    }
    trace_.push_back(TraceRow{opt_.steps(), report.total, report.seg, report.aux, lr});
    if (++batch_ == batches_per_epoch_) finish_epoch();
    return report;
  }

  /// Trains until the configured number of epochs is done (or `max_steps`
  /// further steps have run), then writes the trace and final metrics.
  void run(std::size_t max_steps = 0) {
    std::size_t n = 0;
    while (!done() && (max_steps == 0 || n < max_steps)) {
      step();
      ++n;
    }
    if (!opts_.out_dir.empty()) write_trace(opts_.out_dir / "trace.csv");
    if (done()) finish_run();
  }

  void write_trace(const fs::path& path) const {
    std::ofstream f(path);
    f << "step,loss_total,loss_seg,loss_aux,lr\n";
    for (const auto& r : trace_) {
      f << r.step << ',' << fmt_value(r.total) << ',' << fmt_value(r.seg) << ',' << fmt_value(r.aux) << ','
        << fmt_value(r.lr) << '\n';
    }
  }

  std::vector<catn::Entry> checkpoint_entries() const {
    std::vector<catn::Entry> out = model_->params().to_entries();
    const auto& params = model_->params().parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      out.push_back(catn::Entry{"opt.m." + params[k].first, params[k].second.shape(), opt_.first_moments()[k]});
      out.push_back(catn::Entry{"opt.v." + params[k].first, params[k].second.shape(), opt_.second_moments()[k]});
    }
    const std::uint64_t hash = cfg_.hash();
    std::vector<double> meta{static_cast<double>(opt_.steps()),
                             static_cast<double>(epoch_),
                             static_cast<double>(batch_),
                             static_cast<double>(cfg_.seed & 0xffffffffULL),
                             static_cast<double>(cfg_.seed >> 32),
                             static_cast<double>(hash & 0xffffffffULL),
                             static_cast<double>(hash >> 32),
                             static_cast<double>(best_epoch_)};
    out.push_back(catn::Entry{"meta.state", {meta.size()}, meta});
    std::vector<double> trace;
    for (const auto& r : trace_) trace.insert(trace.end(), {static_cast<double>(r.step), r.total, r.seg, r.aux, r.lr});
    if (!trace.empty()) out.push_back(catn::Entry{"meta.trace", {trace_.size(), 5}, trace});
    std::vector<double> history;
    for (const auto& v : val_history_) {
      const auto row = summary_values(v);
      history.insert(history.end(), row.begin(), row.end());
    }
    if (!history.empty()) out.push_back(catn::Entry{"meta.val_history", {val_history_.size(), 6}, history});
    if (best_val_) {
      out.push_back(catn::Entry{"meta.best_val", {6}, summary_values(*best_val_)});
      for (const auto& e : best_params_) {
        catn::Entry copy = e;
        copy.name = "best." + e.name;
        out.push_back(std::move(copy));
      }
    }
    return out;
  }

  void save_checkpoint(const fs::path& path) const { catn::save(path, checkpoint_entries()); }

  /// Restores a checkpoint written by a run with the identical config.
  void load_checkpoint(const fs::path& path) {
    const auto entries = catn::load(path);
    const auto& meta_e = catn::find(entries, "meta.state");
    if (meta_e.dtype() != catn::DType::f64 || meta_e.shape != Shape{8}) throw DataError("malformed checkpoint state");
    const auto& meta = std::get<1>(meta_e.values);
    const std::uint64_t hash = static_cast<std::uint64_t>(meta[5]) | (static_cast<std::uint64_t>(meta[6]) << 32);
    if (hash != cfg_.hash()) throw ConfigError("checkpoint " + path.string() + " was written with a different config");
    model_->params().load_entries(entries);
    const auto& params = model_->params().parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      for (auto [prefix, dst] : {std::pair{"opt.m.", &opt_.first_moments()[k]},
                                 std::pair{"opt.v.", &opt_.second_moments()[k]}}) {
        const auto& e = catn::find(entries, prefix + params[k].first);
        if (e.dtype() != catn::DType::f64 || e.shape != params[k].second.shape()) {
          throw DataError("malformed optimizer moment for '" + params[k].first + "'");
        }
        *dst = std::get<1>(e.values);
      }
    }
    opt_.set_steps(static_cast<std::size_t>(meta[0]));
    epoch_ = static_cast<std::size_t>(meta[1]);
    batch_ = static_cast<std::size_t>(meta[2]);
    best_epoch_ = static_cast<std::size_t>(meta[7]);
    trace_.clear();
    val_history_.clear();
    best_val_.reset();
    best_params_.clear();
    for (const auto& e : entries) {
      if (e.name.rfind("best.", 0) == 0) {
        catn::Entry copy = e;
        copy.name = e.name.substr(5);
        best_params_.push_back(std::move(copy));
      }
      if (e.dtype() != catn::DType::f64) continue;
      const auto& v = std::get<1>(e.values);
      if (e.name == "meta.trace") {
        for (std::size_t i = 0; i + 4 < v.size(); i += 5) {
          trace_.push_back(TraceRow{static_cast<std::size_t>(v[i]), v[i + 1], v[i + 2], v[i + 3], v[i + 4]});
        }
      } else if (e.name == "meta.val_history") {
        for (std::size_t i = 0; i + 5 < v.size(); i += 6) val_history_.push_back(summary_from(v.data() + i));
      } else if (e.name == "meta.best_val") {
        best_val_ = summary_from(v.data());
      }
    }
  }

 private:
  static std::vector<double> summary_values(const EvalSummary& s) {
    return {s.oiou, s.miou, s.prec50, s.prec70, s.prec90, static_cast<double>(s.n)};
  }
  static EvalSummary summary_from(const double* v) {
    return EvalSummary{v[0], v[1], v[2], v[3], v[4], static_cast<std::size_t>(v[5])};
  }

  [[noreturn]] void abort_numeric(const std::string& what) {
    if (!opts_.out_dir.empty()) write_trace(opts_.out_dir / "trace.csv");
    throw NumericError("training aborted at step " + std::to_string(opt_.steps() + 1) + ": " + what +
                       (opts_.out_dir.empty() ? "" : "; last good checkpoint is last.catn"));
  }

  void finish_epoch() {
    batch_ = 0;
    ++epoch_;
    if (opts_.eval_each_epoch && !data_.val.empty()) {
      const EvalSummary s = evaluate(*model_, data_.val).finalize();
      val_history_.push_back(s);
      if (!best_val_ || s.oiou > best_val_->oiou) {
        best_val_ = s;
        best_epoch_ = epoch_;
        best_params_ = model_->params().to_entries();
        if (!opts_.out_dir.empty()) catn::save(opts_.out_dir / "best.catn", best_params_);
      }
      if (opts_.log) {
        *opts_.log << "epoch " << epoch_ << "/" << cfg_.epochs << " loss " << trace_.back().total << " val oIoU "
                   << s.oiou << " mIoU " << s.miou << " prec@0.5 " << s.prec50 << "\n";
        opts_.log->flush();
      }
    }
    if (!opts_.out_dir.empty()) {
      save_checkpoint(opts_.out_dir / "last.catn");
      std::ofstream f(opts_.out_dir / "val_history.csv");
      f << "epoch,oIoU,mIoU,prec50,prec70,prec90,n\n";
      for (std::size_t i = 0; i < val_history_.size(); ++i) {
        f << metrics_row(std::to_string(i + 1), val_history_[i]) << '\n';
      }
    }
  }

  /// Test split scored once with the best-validation parameters.
  void finish_run() {
    if (opts_.out_dir.empty() || !best_val_) return;
    Model best(cfg_.model, cfg_.seed);
    best.params().load_entries(best_params_);
    std::ofstream m(opts_.out_dir / "metrics.csv");
    m << metrics_header() << '\n' << metrics_row("val", *best_val_) << '\n';
    std::vector<std::size_t> hist;
    if (!data_.test.empty()) {
      const EvalAccumulator acc = evaluate(best, data_.test);
      m << metrics_row("test", acc.finalize()) << '\n';
      hist = acc.iou_histogram();
    } else {
      hist = evaluate(best, data_.val).iou_histogram();
    }
    std::ofstream h(opts_.out_dir / "histogram.csv");
    h << "lo,hi,count\n";
    for (std::size_t k = 0; k < hist.size(); ++k) {
      h << fmt_value(kHistogramEdges[k]) << ',' << fmt_value(kHistogramEdges[k + 1]) << ',' << hist[k] << '\n';
    }
  }

  RunConfig cfg_;
  const Dataset& data_;
  TrainOptions opts_;
  std::unique_ptr<Model> model_;
  AdamW<float> opt_;
  std::size_t batches_per_epoch_ = 0;
  std::size_t epoch_ = 0, batch_ = 0;
  std::size_t order_epoch_ = static_cast<std::size_t>(-1);
  std::vector<std::size_t> order_;
  std::vector<TraceRow> trace_;
  std::vector<EvalSummary> val_history_;
  std::optional<EvalSummary> best_val_;
  std::size_t best_epoch_ = 0;
  std::vector<catn::Entry> best_params_;
};

}  // namespace coupalign
