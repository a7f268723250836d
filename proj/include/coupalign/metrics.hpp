#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "coupalign/errors.hpp"

namespace coupalign {

struct EvalSummary {
  double oiou = 0, miou = 0, prec50 = 0, prec70 = 0, prec90 = 0;
  std::size_t n = 0;
};

inline constexpr std::array<double, 6> kHistogramEdges{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};

/// Exact integer intersection/union counts plus the per-sample IoU list.
class EvalAccumulator {
 public:
  struct Counts {
    std::uint64_t intersection = 0, uni = 0;
  };

  static Counts count(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
    if (pred.size() != gt.size()) {
      throw InputError("accumulate: prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                       std::to_string(gt.size()));
    }
    Counts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred[i] != 0, g = gt[i] != 0;
      c.intersection += p && g;
      c.uni += p || g;
    }
    return c;
  }

  /// Empty prediction against empty ground truth scores IoU 1.
  static double iou(const Counts& c) {
    return c.uni == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(c.uni);
  }

  void accumulate(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
    const Counts c = count(pred, gt);
    intersection_ += c.intersection;
    union_ += c.uni;
    ious_.push_back(iou(c));
  }

  void merge(const EvalAccumulator& other) {
    intersection_ += other.intersection_;
    union_ += other.union_;
    ious_.insert(ious_.end(), other.ious_.begin(), other.ious_.end());
  }

  std::uint64_t total_intersection() const { return intersection_; }
  std::uint64_t total_union() const { return union_; }
  const std::vector<double>& ious() const { return ious_; }
  std::size_t size() const { return ious_.size(); }

  EvalSummary finalize() const {
    if (ious_.empty()) throw ContractError("finalize: no samples accumulated");
    EvalSummary s;
    s.n = ious_.size();
    s.oiou = union_ == 0 ? 1.0 : static_cast<double>(intersection_) / static_cast<double>(union_);
    std::size_t over50 = 0, over70 = 0, over90 = 0;
    double total = 0;
    for (double v : ious_) {
      total += v;
      over50 += v > 0.5;
      over70 += v > 0.7;
      over90 += v > 0.9;
    }
    const double n = static_cast<double>(s.n);
    s.miou = total / n;
    s.prec50 = static_cast<double>(over50) / n;
    s.prec70 = static_cast<double>(over70) / n;
    s.prec90 = static_cast<double>(over90) / n;
    return s;
  }

  /// Failure cases (IoU < 0.5) per half-open bucket [edges[k], edges[k+1]).
  std::vector<std::size_t> iou_histogram(const std::vector<double>& edges = {kHistogramEdges.begin(),
                                                                             kHistogramEdges.end()}) const {
    if (edges.size() < 2) throw ContractError("iou_histogram: need at least two edges");
    std::vector<std::size_t> counts(edges.size() - 1, 0);
    for (double v : ious_) {
      for (std::size_t k = 0; k + 1 < edges.size(); ++k) {
        if (v >= edges[k] && v < edges[k + 1]) {
          ++counts[k];
          break;
        }
      }
    }
    return counts;
  }

 private:
  std::uint64_t intersection_ = 0, union_ = 0;
  std::vector<double> ious_;
};

}  // namespace coupalign
