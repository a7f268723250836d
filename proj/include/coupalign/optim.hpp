#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "coupalign/config.hpp"
#include "coupalign/nn.hpp"

namespace coupalign {

/// lr(t) = (lr0 - lr_end)·(1 - t/t_max)^p + lr_end, held at lr_end once t ≥ t_max.
inline double poly_lr(double epoch, const OptimConfig& o) {
  const double t = std::clamp(epoch, 0.0, o.max_decay_epoch);
  return (o.lr0 - o.lr_end) * std::pow(1.0 - t / o.max_decay_epoch, o.power) + o.lr_end;
}

/// AdamW with decoupled weight decay: θ ← θ - lr·wd·θ, then the bias-corrected
/// Adam step. Moments are kept in double regardless of the parameter type.
template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamStore<T>& ps, const OptimConfig& cfg) : cfg_(cfg) {
    for (const auto& [name, t] : ps.parameters()) {
      m_.emplace_back(t.numel(), 0.0);
      v_.emplace_back(t.numel(), 0.0);
    }
  }

  std::size_t steps() const { return steps_; }
  void set_steps(std::size_t s) { steps_ = s; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

  /// Parameters without a gradient buffer are treated as having zero gradient.
  void step(ParamStore<T>& ps, double lr) {
    const auto& params = ps.parameters();
    if (params.size() != m_.size()) throw ContractError("AdamW: parameter set changed since construction");
    for (const auto& [name, t] : params) {
      if (t.has_grad() && !all_finite<T>(t.grad())) throw NumericError("non-finite gradient in parameter '" + name + "'");
    }
    ++steps_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor<T> t = params[k].second;
      auto theta = t.mutable_data();
      const bool has_grad = t.has_grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = has_grad ? static_cast<double>(t.grad()[i]) : 0.0;
        double th = static_cast<double>(theta[i]);
        th -= lr * cfg_.weight_decay * th;
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        th -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
        theta[i] = static_cast<T>(th);
      }
    }
  }

 private:
  OptimConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t steps_ = 0;
};

}  // namespace coupalign
