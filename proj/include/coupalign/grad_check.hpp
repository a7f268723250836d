#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "coupalign/ops.hpp"
#include "coupalign/tensor.hpp"

namespace coupalign {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded_kinks = 0;
  std::string worst;  // "<tensor index>[<coordinate>]" of the largest error
};

struct GradCheckOptions {
  double h = 1e-5;
  std::size_t max_coords_per_tensor = 0;  // 0 checks every coordinate
  std::uint64_t seed = 0;
  double floor = 1e-8;  // smallest denominator of the relative error
};

/// Compares reverse-mode gradients against central differences, perturbing
/// every (or a sampled subset of) coordinate of each tensor in `inputs`. The
/// objective is the sum of the tensor built by `f`; a scalar is the common
/// case. Differences are taken term by term and summed with compensation, so
/// returning additive terms instead of their sum lowers the FD roundoff. The
/// error per coordinate is |analytic - fd| / max(|analytic|, |fd|, floor).
/// Coordinates sitting on a kink (left and right one-sided slopes disagree)
/// are excluded.
template <class F>
GradCheckResult grad_check(F&& f, std::vector<Tensor<double>> inputs, GradCheckOptions opts = {}) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  std::vector<double> base;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const Tensor<double> terms = f();
    if (!terms.defined() || terms.numel() == 0) throw ContractError("grad_check: builder returned no value");
    base = terms.values();
    for (double v : base)
      if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss value");
    const Tensor<double> loss = terms.numel() == 1 ? terms : sum(terms);
    if (loss.requires_grad()) tape.backward(loss);
  }
  auto eval = [&]() {
    NoGradScope<double> off;
    std::vector<double> v = f().values();
    if (v.size() != base.size()) throw ContractError("grad_check: builder output changed size");
    for (double x : v)
      if (!std::isfinite(x)) throw NumericError("grad_check: non-finite loss under perturbation");
    return v;
  };
  auto diff = [](const std::vector<double>& a, const std::vector<double>& b) {
    detail::CompensatedSum<double> s;
    for (std::size_t i = 0; i < a.size(); ++i) s.add(a[i] - b[i]);
    return s.value();
  };

  GradCheckResult result;
  std::mt19937_64 rng(opts.seed);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor<double>& x = inputs[t];
    std::vector<double> analytic(x.numel(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    std::vector<std::size_t> coords(x.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_tensor && coords.size() > opts.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    auto values = x.mutable_data();
    for (std::size_t i : coords) {
      const double saved = values[i];
      values[i] = saved + opts.h;
      const std::vector<double> up = eval();
      values[i] = saved - opts.h;
      const std::vector<double> down = eval();
      values[i] = saved;
      const double right = diff(up, base) / opts.h;
      const double left = diff(base, down) / opts.h;
      const double slope = std::max(std::abs(right), std::abs(left));
      if (slope > 1e-10 && std::abs(right - left) > 0.5 * slope) {
        ++result.excluded_kinks;
        continue;
      }
      const double fd = diff(up, down) / (2.0 * opts.h);
      const double a = analytic[i];
      const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), opts.floor});
      ++result.checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = std::to_string(t) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

}  // namespace coupalign
