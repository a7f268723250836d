#pragma once

// Differentiable tensor primitives. Every op computes its forward value
// eagerly and, when an input requires grad and a tape is active, records a
// backward rule that accumulates into the inputs' grad buffers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "coupalign/tensor.hpp"

namespace coupalign {

inline constexpr double kNormEps = 1e-12;
inline constexpr double kVarianceFloor = 1e-5;

namespace detail {

template <class T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s.at(axis), 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class T, class F, class DA, class DB>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (a.shape() != b.shape() && !a_scalar && !b_scalar) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " do not broadcast");
  }
  const Shape out_shape = (a_scalar && !b_scalar) ? b.shape() : a.shape();
  const std::size_t n = numel(out_shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = f(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
  Tensor<T> out(out_shape, std::move(y));
  if (tracking<T>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record<T>(op, out, {an, bn}, [=]() {
      const T* g = on->grad.data();
      T* ga = grad_sink(an);
      T* gb = grad_sink(bn);
      for (std::size_t i = 0; i < n; ++i) {
        const T x = an->data[a_scalar ? 0 : i];
        const T z = bn->data[b_scalar ? 0 : i];
        if (ga) ga[a_scalar ? 0 : i] += g[i] * da(x, z);
        if (gb) gb[b_scalar ? 0 : i] += g[i] * db(x, z);
      }
    });
  }
  return out;
}

template <class T, class F, class D>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, D d) {
  const auto& xv = x.values();
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  Tensor<T> out(x.shape(), std::move(y));
  if (tracking<T>({&x})) {
    auto xn = x.node(), on = out.node();
    record<T>(op, out, {xn}, [=]() {
      T* gx = grad_sink(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < on->data.size(); ++i) gx[i] += on->grad[i] * d(xn->data[i], on->data[i]);
    });
  }
  return out;
}

}  // namespace detail

/// C = A·B for A [m×k], B [k×n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const T* A = a.values().data();
  const T* B = b.values().data();
  std::vector<T> c(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = A[i * k + p];
      const T* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  Tensor<T> out({m, n}, std::move(c));
  if (detail::tracking<T>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::record<T>("matmul", out, {an, bn}, [=]() {
      const T* g = on->grad.data();
      const T* Ad = an->data.data();
      const T* Bd = bn->data.data();
      if (T* ga = detail::grad_sink(an)) {
        // dA = dC·Bᵀ
        for (std::size_t i = 0; i < m; ++i) {
          const T* grow = g + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const T* brow = Bd + p * n;
            T s = 0;
            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            ga[i * k + p] += s;
          }
        }
      }
      if (T* gb = detail::grad_sink(bn)) {
        // dB = Aᵀ·dC
        for (std::size_t i = 0; i < m; ++i) {
          const T* grow = g + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const T aip = Ad[i * k + p];
            T* gbrow = gb + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
          }
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  const auto& xv = x.values();
  std::vector<T> y(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = xv[i * c + j];
  Tensor<T> out({c, r}, std::move(y));
  if (detail::tracking<T>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::record<T>("transpose", out, {xn}, [=]() {
      T* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += on->grad[j * r + i];
    });
  }
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary<T>(
      "scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  // Subgradient at exactly 0 is 0.
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

/// Adds `bias` (numel == last extent of x) to every trailing-axis slice.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t c = x.shape().back();
  if (bias.numel() != c) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / c;
  std::vector<T> y(x.values());
  const auto& bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] += bv[j];
  Tensor<T> out(x.shape(), std::move(y));
  if (detail::tracking<T>({&x, &bias})) {
    auto xn = x.node(), bn = bias.node(), on = out.node();
    detail::record<T>("add_bias", out, {xn, bn}, [=]() {
      const T* g = on->grad.data();
      if (T* gx = detail::grad_sink(xn))
        for (std::size_t i = 0; i < rows * c; ++i) gx[i] += g[i];
      if (T* gb = detail::grad_sink(bn))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
    });
  }
  return out;
}

/// Numerically stable softmax along `axis` (max subtraction).
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  }
  const auto s = detail::split_axis(x.shape(), axis);
  const auto& xv = x.values();
  std::vector<T> y(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t a = 0; a < s.extent; ++a) mx = std::max(mx, xv[base + a * s.inner]);
      T sum = 0;
      for (std::size_t a = 0; a < s.extent; ++a) {
        const T e = std::exp(xv[base + a * s.inner] - mx);
        y[base + a * s.inner] = e;
        sum += e;
      }
      for (std::size_t a = 0; a < s.extent; ++a) y[base + a * s.inner] /= sum;
    }
  }
  Tensor<T> out(x.shape(), std::move(y));
  if (detail::tracking<T>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::record<T>("softmax", out, {xn}, [=]() {
      T* gx = detail::grad_sink(xn);
      if (!gx) return;
      const T* g = on->grad.data();
      const T* yv = on->data.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          T dot = 0;
          for (std::size_t a = 0; a < s.extent; ++a) dot += g[base + a * s.inner] * yv[base + a * s.inner];
          for (std::size_t a = 0; a < s.extent; ++a) {
            const std::size_t i = base + a * s.inner;
            gx[i] += yv[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

/// Row-wise softmax of x [R×C] restricted to columns with valid[c] != 0.
/// Masked columns receive exactly zero probability.
template <class T>
Tensor<T> masked_softmax(const Tensor<T>& x, const std::vector<std::uint8_t>& valid) {
  detail::require_rank(x, 2, "masked_softmax");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (valid.size() != c) {
    throw DimensionError("masked_softmax: mask of length " + std::to_string(valid.size()) +
                         " for " + shape_str(x.shape()));
  }
  if (std::none_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; })) {
    throw ContractError("masked_softmax: every column is masked");
  }
  const auto& xv = x.values();
  std::vector<T> y(xv.size(), T(0));
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * c;
    T* yrow = y.data() + i * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (valid[j]) mx = std::max(mx, row[j]);
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!valid[j]) continue;
      yrow[j] = std::exp(row[j] - mx);
      sum += yrow[j];
    }
    for (std::size_t j = 0; j < c; ++j) yrow[j] /= sum;
  }
  Tensor<T> out(x.shape(), std::move(y));
  if (detail::tracking<T>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::record<T>("masked_softmax", out, {xn}, [=]() {
      T* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < r; ++i) {
        const T* g = on->grad.data() + i * c;
        const T* yv = on->data.data() + i * c;
        T dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += g[j] * yv[j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += yv[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

/// log(softmax(x)) along the last axis.
template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  const auto& xv = x.values();
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = xv.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = row[j] - lse;
  }
  Tensor<T> out(x.shape(), std::move(y));
  if (detail::tracking<T>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::record<T>("log_softmax", out, {xn}, [=]() {
      T* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < rows; ++i) {
        const T* g = on->grad.data() + i * c;
        const T* yv = on->data.data() + i * c;
        T gsum = 0;
        for (std::size_t j = 0; j < c; ++j) gsum += g[j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j] - std::exp(yv[j]) * gsum;
      }
    });
  }
  return out;
}

/// Joins tensors along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(first) +
                           " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  const auto os = detail::split_axis(out_shape, axis);
  std::vector<T> y(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t ext = p.shape()[axis];
    const auto& pv = p.values();
    for (std::size_t o = 0; o < os.outer; ++o)
      std::copy_n(pv.data() + o * ext * os.inner, ext * os.inner,
                  y.data() + (o * os.extent + off) * os.inner);
    off += ext;
  }
  Tensor<T> out(out_shape, std::move(y));
  bool track = false;
  for (const auto& p : parts) track = track || detail::tracking<T>({&p});
  if (track) {
    std::vector<NodePtr<T>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto on = out.node();
    detail::record<T>("concat", out, nodes, [=]() {
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        T* gp = detail::grad_sink(nodes[k]);
        if (!gp) continue;
        const std::size_t ext = nodes[k]->shape[axis];
        for (std::size_t o = 0; o < os.outer; ++o) {
          const T* src = on->grad.data() + (o * os.extent + offsets[k]) * os.inner;
          T* dst = gp + o * ext * os.inner;
          for (std::size_t i = 0; i < ext * os.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

/// x[..., begin:end, ...] along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis)) {
    throw DimensionError("slice: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const auto s = detail::split_axis(x.shape(), axis);
  const std::size_t ext = end - begin;
  Shape out_shape = x.shape();
  out_shape[axis] = ext;
  std::vector<T> y(numel(out_shape));
  const auto& xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.data() + (o * s.extent + begin) * s.inner, ext * s.inner,
                y.data() + o * ext * s.inner);
  Tensor<T> out(out_shape, std::move(y));
  if (detail::tracking<T>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::record<T>("slice", out, {xn}, [=]() {
      T* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t o = 0; o < s.outer; ++o) {
        const T* src = on->grad.data() + o * ext * s.inner;
        T* dst = gx + (o * s.extent + begin) * s.inner;
        for (std::size_t i = 0; i < ext * s.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

/// Rows of a 2-D tensor picked by index (duplicates allowed).
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  detail::require_rank(x, 2, "gather_rows");
  if (rows.empty()) throw ContractError("gather_rows: empty index set");
  const std::size_t c = x.dim(1);
  std::vector<T> y(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(x.values().data() + rows[i] * c, c, y.data() + i * c);
  }
  Tensor<T> out({rows.size(), c}, std::move(y));
  if (detail::tracking<T>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::record<T>("gather_rows", out, {xn}, [=]() {
      T* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) gx[rows[i] * c + j] += on->grad[i * c + j];
    });
  }
  return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), x.values());
  if (detail::tracking<T>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::record<T>("reshape", out, {xn}, [=]() {
      T* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
    });
  }
  return out;
}

namespace detail {

/// Neumaier compensated summation.
template <class T>
struct CompensatedSum {
  T sum = 0, carry = 0;
  void add(T v) {
    const T t = sum + v;
    carry += std::abs(sum) >= std::abs(v) ? (sum - t) + v : (v - t) + sum;
    sum = t;
  }
  T value() const { return sum + carry; }
};

}  // namespace detail

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  detail::CompensatedSum<T> s;
  for (T v : x.values()) s.add(v);
  Tensor<T> out = Tensor<T>::scalar(s.value());
  if (detail::tracking<T>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::record<T>("sum", out, {xn}, [=]() {
      T* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += on->grad[0];
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Mean over `axis`, keeping it with extent 1.
template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("mean_axis: axis out of range for " + shape_str(x.shape()));
  const auto s = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  const auto& xv = x.values();
  std::vector<T> y(s.outer * s.inner, T(0));
  const T inv = T(1) / static_cast<T>(s.extent);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t a = 0; a < s.extent; ++a)
      for (std::size_t in = 0; in < s.inner; ++in)
        y[o * s.inner + in] += xv[(o * s.extent + a) * s.inner + in];
  for (T& v : y) v *= inv;
  Tensor<T> out(out_shape, std::move(y));
  if (detail::tracking<T>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::record<T>("mean_axis", out, {xn}, [=]() {
      T* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t a = 0; a < s.extent; ++a)
          for (std::size_t in = 0; in < s.inner; ++in)
            gx[(o * s.extent + a) * s.inner + in] += on->grad[o * s.inner + in] * inv;
    });
  }
  return out;
}

/// x / max(||x||₂, eps) along the last axis.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(kNormEps)) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  const auto& xv = x.values();
  std::vector<T> y(xv.size());
  std::vector<T> denom(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    T ss = 0;
    for (std::size_t j = 0; j < c; ++j) ss += xv[i * c + j] * xv[i * c + j];
    denom[i] = std::max(std::sqrt(ss), eps);
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = xv[i * c + j] / denom[i];
  }
  Tensor<T> out(x.shape(), std::move(y));
  if (detail::tracking<T>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::record<T>("l2_normalize", out, {xn}, [=]() {
      T* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < rows; ++i) {
        const T* g = on->grad.data() + i * c;
        const T* yv = on->data.data() + i * c;
        const bool floored = denom[i] <= eps;
        T dot = 0;
        if (!floored)
          for (std::size_t j = 0; j < c; ++j) dot += yv[j] * g[j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += (g[j] - yv[j] * dot) / denom[i];
      }
    });
  }
  return out;
}

/// Cross-correlation of x [H×W×Cin] with kernel [kh×kw×Cin×Cout], zero padding.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride = 1,
                 std::size_t padding = 0) {
  detail::require_rank(x, 3, "conv2d input");
  detail::require_rank(kernel, 4, "conv2d kernel");
  const std::size_t H = x.dim(0), W = x.dim(1), Ci = x.dim(2);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), Co = kernel.dim(3);
  if (kernel.dim(2) != Ci) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " has " + std::to_string(Ci) +
                         " channels, kernel " + shape_str(kernel.shape()) + " expects " +
                         std::to_string(kernel.dim(2)));
  }
  if (stride == 0 || H + 2 * padding < kh || W + 2 * padding < kw) {
    throw ContractError("conv2d: kernel " + shape_str(kernel.shape()) + " does not fit input " +
                        shape_str(x.shape()));
  }
  const std::size_t Ho = (H + 2 * padding - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - kw) / stride + 1;
  const T* X = x.values().data();
  const T* K = kernel.values().data();
  std::vector<T> y(Ho * Wo * Co, T(0));
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox)
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            fn((oy * Wo + ox) * Co, (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * Ci,
               (ky * kw + kx) * Ci * Co);
          }
        }
  };
  for_each_tap([&](std::size_t yo, std::size_t xo, std::size_t ko) {
    T* yrow = y.data() + yo;
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      const T xv = X[xo + ci];
      const T* krow = K + ko + ci * Co;
      for (std::size_t co = 0; co < Co; ++co) yrow[co] += xv * krow[co];
    }
  });
  Tensor<T> out({Ho, Wo, Co}, std::move(y));
  if (detail::tracking<T>({&x, &kernel})) {
    auto xn = x.node(), kn = kernel.node(), on = out.node();
    detail::record<T>("conv2d", out, {xn, kn}, [=]() {
      T* gx = detail::grad_sink(xn);
      T* gk = detail::grad_sink(kn);
      const T* G = on->grad.data();
      const T* Xd = xn->data.data();
      const T* Kd = kn->data.data();
      for_each_tap([&](std::size_t yo, std::size_t xo, std::size_t ko) {
        const T* grow = G + yo;
        for (std::size_t ci = 0; ci < Ci; ++ci) {
          const T* krow = Kd + ko + ci * Co;
          if (gx) {
            T s = 0;
            for (std::size_t co = 0; co < Co; ++co) s += grow[co] * krow[co];
            gx[xo + ci] += s;
          }
          if (gk) {
            const T xv = Xd[xo + ci];
            T* gkrow = gk + ko + ci * Co;
            for (std::size_t co = 0; co < Co; ++co) gkrow[co] += xv * grow[co];
          }
        }
      });
    });
  }
  return out;
}

namespace detail {

struct LerpTap {
  std::size_t lo, hi;
  double w;  // weight of `hi`
};

/// Half-pixel-centre source taps for upsampling an axis of length n by f.
inline std::vector<LerpTap> upsample_taps(std::size_t n, std::size_t f) {
  std::vector<LerpTap> taps(n * f);
  for (std::size_t d = 0; d < n * f; ++d) {
    double src = (static_cast<double>(d) + 0.5) / static_cast<double>(f) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, n - 1);
    taps[d] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear upsampling of x [H×W×C] by an integer factor.
template <class T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::size_t factor) {
  detail::require_rank(x, 3, "bilinear_upsample");
  if (factor == 0) throw ContractError("bilinear_upsample: factor must be >= 1");
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const std::size_t Ho = H * factor, Wo = W * factor;
  const auto ty = detail::upsample_taps(H, factor);
  const auto tx = detail::upsample_taps(W, factor);
  const T* X = x.values().data();
  std::vector<T> y(Ho * Wo * C);
  for (std::size_t oy = 0; oy < Ho; ++oy) {
    const auto& a = ty[oy];
    const T wy = static_cast<T>(a.w);
    for (std::size_t ox = 0; ox < Wo; ++ox) {
      const auto& b = tx[ox];
      const T wx = static_cast<T>(b.w);
      const T w00 = (T(1) - wy) * (T(1) - wx), w01 = (T(1) - wy) * wx;
      const T w10 = wy * (T(1) - wx), w11 = wy * wx;
      for (std::size_t c = 0; c < C; ++c) {
        y[(oy * Wo + ox) * C + c] = w00 * X[(a.lo * W + b.lo) * C + c] + w01 * X[(a.lo * W + b.hi) * C + c] +
                                    w10 * X[(a.hi * W + b.lo) * C + c] + w11 * X[(a.hi * W + b.hi) * C + c];
      }
    }
  }
  Tensor<T> out({Ho, Wo, C}, std::move(y));
  if (detail::tracking<T>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::record<T>("bilinear_upsample", out, {xn}, [=]() {
      T* gx = detail::grad_sink(xn);
      if (!gx) return;
      const T* G = on->grad.data();
      for (std::size_t oy = 0; oy < Ho; ++oy) {
        const auto& a = ty[oy];
        const T wy = static_cast<T>(a.w);
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          const auto& b = tx[ox];
          const T wx = static_cast<T>(b.w);
          const T w00 = (T(1) - wy) * (T(1) - wx), w01 = (T(1) - wy) * wx;
          const T w10 = wy * (T(1) - wx), w11 = wy * wx;
          for (std::size_t c = 0; c < C; ++c) {
            const T g = G[(oy * Wo + ox) * C + c];
            gx[(a.lo * W + b.lo) * C + c] += w00 * g;
            gx[(a.lo * W + b.hi) * C + c] += w01 * g;
            gx[(a.hi * W + b.lo) * C + c] += w10 * g;
            gx[(a.hi * W + b.hi) * C + c] += w11 * g;
          }
        }
      }
    });
  }
  return out;
}

/// Rearranges f×f spatial blocks into channels: [H×W×C] -> [H/f × W/f × f·f·C].
/// Channel order within a block is (row, column, channel).
template <class T>
Tensor<T> space_to_depth(const Tensor<T>& x, std::size_t f) {
  detail::require_rank(x, 3, "space_to_depth");
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  if (f == 0 || H % f != 0 || W % f != 0) {
    throw ContractError("space_to_depth: extents of " + shape_str(x.shape()) +
                        " are not divisible by " + std::to_string(f));
  }
  const std::size_t Ho = H / f, Wo = W / f, Co = f * f * C;
  std::vector<std::size_t> src(Ho * Wo * Co);
  for (std::size_t oy = 0; oy < Ho; ++oy)
    for (std::size_t ox = 0; ox < Wo; ++ox)
      for (std::size_t dy = 0; dy < f; ++dy)
        for (std::size_t dx = 0; dx < f; ++dx)
          for (std::size_t c = 0; c < C; ++c)
            src[(oy * Wo + ox) * Co + (dy * f + dx) * C + c] = ((oy * f + dy) * W + ox * f + dx) * C + c;
  std::vector<T> y(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) y[i] = x.values()[src[i]];
  Tensor<T> out({Ho, Wo, Co}, std::move(y));
  if (detail::tracking<T>({&x})) {
    auto xn = x.node(), on = out.node();
    detail::record<T>("space_to_depth", out, {xn}, [=]() {
      T* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += on->grad[i];
    });
  }
  return out;
}

/// Layer normalization over the last axis with affine gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(kVarianceFloor)) {
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("layer_norm: affine params do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / c;
  const auto& xv = x.values();
  std::vector<T> xhat(xv.size()), inv_std(rows), y(xv.size());
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = xv.data() + i * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * inv_std[i];
      y[i * c + j] = xhat[i * c + j] * gamma.values()[j] + beta.values()[j];
    }
  }
  Tensor<T> out(x.shape(), std::move(y));
  if (detail::tracking<T>({&x, &gamma, &beta})) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    detail::record<T>("layer_norm", out, {xn, gn, bn}, [=]() {
      T* gx = detail::grad_sink(xn);
      T* gg = detail::grad_sink(gn);
      T* gb = detail::grad_sink(bn);
      std::vector<T> dxhat(c);
      for (std::size_t i = 0; i < rows; ++i) {
        const T* g = on->grad.data() + i * c;
        const T* xh = xhat.data() + i * c;
        T m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < c; ++j) {
          if (gg) gg[j] += g[j] * xh[j];
          if (gb) gb[j] += g[j];
          dxhat[j] = g[j] * gn->data[j];
          m1 += dxhat[j];
          m2 += dxhat[j] * xh[j];
        }
        if (!gx) continue;
        m1 /= static_cast<T>(c);
        m2 /= static_cast<T>(c);
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += inv_std[i] * (dxhat[j] - m1 - xh[j] * m2);
      }
    });
  }
  return out;
}

/// Running statistics for batch normalization.
template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(kVarianceFloor);
};

namespace detail {
inline void warn_once_batch_of_one() {
  static bool warned = false;
  if (!warned) {
    std::clog << "warning: batch_norm in train mode over a single row; statistics are degenerate\n";
    warned = true;
  }
}
}  // namespace detail

/// Batch normalization over every axis but the last. In train mode the
/// batch statistics normalize the input and update the running estimates;
/// in eval mode the running estimates are used.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, bool train) {
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c || state.running_mean.numel() != c) {
    throw DimensionError("batch_norm: parameters do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / c;
  const auto& xv = x.values();
  std::vector<T> mu(c, T(0)), var(c, T(0));
  if (train) {
    if (rows == 1) detail::warn_once_batch_of_one();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) mu[j] += xv[r * c + j];
    for (T& m : mu) m /= static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) var[j] += (xv[r * c + j] - mu[j]) * (xv[r * c + j] - mu[j]);
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (std::size_t j = 0; j < c; ++j) {
      const T unbiased = rows > 1 ? var[j] / static_cast<T>(rows - 1) : T(0);
      var[j] /= static_cast<T>(rows);
      rm[j] = (T(1) - state.momentum) * rm[j] + state.momentum * mu[j];
      rv[j] = (T(1) - state.momentum) * rv[j] + state.momentum * unbiased;
    }
  } else {
    std::copy_n(state.running_mean.values().begin(), c, mu.begin());
    std::copy_n(state.running_var.values().begin(), c, var.begin());
  }
  std::vector<T> inv_std(c), xhat(xv.size()), y(xv.size());
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = T(1) / std::sqrt(var[j] + state.eps);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      xhat[i] = (xv[i] - mu[j]) * inv_std[j];
      y[i] = xhat[i] * gamma.values()[j] + beta.values()[j];
    }
  Tensor<T> out(x.shape(), std::move(y));
  if (detail::tracking<T>({&x, &gamma, &beta})) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    detail::record<T>("batch_norm", out, {xn, gn, bn}, [=]() {
      T* gx = detail::grad_sink(xn);
      T* gg = detail::grad_sink(gn);
      T* gb = detail::grad_sink(bn);
      const T* g = on->grad.data();
      std::vector<T> m1(c, T(0)), m2(c, T(0));
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) {
          const std::size_t i = r * c + j;
          if (gg) gg[j] += g[i] * xhat[i];
          if (gb) gb[j] += g[i];
          const T d = g[i] * gn->data[j];
          m1[j] += d;
          m2[j] += d * xhat[i];
        }
      if (!gx) return;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) {
          const std::size_t i = r * c + j;
          const T d = g[i] * gn->data[j];
          if (train) {
            gx[i] += inv_std[j] * (d - m1[j] / static_cast<T>(rows) - xhat[i] * m2[j] / static_cast<T>(rows));
          } else {
            gx[i] += inv_std[j] * d;
          }
        }
    });
  }
  return out;
}

/// Detached copy in another scalar precision.
template <class U, class T>
Tensor<U> cast(const Tensor<T>& x, bool requires_grad = false) {
  std::vector<U> y(x.values().begin(), x.values().end());
  return Tensor<U>(x.shape(), std::move(y), requires_grad);
}

}  // namespace coupalign
