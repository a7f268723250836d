#pragma once

// Naive-loop reference implementations. Plain std::vector<double> in and out;
// nothing here touches the library's tensor code.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

inline Vec matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t n) {
  Vec c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

// x [H×W×Ci], w [kh×kw×Ci×Co], zero padding, cross-correlation.
inline Vec conv2d(const Vec& x, std::size_t H, std::size_t W, std::size_t Ci, const Vec& w, std::size_t kh,
                  std::size_t kw, std::size_t Co, std::size_t stride, std::size_t pad) {
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Vec y(Ho * Wo * Co, 0.0);
  for (std::size_t oy = 0; oy < Ho; ++oy)
    for (std::size_t ox = 0; ox < Wo; ++ox)
      for (std::size_t co = 0; co < Co; ++co) {
        double s = 0;
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx)
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
              s += x[(static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * Ci + ci] *
                   w[((ky * kw + kx) * Ci + ci) * Co + co];
            }
        y[(oy * Wo + ox) * Co + co] = s;
      }
  return y;
}

// Per output pixel: map back with the half-pixel convention, clamp, and
// interpolate the four neighbours.
inline Vec bilinear(const Vec& x, std::size_t H, std::size_t W, std::size_t C, std::size_t f) {
  Vec y(H * f * W * f * C);
  auto src = [f](std::size_t d, std::size_t n) {
    const double s = (static_cast<double>(d) + 0.5) / static_cast<double>(f) - 0.5;
    return std::min(std::max(s, 0.0), static_cast<double>(n - 1));
  };
  for (std::size_t oy = 0; oy < H * f; ++oy)
    for (std::size_t ox = 0; ox < W * f; ++ox) {
      const double sy = src(oy, H), sx = src(ox, W);
      const std::size_t y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
      const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
      const double ty = sy - static_cast<double>(y0), tx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        auto at = [&](std::size_t yy, std::size_t xx) { return x[(yy * W + xx) * C + c]; };
        y[(oy * W * f + ox) * C + c] = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) +
                                       ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
      }
    }
  return y;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double bce(const Vec& logits, const Vec& mask) {
  double s = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = sigmoid(logits[i]);
    s += -(mask[i] * std::log(p) + (1 - mask[i]) * std::log(1 - p));
  }
  return s / static_cast<double>(logits.size());
}

inline Vec unit(const Vec& v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::max(std::sqrt(n), 1e-12);
  Vec o(v);
  for (double& x : o) x /= n;
  return o;
}

inline double dot(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// One direction of the prototype InfoNCE:
// -(1/|A|) Σ_a log[e^{a·p/τ} / (e^{a·p/τ} + Σ_b e^{a·b/τ})].
inline double nce_term(const std::vector<Vec>& anchors, const Vec& proto, const std::vector<Vec>& others, double tau) {
  double total = 0;
  for (const Vec& a : anchors) {
    const double pos = std::exp(dot(a, proto) / tau);
    double denom = pos;
    for (const Vec& b : others) denom += std::exp(dot(a, b) / tau);
    total += -std::log(pos / denom);
  }
  return total / static_cast<double>(anchors.size());
}

// y1 [h×w×d] pixel features, fg [h×w] already on the feature grid.
inline double infonce(const Vec& y1, const std::vector<int>& fg, std::size_t d, double tau, bool normalize) {
  std::vector<Vec> pos, neg;
  for (std::size_t p = 0; p < fg.size(); ++p) {
    Vec v(y1.begin() + static_cast<long>(p * d), y1.begin() + static_cast<long>((p + 1) * d));
    (fg[p] ? pos : neg).push_back(v);
  }
  auto centroid = [d](const std::vector<Vec>& s) {
    Vec c(d, 0.0);
    for (const Vec& v : s)
      for (std::size_t j = 0; j < d; ++j) c[j] += v[j] / static_cast<double>(s.size());
    return c;
  };
  Vec pp = centroid(pos), pn = centroid(neg);
  if (normalize) {
    pp = unit(pp);
    pn = unit(pn);
    for (Vec& v : pos) v = unit(v);
    for (Vec& v : neg) v = unit(v);
  }
  return nce_term(pos, pp, neg, tau) + nce_term(neg, pn, pos, tau);
}

struct Counts {
  std::uint64_t inter = 0, uni = 0;
};

inline Counts pixel_counts(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  Counts c;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] && b[i]) ++c.inter;
    if (a[i] || b[i]) ++c.uni;
  }
  return c;
}

inline Vec random_vec(std::size_t n, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Vec v(n);
  for (double& x : v) x = d(rng);
  return v;
}

inline double max_abs_diff(const Vec& a, const Vec& b) {
  double m = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace oracle
