#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "coupalign/ops.hpp"

namespace coupalign {

namespace detail {

template <class T>
void require_binary(const Tensor<T>& mask, const char* op) {
  for (T v : mask.values()) {
    if (v != T(0) && v != T(1)) throw InputError(std::string(op) + ": mask values must be 0 or 1");
  }
}

template <class T>
T softplus(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace detail

/// Per-pixel binary cross-entropy with logits, softplus(x) - y·x, which
/// equals -[y·log σ(x) + (1-y)·log(1-σ(x))]. Same shape as `logits`.
template <class T>
Tensor<T> seg_loss_terms(const Tensor<T>& logits, const Tensor<T>& mask) {
  if (logits.shape() != mask.shape()) {
    throw DimensionError("seg_loss: logits " + shape_str(logits.shape()) + " vs mask " + shape_str(mask.shape()));
  }
  detail::require_binary(mask, "seg_loss");
  const auto& x = logits.values();
  const auto& y = mask.values();
  std::vector<T> terms(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) terms[i] = detail::softplus(x[i]) - y[i] * x[i];
  Tensor<T> out(logits.shape(), std::move(terms));
  if (detail::tracking<T>({&logits})) {
    auto xn = logits.node(), yn = mask.node(), on = out.node();
    detail::record<T>("seg_loss", out, {xn}, [=]() {
      T* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < xn->data.size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-xn->data[i]));
        gx[i] += on->grad[i] * (s - yn->data[i]);
      }
    });
  }
  return out;
}

/// Mean binary cross-entropy with logits over all pixels.
template <class T>
Tensor<T> seg_loss(const Tensor<T>& logits, const Tensor<T>& mask) {
  return mean(seg_loss_terms(logits, mask));
}

/// Nearest-neighbour downsampling of an [H×W] mask onto an h×w grid; cell
/// (i, j) reads pixel (i·f + f/2, j·f + f/2).
template <class T>
std::vector<std::uint8_t> downsample_mask(const Tensor<T>& mask, std::size_t h, std::size_t w) {
  if (mask.rank() != 2 || mask.dim(0) % h != 0 || mask.dim(1) % w != 0 || mask.dim(0) / h != mask.dim(1) / w) {
    throw DimensionError("downsample_mask: cannot map " + shape_str(mask.shape()) + " onto " + std::to_string(h) +
                         "x" + std::to_string(w));
  }
  const std::size_t f = mask.dim(0) / h, W = mask.dim(1);
  std::vector<std::uint8_t> out(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = mask[(i * f + f / 2) * W + j * f + f / 2] != T(0);
  return out;
}

namespace detail {

/// Row a contributes -log[exp(a·p/τ) / (exp(a·p/τ) + Σ_k exp(a·b_k/τ))] / |anchors|;
/// the terms sum to one InfoNCE direction.
template <class T>
Tensor<T> prototype_nce_terms(const Tensor<T>& anchors, const Tensor<T>& proto, const Tensor<T>& others, T tau) {
  const Tensor<T> logits = scale(concat<T>({matmul(anchors, transpose(proto)), matmul(anchors, transpose(others))}, 1),
                                 T(1) / tau);
  return reshape(scale(slice(log_softmax(logits), 1, 0, 1), T(-1) / static_cast<T>(anchors.dim(0))),
                 {anchors.dim(0)});
}

}  // namespace detail

/// Per-pixel terms of L_P2N + L_N2P on the Y_1 grid (positives first).
/// Returns an undefined tensor when either pixel set is empty.
template <class T>
Tensor<T> aux_loss_terms(const Tensor<T>& y1, const Tensor<T>& mask, T tau, bool normalize = true) {
  if (y1.rank() != 3) throw DimensionError("aux_loss: expected Y_1 [h×w×d], got " + shape_str(y1.shape()));
  detail::require_binary(mask, "aux_loss");
  const std::size_t h = y1.dim(0), w = y1.dim(1), d = y1.dim(2);
  const std::vector<std::uint8_t> fg = downsample_mask(mask, h, w);
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < fg.size(); ++i) (fg[i] ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) return {};

  const Tensor<T> flat = reshape(y1, {h * w, d});
  const Tensor<T> raw_p = gather_rows(flat, pos), raw_n = gather_rows(flat, neg);
  Tensor<T> proto_p = mean_axis(raw_p, 0), proto_n = mean_axis(raw_n, 0);
  Tensor<T> yp = raw_p, yn = raw_n;
  if (normalize) {
    proto_p = l2_normalize(proto_p);
    proto_n = l2_normalize(proto_n);
    yp = l2_normalize(raw_p);
    yn = l2_normalize(raw_n);
  }
  return concat<T>({detail::prototype_nce_terms(yp, proto_p, yn, tau), detail::prototype_nce_terms(yn, proto_n, yp, tau)},
                   0);
}

/// Pixel-to-prototype contrastive loss L_P2N + L_N2P on the Y_1 grid.
/// Returns an undefined tensor when either pixel set is empty.
template <class T>
Tensor<T> aux_loss(const Tensor<T>& y1, const Tensor<T>& mask, T tau, bool normalize = true) {
  const Tensor<T> terms = aux_loss_terms(y1, mask, tau, normalize);
  return terms.defined() ? sum(terms) : terms;
}

struct LossReport {
  double total = 0;
  double seg = 0;  // batch mean
  double aux = 0;  // batch mean (skipped images count as 0)
  std::vector<double> seg_per_image, aux_per_image;
  std::size_t aux_skipped = 0;
};

/// L = (1/B) Σ_j (L_seg_j + λ·L_aux_j). The aux term is not evaluated at all
/// when `aux_enabled` is false.
template <class T>
Tensor<T> total_loss(const std::vector<Tensor<T>>& logits, const std::vector<Tensor<T>>& y1,
                     const std::vector<Tensor<T>>& masks, double lambda, double tau, bool aux_enabled,
                     bool normalize, LossReport* report = nullptr) {
  if (logits.empty() || logits.size() != masks.size() || (aux_enabled && y1.size() != masks.size())) {
    throw ContractError("total_loss: batch vectors differ in length");
  }
  LossReport r;
  std::vector<Tensor<T>> terms;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    Tensor<T> term = seg_loss(logits[j], masks[j]);
    r.seg_per_image.push_back(static_cast<double>(term.item()));
    double aux_value = 0;
    if (aux_enabled) {
      Tensor<T> a = aux_loss(y1[j], masks[j], static_cast<T>(tau), normalize);
      if (a.defined()) {
        aux_value = static_cast<double>(a.item());
        term = add(term, scale(a, static_cast<T>(lambda)));
      } else {
        ++r.aux_skipped;
      }
    }
    r.aux_per_image.push_back(aux_value);
    terms.push_back(reshape(term, {1}));
  }
  const double b = static_cast<double>(logits.size());
  Tensor<T> loss = mean(concat(terms, 0));
  for (std::size_t j = 0; j < logits.size(); ++j) {
    r.seg += r.seg_per_image[j] / b;
    r.aux += r.aux_per_image[j] / b;
  }
  r.total = static_cast<double>(loss.item());
  if (report) *report = std::move(r);
  return loss;
}

}  // namespace coupalign
