#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "coupalign/config.hpp"
#include "coupalign/nn.hpp"

namespace coupalign {

/// Pre-norm decoder layer: query self-attention, cross-attention to the
/// flattened fused map, MLP; each with a residual connection.
template <class T>
struct DecoderLayer {
  LayerNorm<T> ln_self, ln_cross, ln_mlp;
  MultiHeadAttention<T> self_attn, cross_attn;
  Mlp<T> mlp;

  DecoderLayer() = default;
  DecoderLayer(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t heads, std::mt19937_64& rng)
      : ln_self(ps, name + ".ln_self", dim, rng),
        ln_cross(ps, name + ".ln_cross", dim, rng),
        ln_mlp(ps, name + ".ln_mlp", dim, rng),
        self_attn(ps, name + ".self_attn", dim, heads, rng),
        cross_attn(ps, name + ".cross_attn", dim, heads, rng),
        mlp(ps, name + ".mlp", dim, 2 * dim, rng) {}

  Tensor<T> operator()(const Tensor<T>& q, const Tensor<T>& memory) const {
    const Tensor<T> h = ln_self(q);
    Tensor<T> x = add(q, self_attn(h, h, all_valid(q.dim(0))));
    x = add(x, cross_attn(ln_cross(x), memory, all_valid(memory.dim(0))));
    return add(x, mlp(ln_mlp(x)));
  }
};

/// N learnable queries decoded against S_o into mask embeddings Q_o [N×d_q].
template <class T>
struct MaskGenerator {
  Tensor<T> queries;  // Q [N × d_q]
  Linear<T> memory;   // C_o -> d_q
  std::vector<DecoderLayer<T>> layers;

  MaskGenerator() = default;
  MaskGenerator(ParamStore<T>& ps, const ModelConfig& cfg, std::mt19937_64& rng) {
    if (cfg.n_queries < 1) throw ConfigError("mask generator needs at least one query");
    queries = ps.add("dec.queries", {cfg.n_queries, cfg.d_q}, Init::normal(0.02), rng);
    memory = Linear<T>(ps, "dec.gen.memory", cfg.channels(4), cfg.d_q, rng);
    for (std::size_t i = 0; i < cfg.decoder_layers; ++i) {
      layers.emplace_back(ps, "dec.gen.layer" + std::to_string(i), cfg.d_q, cfg.decoder_heads, rng);
    }
  }

  Tensor<T> operator()(const Tensor<T>& s_o) const {
    if (s_o.rank() != 3) throw DimensionError("mask_generator: expected S_o [H×W×C], got " + shape_str(s_o.shape()));
    const Tensor<T> mem = memory(reshape(s_o, {s_o.dim(0) * s_o.dim(1), s_o.dim(2)}));
    Tensor<T> q = queries;
    for (const auto& layer : layers) q = layer(q, mem);
    return q;
  }
};

/// Applies one BatchNorm to several maps with shared batch statistics.
template <class T>
std::vector<Tensor<T>> batch_norm_across(const std::vector<Tensor<T>>& xs, const BatchNorm<T>& bn, bool train) {
  if (xs.size() == 1) return {bn(xs.front(), train)};
  const std::size_t c = xs.front().shape().back();
  std::vector<Tensor<T>> flat;
  std::vector<std::size_t> rows;
  for (const auto& x : xs) {
    rows.push_back(x.numel() / c);
    flat.push_back(reshape(x, {rows.back(), c}));
  }
  const Tensor<T> normed = bn(concat(flat, 0), train);
  std::vector<Tensor<T>> out;
  std::size_t off = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    out.push_back(reshape(slice(normed, 0, off, off + rows[i]), xs[i].shape()));
    off += rows[i];
  }
  return out;
}

/// One level of the segmentation head: ρ (two 3×3 conv layers, each with
/// ReLU and batch norm) and γ (1×1 conv of the stage features to d_s).
template <class T>
struct SegLevel {
  std::array<Tensor<T>, 2> conv_w, conv_b;
  std::array<BatchNorm<T>, 2> bn;
  Tensor<T> lateral_w, lateral_b;

  SegLevel() = default;
  SegLevel(ParamStore<T>& ps, std::size_t level, std::size_t in_channels, std::size_t stage_channels,
           std::size_t d_s, std::mt19937_64& rng) {
    const std::string p = "dec.seg.level" + std::to_string(level) + ".";
    for (std::size_t j = 0; j < 2; ++j) {
      const std::size_t cin = j == 0 ? in_channels : d_s;
      const std::string q = p + "rho.conv" + std::to_string(j + 1);
      conv_w[j] = ps.add(q + ".W", {3, 3, cin, d_s}, Init::uniform(1.0 / std::sqrt(9.0 * static_cast<double>(cin))), rng);
      conv_b[j] = ps.add(q + ".b", {d_s}, Init::zeros(), rng);
      bn[j] = BatchNorm<T>(ps, p + "rho.bn" + std::to_string(j + 1), d_s, rng);
    }
    lateral_w = ps.add(p + "gamma.W", {1, 1, stage_channels, d_s},
                       Init::uniform(1.0 / std::sqrt(static_cast<double>(stage_channels))), rng);
    lateral_b = ps.add(p + "gamma.b", {d_s}, Init::zeros(), rng);
  }
};

/// Y_5 = S_o; Y_i = Up(ρ_i(Y_{i+1})) + γ_i(V_i) for i = 4..1. S_o already
/// shares V_4's resolution, so level 4 uses an upsampling factor of 1.
template <class T>
struct SegHead {
  std::array<SegLevel<T>, 4> levels;
  RhoOrder order = RhoOrder::relu_bn;

  SegHead() = default;
  SegHead(ParamStore<T>& ps, const ModelConfig& cfg, std::mt19937_64& rng) : order(cfg.rho_order) {
    for (std::size_t i = 4; i >= 1; --i) {
      const std::size_t in = i == 4 ? cfg.channels(4) : cfg.d_s;
      levels[i - 1] = SegLevel<T>(ps, i, in, cfg.channels(i), cfg.d_s, rng);
    }
  }

  std::vector<Tensor<T>> rho(std::size_t level, std::vector<Tensor<T>> ys, bool train) const {
    const SegLevel<T>& L = levels.at(level - 1);
    for (std::size_t j = 0; j < 2; ++j) {
      for (auto& y : ys) y = add_bias(conv2d(y, L.conv_w[j], 1, 1), L.conv_b[j]);
      if (order == RhoOrder::relu_bn) {
        for (auto& y : ys) y = relu(y);
        ys = batch_norm_across(ys, L.bn[j], train);
      } else {
        ys = batch_norm_across(ys, L.bn[j], train);
        for (auto& y : ys) y = relu(y);
      }
    }
    return ys;
  }

  /// s_o[b]: [H_o×W_o×C_o]; stages[b][i-1]: V_i. Returns Y_1 per item.
  std::vector<Tensor<T>> operator()(const std::vector<Tensor<T>>& s_o,
                                    const std::vector<std::array<Tensor<T>, 4>>& stages, bool train) const {
    if (s_o.size() != stages.size() || s_o.empty()) throw ContractError("seg_head: batch size mismatch");
    std::vector<Tensor<T>> ys = s_o;
    for (std::size_t i = 4; i >= 1; --i) {
      ys = rho(i, std::move(ys), train);
      const SegLevel<T>& L = levels[i - 1];
      for (std::size_t b = 0; b < ys.size(); ++b) {
        Tensor<T> up = i == 4 ? ys[b] : bilinear_upsample(ys[b], 2);
        Tensor<T> lat = add_bias(conv2d(stages[b][i - 1], L.lateral_w), L.lateral_b);
        if (up.dim(0) != lat.dim(0) || up.dim(1) != lat.dim(1)) {
          throw ContractError("seg_head level " + std::to_string(i) + ": upsampled " + shape_str(up.shape()) +
                              " does not match lateral " + shape_str(lat.shape()));
        }
        ys[b] = add(up, lat);
      }
    }
    return ys;
  }
};

template <class T>
struct SmaParams {
  Tensor<T> wq;  // W^Q [d_q × D]
  Tensor<T> wy;  // W^Y [d_s × D]

  SmaParams() = default;
  SmaParams(ParamStore<T>& ps, const ModelConfig& cfg, std::mt19937_64& rng) {
    wq = ps.add("dec.sma.WQ", {cfg.d_q, cfg.d_lang}, Init::uniform(1.0 / std::sqrt(static_cast<double>(cfg.d_q))), rng);
    wy = ps.add("dec.sma.WY", {cfg.d_s, cfg.d_lang}, Init::uniform(1.0 / std::sqrt(static_cast<double>(cfg.d_s))), rng);
  }
};

template <class T>
struct SmaResult {
  Tensor<T> q_w;  // [1 × N], a probability vector
  Tensor<T> y_n;  // [N × h·w] per-proposal maps
  Tensor<T> m;    // [h × w × 1] logits
};

/// Q_w = softmax(cos(L_g, Q_o W^Q)); Y_N = (Q_o W^Q)(Y_1 W^Y)ᵀ; M = Q_w · Y_N.
template <class T>
SmaResult<T> sma(const Tensor<T>& q_o, const Tensor<T>& y1, const Tensor<T>& l_g, const SmaParams<T>& p) {
  if (y1.rank() != 3) throw DimensionError("sma: expected Y_1 [h×w×d_s], got " + shape_str(y1.shape()));
  const std::size_t h = y1.dim(0), w = y1.dim(1);
  const Tensor<T> q_hat = matmul(q_o, p.wq);                                     // [N × D]
  const Tensor<T> y_hat = matmul(reshape(y1, {h * w, y1.dim(2)}), p.wy);        // [hw × D]
  const Tensor<T> cos = matmul(l2_normalize(l_g), transpose(l2_normalize(q_hat)));  // [1 × N]
  SmaResult<T> r;
  r.q_w = softmax(cos, 1);
  r.y_n = matmul(q_hat, transpose(y_hat));
  r.m = reshape(matmul(r.q_w, r.y_n), {h, w, 1});
  return r;
}

/// Readout used when sentence-mask alignment is disabled: 1×1 conv d_s -> 1.
template <class T>
struct PlainHead {
  Tensor<T> weight, bias;

  PlainHead() = default;
  PlainHead(ParamStore<T>& ps, const ModelConfig& cfg, std::mt19937_64& rng) {
    weight = ps.add("dec.head.W", {1, 1, cfg.d_s, 1}, Init::uniform(1.0 / std::sqrt(static_cast<double>(cfg.d_s))), rng);
    bias = ps.add("dec.head.b", {1}, Init::zeros(), rng);
  }
  Tensor<T> operator()(const Tensor<T>& y1) const { return add_bias(conv2d(y1, weight), bias); }
};

}  // namespace coupalign
