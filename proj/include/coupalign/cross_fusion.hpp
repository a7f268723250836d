#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "coupalign/config.hpp"
#include "coupalign/nn.hpp"

namespace coupalign {

/// One pre-norm multi-head attention layer over [V_o W^v + e_p ; L_o W^l],
/// whose vision rows are projected back to C_o and added to V_o.
template <class T>
struct CrossFusion {
  Linear<T> vis_proj;   // W_o^v [C_o × D]
  Linear<T> lang_proj;  // W_o^l [D × D]
  Tensor<T> pos;        // e_p [H_o·W_o × D]
  LayerNorm<T> norm;
  MultiHeadAttention<T> attn;
  Linear<T> out_proj;   // D -> C_o

  CrossFusion() = default;
  CrossFusion(ParamStore<T>& ps, const ModelConfig& cfg, std::mt19937_64& rng) {
    const std::size_t c_o = cfg.channels(4), d = cfg.d_lang, grid = cfg.grid(4);
    vis_proj = Linear<T>(ps, "fusion.Wv", c_o, d, rng, false);
    lang_proj = Linear<T>(ps, "fusion.Wl", d, d, rng, false);
    pos = ps.add("fusion.pos", {grid * grid, d}, Init::normal(0.02), rng);
    norm = LayerNorm<T>(ps, "fusion.norm", d, rng);
    attn = MultiHeadAttention<T>(ps, "fusion.attn", d, cfg.fusion_heads, rng);
    out_proj = Linear<T>(ps, "fusion.out", d, c_o, rng);
  }

  /// v_o: [H_o×W_o×C_o], l_o: [T×D] -> S_o [H_o×W_o×C_o].
  Tensor<T> operator()(const Tensor<T>& v_o, const Tensor<T>& l_o, const std::vector<std::uint8_t>& valid,
                       std::vector<Tensor<T>>* probs = nullptr) const {
    if (v_o.rank() != 3) throw DimensionError("fuse: expected V_o [H×W×C], got " + shape_str(v_o.shape()));
    const std::size_t h = v_o.dim(0), w = v_o.dim(1), c = v_o.dim(2), n_pix = h * w;
    if (n_pix != pos.dim(0)) {
      throw DimensionError("fuse: V_o grid " + shape_str(v_o.shape()) + " does not match positional embedding " +
                           shape_str(pos.shape()));
    }
    if (l_o.rank() != 2 || valid.size() != l_o.dim(0)) {
      throw DimensionError("fuse: language features " + shape_str(l_o.shape()) + " do not match mask");
    }
    const Tensor<T> v_flat = reshape(v_o, {n_pix, c});
    const Tensor<T> f_o = concat<T>({add(vis_proj(v_flat), pos), lang_proj(l_o)}, 0);
    std::vector<std::uint8_t> key_valid(n_pix, 1);
    key_valid.insert(key_valid.end(), valid.begin(), valid.end());
    const Tensor<T> h_in = norm(f_o);
    const Tensor<T> fused = attn(h_in, h_in, key_valid, probs);
    const Tensor<T> back = out_proj(slice(fused, 0, 0, n_pix));
    return add(reshape(back, {h, w, c}), v_o);
  }
};

}  // namespace coupalign
