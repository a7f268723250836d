#pragma once

// Word-pixel alignment: bidirectional cross attention between the stage-i
// visual grid and the stage-i word features, gated and added residually to
// the inputs of the next encoder stages.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "coupalign/config.hpp"
#include "coupalign/nn.hpp"

namespace coupalign {

/// Gate(F) = tanh(W2·relu(W1·F + b1) + b2) ⊙ F, applied per position.
template <class T>
struct Gate {
  Linear<T> fc1, fc2;

  Gate() = default;
  Gate(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::mt19937_64& rng)
      : fc1(ps, name + ".fc1", dim, dim, rng), fc2(ps, name + ".fc2", dim, dim, rng) {}

  Tensor<T> operator()(const Tensor<T>& f) const { return mul(tanh(fc2(relu(fc1(f)))), f); }
};

template <class T>
struct WpaParams {
  Tensor<T> wv;      // [C_i × d]
  Tensor<T> wl;      // [D × d]
  Tensor<T> wl_hat;  // [d × C_i]
  Tensor<T> wv_hat;  // [d × D]
  Gate<T> gate_v;    // over V'_i (language shaped)
  Gate<T> gate_l;    // over L'_i (vision shaped)

  WpaParams() = default;
  WpaParams(ParamStore<T>& ps, std::size_t stage, std::size_t channels, std::size_t d_lang, std::size_t d_joint,
            std::mt19937_64& rng) {
    const std::string p = "wpa.stage" + std::to_string(stage) + ".";
    auto u = [](std::size_t fan_in) { return Init::uniform(1.0 / std::sqrt(static_cast<double>(fan_in))); };
    wv = ps.add(p + "Wv", {channels, d_joint}, u(channels), rng);
    wl = ps.add(p + "Wl", {d_lang, d_joint}, u(d_lang), rng);
    wl_hat = ps.add(p + "Wl_hat", {d_joint, channels}, u(d_joint), rng);
    wv_hat = ps.add(p + "Wv_hat", {d_joint, d_lang}, u(d_joint), rng);
    gate_v = Gate<T>(ps, p + "gate_v", d_lang, rng);
    gate_l = Gate<T>(ps, p + "gate_l", channels, rng);
  }
};

template <class T>
struct BiAttnResult {
  Tensor<T> v_ctx;  // V'_i [T × D]: vision context gathered per word
  Tensor<T> l_ctx;  // L'_i [HW × C_i]: language context gathered per pixel
  Tensor<T> attn;   // softmax(Attn_i) over words, [HW × T]
};

/// v: [HW×C_i] (row-major grid), l: [T×D]. Values are the projected
/// features L·W^l and V·W^v, so the output projections map d -> C_i / D.
template <class T>
BiAttnResult<T> bi_attn(const Tensor<T>& v, const Tensor<T>& l, const WpaParams<T>& p,
                        const std::vector<std::uint8_t>& valid) {
  if (p.wv.dim(1) != p.wl.dim(1)) {
    throw DimensionError("bi_attn: joint sizes differ, W^v " + shape_str(p.wv.shape()) + " vs W^l " +
                         shape_str(p.wl.shape()));
  }
  if (valid.size() != l.dim(0)) throw DimensionError("bi_attn: mask length does not match token count");
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(p.wv.dim(1)));
  const Tensor<T> v_hat = matmul(v, p.wv);
  const Tensor<T> l_hat = matmul(l, p.wl);
  const Tensor<T> scores = scale(matmul(v_hat, transpose(l_hat)), inv_sqrt_d);  // [HW × T]

  BiAttnResult<T> r;
  r.attn = masked_softmax(scores, valid);
  r.l_ctx = matmul(matmul(r.attn, l_hat), p.wl_hat);

  const std::size_t tokens = l.dim(0), pixels = v.dim(0);
  const Tensor<T> attn_t = masked_softmax(transpose(scores), all_valid(pixels));  // [T × HW]
  Tensor<T> v_ctx = matmul(matmul(attn_t, v_hat), p.wv_hat);
  std::vector<T> keep(tokens * v_ctx.dim(1));
  for (std::size_t t = 0; t < tokens; ++t)
    std::fill_n(keep.begin() + static_cast<std::ptrdiff_t>(t * v_ctx.dim(1)), v_ctx.dim(1), valid[t] ? T(1) : T(0));
  r.v_ctx = mul(v_ctx, Tensor<T>(v_ctx.shape(), std::move(keep)));
  return r;
}

template <class T>
struct WpaStepResult {
  Tensor<T> v_next;  // input to the next image stage, [HW × C_i]
  Tensor<T> l_next;  // input to the next language stage, [T × D]
  Tensor<T> attn;    // word attention per pixel (undefined when mode is off)
};

/// bi: (V + Gate(L'), L + Gate(V')); uni: (V + Gate(L'), L); off: (V, L).
template <class T>
WpaStepResult<T> wpa_step(const Tensor<T>& v, const Tensor<T>& l, const WpaParams<T>& p, WpaMode mode,
                          const std::vector<std::uint8_t>& valid) {
  if (mode == WpaMode::off) return {v, l, {}};
  BiAttnResult<T> r = bi_attn(v, l, p, valid);
  WpaStepResult<T> out;
  out.v_next = add(v, p.gate_l(r.l_ctx));
  out.l_next = mode == WpaMode::bi ? add(l, p.gate_v(r.v_ctx)) : l;
  out.attn = r.attn;
  return out;
}

}  // namespace coupalign
