#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "coupalign/config.hpp"
#include "coupalign/cross_fusion.hpp"
#include "coupalign/decoder.hpp"
#include "coupalign/encoders.hpp"
#include "coupalign/wpa.hpp"

namespace coupalign {

template <class T>
struct Prediction {
  Tensor<T> logits;                 // M' [H×W]
  Tensor<T> m;                      // M [h×w×1] at the Y_1 grid
  Tensor<T> y1;                     // [h×w×d_s]
  Tensor<T> q_w;                    // [1×N]; undefined when SMA is off
  Tensor<T> y_n;                    // [N×hw]; undefined when SMA is off
  std::array<Tensor<T>, 4> word_attn;  // per stage [HW_i×T]; undefined where WPA is inactive
  std::vector<std::uint8_t> valid;  // token validity mask
};

/// The full pipeline. Every sub-network owns parameters regardless of the
/// ablation switches; disabled parts are simply never evaluated.
template <class T>
class CoupAlign {
 public:
  explicit CoupAlign(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    image_ = ImageEncoder<T>(params_, cfg_, rng);
    lang_ = LanguageEncoder<T>(params_, cfg_, rng);
    for (std::size_t i = 1; i <= 4; ++i) {
      wpa_[i - 1] = WpaParams<T>(params_, i, cfg_.channels(i), cfg_.d_lang, cfg_.d_joint, rng);
    }
    fusion_ = CrossFusion<T>(params_, cfg_, rng);
    generator_ = MaskGenerator<T>(params_, cfg_, rng);
    seg_ = SegHead<T>(params_, cfg_, rng);
    sma_ = SmaParams<T>(params_, cfg_, rng);
    head_ = PlainHead<T>(params_, cfg_, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// Runs a batch. `train` selects batch statistics in the segmentation head.
  std::vector<Prediction<T>> forward(const std::vector<Tensor<T>>& images, const std::vector<std::vector<int>>& tokens,
                                     bool train) const {
    if (images.size() != tokens.size() || images.empty()) {
      throw ContractError("forward: need a non-empty batch with one token sequence per image");
    }
    const std::size_t batch = images.size();
    std::vector<Prediction<T>> out(batch);
    std::vector<Tensor<T>> s_o(batch), l_g(batch), q_o(batch);
    std::vector<std::array<Tensor<T>, 4>> stages(batch);

    for (std::size_t b = 0; b < batch; ++b) {
      Prediction<T>& p = out[b];
      auto [l, valid] = lang_.embed_tokens(tokens[b]);
      p.valid = valid;
      Tensor<T> v = image_.embed(images[b]);
      for (std::size_t i = 1; i <= 4; ++i) {
        stages[b][i - 1] = v;
        const std::size_t h = v.dim(0), w = v.dim(1), c = v.dim(2);
        Tensor<T> v_in = v, l_in = l;
        if (cfg_.wpa_active(i)) {
          WpaStepResult<T> r = wpa_step(reshape(v, {h * w, c}), l, wpa_[i - 1], cfg_.wpa_mode, valid);
          v_in = reshape(r.v_next, {h, w, c});
          l_in = r.l_next;
          p.word_attn[i - 1] = r.attn;
        }
        v = image_.stage(i, v_in);
        l = lang_.stage(i, l_in, valid);
      }
      s_o[b] = fusion_(v, l, valid);
      l_g[b] = LanguageEncoder<T>::extract_sentence(l);
      q_o[b] = generator_(s_o[b]);
    }

    const std::vector<Tensor<T>> y1 = seg_(s_o, stages, train);
    for (std::size_t b = 0; b < batch; ++b) {
      Prediction<T>& p = out[b];
      p.y1 = y1[b];
      if (cfg_.sma_enabled) {
        SmaResult<T> r = sma(q_o[b], y1[b], l_g[b], sma_);
        p.q_w = r.q_w;
        p.y_n = r.y_n;
        p.m = r.m;
      } else {
        p.m = head_(y1[b]);
      }
      const Tensor<T> up = bilinear_upsample(p.m, kPatchSize);
      p.logits = reshape(up, {up.dim(0), up.dim(1)});
    }
    return out;
  }

  Prediction<T> predict(const Tensor<T>& image, const std::vector<int>& tokens) const {
    NoGradScope<T> no_grad;
    return forward({image}, {tokens}, false).front();
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  ImageEncoder<T> image_;
  LanguageEncoder<T> lang_;
  std::array<WpaParams<T>, 4> wpa_;
  CrossFusion<T> fusion_;
  MaskGenerator<T> generator_;
  SegHead<T> seg_;
  SmaParams<T> sma_;
  PlainHead<T> head_;
};

}  // namespace coupalign
