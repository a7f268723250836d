#pragma once

// Toy four-stage image and language encoders. Each exposes one stage at a
// time so that word-pixel alignment can be interleaved between stages.

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "coupalign/config.hpp"
#include "coupalign/nn.hpp"

namespace coupalign {

inline constexpr std::size_t kPatchSize = 4;

/// Patch merge (2×2 neighbourhood concat + LN + linear to 2C) followed by one
/// transformer block over the flattened grid. With `merge` off only the block
/// runs and the shape is preserved.
template <class T>
struct ImageStage {
  bool merge = true;
  LayerNorm<T> merge_norm;
  Linear<T> reduce;
  TransformerBlock<T> block;

  ImageStage() = default;
  ImageStage(ParamStore<T>& ps, const std::string& name, std::size_t in_channels, bool merge, std::size_t heads,
             std::mt19937_64& rng)
      : merge(merge) {
    std::size_t out_channels = in_channels;
    if (merge) {
      merge_norm = LayerNorm<T>(ps, name + ".merge_norm", 4 * in_channels, rng);
      reduce = Linear<T>(ps, name + ".reduce", 4 * in_channels, 2 * in_channels, rng, false);
      out_channels = 2 * in_channels;
    }
    block = TransformerBlock<T>(ps, name + ".block", out_channels, heads, rng);
  }

  /// v: [H×W×C] -> [H/2×W/2×2C] (merge) or [H×W×C].
  Tensor<T> operator()(const Tensor<T>& v, std::vector<Tensor<T>>* probs = nullptr) const {
    if (v.rank() != 3) throw DimensionError("image_stage: expected [H×W×C], got " + shape_str(v.shape()));
    Tensor<T> x = v;
    if (merge) {
      if (v.dim(0) % 2 != 0 || v.dim(1) % 2 != 0) {
        throw ContractError("image_stage: odd spatial extent " + shape_str(v.shape()) +
                            " (image sizes must be divisible by 32)");
      }
      x = reduce(merge_norm(space_to_depth(v, 2)));
    }
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    Tensor<T> flat = block(reshape(x, {h * w, c}), all_valid(h * w), probs);
    return reshape(flat, {h, w, c});
  }
};

/// Patch embedding (4×4 patches, linear to C1, LN, learned absolute position
/// embedding) plus stages 1..4. Stages 1..3 merge patches; stage 4 keeps the
/// H/32 resolution.
template <class T>
struct ImageEncoder {
  Linear<T> patch;
  LayerNorm<T> patch_norm;
  Tensor<T> position;  // [H/4 × W/4 × C1]
  std::array<ImageStage<T>, 4> stages;

  ImageEncoder() = default;
  ImageEncoder(ParamStore<T>& ps, const ModelConfig& cfg, std::mt19937_64& rng)
      : patch(ps, "enc.img.embed.proj", kPatchSize * kPatchSize * 3, cfg.c1, rng),
        patch_norm(ps, "enc.img.embed.norm", cfg.c1, rng) {
    position = ps.add("enc.img.pos", {cfg.grid(1), cfg.grid(1), cfg.c1}, Init::normal(0.02), rng);
    for (std::size_t i = 1; i <= 4; ++i) {
      stages[i - 1] = ImageStage<T>(ps, "enc.img.stage" + std::to_string(i), cfg.channels(i), i < 4, cfg.heads, rng);
    }
  }

  /// image [H×W×3] -> V_1 [H/4×W/4×C1]. Each output cell depends only on its own 4×4 patch.
  Tensor<T> embed(const Tensor<T>& image) const {
    if (image.rank() != 3 || image.dim(2) != 3) {
      throw DimensionError("image encoder: expected [H×W×3], got " + shape_str(image.shape()));
    }
    if (image.dim(0) % 32 != 0 || image.dim(1) % 32 != 0) {
      throw ContractError("image encoder: extents of " + shape_str(image.shape()) + " must be divisible by 32");
    }
    const Tensor<T> v = patch_norm(patch(space_to_depth(image, kPatchSize)));
    if (v.shape() != position.shape()) {
      throw DimensionError("image encoder: patch grid " + shape_str(v.shape()) + " does not match model.image_size");
    }
    return add(v, position);
  }

  /// Stage i (1-based): V_i (+ language context) -> V_{i+1}.
  Tensor<T> stage(std::size_t i, const Tensor<T>& v, std::vector<Tensor<T>>* probs = nullptr) const {
    return stages.at(i - 1)(v, probs);
  }
};

/// Learned token + positional embeddings and four transformer stages whose
/// self-attention is masked to valid (non-padding) tokens.
template <class T>
struct LanguageEncoder {
  static constexpr int kPadId = 0;

  Tensor<T> table;     // [vocab × D]
  Tensor<T> position;  // [T_max × D]
  std::array<TransformerBlock<T>, 4> stages;

  LanguageEncoder() = default;
  LanguageEncoder(ParamStore<T>& ps, const ModelConfig& cfg, std::mt19937_64& rng) {
    table = ps.add("enc.lang.embed", {cfg.vocab_size, cfg.d_lang}, Init::normal(1.0), rng);
    position = ps.add("enc.lang.pos", {cfg.t_max, cfg.d_lang}, Init::normal(0.1), rng);
    for (std::size_t i = 1; i <= 4; ++i) {
      stages[i - 1] = TransformerBlock<T>(ps, "enc.lang.stage" + std::to_string(i), cfg.d_lang, cfg.heads, rng);
    }
  }

  /// E[j] = table[ids[j]] + position[j]; valid[j] = ids[j] != PAD.
  std::pair<Tensor<T>, std::vector<std::uint8_t>> embed_tokens(const std::vector<int>& ids) const {
    if (ids.empty()) throw InputError("embed_tokens: empty token sequence");
    if (ids.size() > position.dim(0)) {
      throw InputError("embed_tokens: " + std::to_string(ids.size()) + " tokens exceed T_max " +
                       std::to_string(position.dim(0)));
    }
    std::vector<std::size_t> rows;
    std::vector<std::uint8_t> valid;
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= table.dim(0)) {
        throw InputError("embed_tokens: token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(table.dim(0)));
      }
      rows.push_back(static_cast<std::size_t>(id));
      valid.push_back(id != kPadId ? 1 : 0);
    }
    Tensor<T> e = add(gather_rows(table, rows), slice(position, 0, 0, ids.size()));
    return {e, valid};
  }

  /// Stage i (1-based): L_i (+ vision context) -> L_{i+1}, shape preserved.
  Tensor<T> stage(std::size_t i, const Tensor<T>& l, const std::vector<std::uint8_t>& valid,
                  std::vector<Tensor<T>>* probs = nullptr) const {
    if (std::none_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; })) {
      throw ContractError("language_stage: every token is padding");
    }
    return stages.at(i - 1)(l, valid, probs);
  }

  /// L_g: row 0 (the classification token) of the final language features.
  static Tensor<T> extract_sentence(const Tensor<T>& l) { return slice(l, 0, 0, 1); }
};

}  // namespace coupalign
