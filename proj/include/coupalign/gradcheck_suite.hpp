#pragma once

// Named gradient checks over every differentiable op, the sub-networks and
// the whole pipeline, all in double precision on small random instances.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "coupalign/grad_check.hpp"
#include "coupalign/losses.hpp"
#include "coupalign/model.hpp"

namespace coupalign {

struct GradCheckCase {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

namespace detail {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(coupalign::numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

/// Values bounded away from zero so relu-like kinks are never straddled.
inline Tensor<double> off_kink_tensor(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(coupalign::numel(shape));
  for (auto& x : v) x = sign(rng) ? d(rng) : -d(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

inline Tensor<double> random_mask(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  // A filled rectangle so that both pixel sets survive downsampling.
  std::uniform_int_distribution<std::size_t> a(0, h / 2 - 1), b(h / 2 + 1, h);
  const std::size_t y0 = a(rng), y1 = b(rng), x0 = a(rng), x1 = b(rng);
  std::vector<double> m(h * w, 0.0);
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) m[y * w + x] = 1.0;
  return Tensor<double>({h, w}, std::move(m));
}

/// sum(f(x) ⊙ R) with a fixed random R, so every output coordinate carries a
/// distinct upstream gradient.
inline Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xABCDEFULL);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

template <class Build>
GradCheckCase op_case(std::string name, Build build) {
  return {name, [build](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            auto [inputs, f] = build(rng);
            GradCheckOptions o;
            o.seed = seed;
            return grad_check([&]() { return weighted_sum(f(inputs), seed); }, inputs, o);
          }};
}

using Inputs = std::vector<Tensor<double>>;
using Fn = std::function<Tensor<double>(const Inputs&)>;

}  // namespace detail

/// Small double-precision configuration used for whole-pipeline checks
/// (32×32 image, T=4, N=2).
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.image_size = 32;
  c.c1 = 4;
  c.d_lang = 8;
  c.d_joint = 8;
  c.d_q = 8;
  c.d_s = 4;
  c.n_queries = 2;
  c.t_max = 4;
  c.vocab_size = 8;
  c.heads = 2;
  c.fusion_heads = 2;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  return c;
}

/// Pipeline check: every parameter tensor is probed at a few sampled
/// coordinates, plus the image itself. Batch statistics are disabled
/// (running statistics), so every path stays smooth; train-mode batch norm is
/// covered by its own op check.
inline GradCheckResult pipeline_grad_check(std::uint64_t seed, std::size_t coords_per_tensor = 3,
                                           const ModelConfig& cfg = tiny_model_config(), double floor = 1e-8) {
  CoupAlign<double> model(cfg, seed);
  std::mt19937_64 rng(seed + 17);
  Tensor<double> image = detail::random_tensor({cfg.image_size, cfg.image_size, 3}, rng, 0.0, 1.0);
  Tensor<double> mask = detail::random_mask(cfg.image_size, cfg.image_size, rng);
  const std::vector<int> tokens{1, 3, 5, 0};
  std::vector<Tensor<double>> inputs{image};
  for (const auto& [name, t] : model.params().parameters()) inputs.push_back(t);
  GradCheckOptions o;
  o.seed = seed;
  o.max_coords_per_tensor = coords_per_tensor;
  o.floor = floor;
  return grad_check(
      [&]() {
        // The terms of total_loss for a batch of one: seg + λ·aux.
        const auto preds = model.forward({inputs[0]}, {tokens}, false);
        const Tensor<double> seg = scale(seg_loss_terms(preds[0].logits, mask), 1.0 / static_cast<double>(mask.numel()));
        return concat<double>({reshape(seg, {mask.numel()}), scale(aux_loss_terms(preds[0].y1, mask, 0.07), 0.1)}, 0);
      },
      inputs, o);
}

inline std::vector<GradCheckCase> grad_check_cases() {
  using detail::Fn;
  using detail::Inputs;
  using detail::off_kink_tensor;
  using detail::op_case;
  using detail::random_tensor;
  std::vector<GradCheckCase> cases;
  auto add_case = [&](std::string name, std::function<std::pair<Inputs, Fn>(std::mt19937_64&)> b) {
    cases.push_back(op_case(std::move(name), std::move(b)));
  };

  add_case("matmul", [](auto& r) { return std::pair<Inputs, Fn>{{random_tensor({3, 4}, r), random_tensor({4, 5}, r)},
                                                                 [](const Inputs& x) { return matmul(x[0], x[1]); }}; });
  add_case("transpose", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({3, 5}, r)}, [](const Inputs& x) { return transpose(x[0]); }};
  });
  add_case("add", [](auto& r) { return std::pair<Inputs, Fn>{{random_tensor({2, 3}, r), random_tensor({2, 3}, r)},
                                                              [](const Inputs& x) { return add(x[0], x[1]); }}; });
  add_case("sub", [](auto& r) { return std::pair<Inputs, Fn>{{random_tensor({2, 3}, r), random_tensor({1}, r)},
                                                              [](const Inputs& x) { return sub(x[0], x[1]); }}; });
  add_case("mul", [](auto& r) { return std::pair<Inputs, Fn>{{random_tensor({2, 3}, r), random_tensor({2, 3}, r)},
                                                              [](const Inputs& x) { return mul(x[0], x[1]); }}; });
  add_case("scale", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({4}, r)}, [](const Inputs& x) { return scale(x[0], -2.5); }};
  });
  add_case("relu", [](auto& r) {
    return std::pair<Inputs, Fn>{{off_kink_tensor({3, 4}, r)}, [](const Inputs& x) { return relu(x[0]); }};
  });
  add_case("tanh", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({3, 4}, r, -2, 2)}, [](const Inputs& x) { return tanh(x[0]); }};
  });
  add_case("sigmoid", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({3, 4}, r, -3, 3)}, [](const Inputs& x) { return sigmoid(x[0]); }};
  });
  add_case("add_bias", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({2, 3, 4}, r), random_tensor({4}, r)},
                                 [](const Inputs& x) { return add_bias(x[0], x[1]); }};
  });
  add_case("softmax", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({3, 4, 2}, r, -2, 2)}, [](const Inputs& x) { return softmax(x[0], 1); }};
  });
  add_case("masked_softmax", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({3, 5}, r, -2, 2)},
                                 [](const Inputs& x) { return masked_softmax(x[0], {1, 0, 1, 1, 0}); }};
  });
  add_case("log_softmax", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({3, 5}, r, -2, 2)}, [](const Inputs& x) { return log_softmax(x[0]); }};
  });
  add_case("concat", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({2, 3}, r), random_tensor({2, 2}, r)},
                                 [](const Inputs& x) { return concat<double>({x[0], x[1]}, 1); }};
  });
  add_case("slice", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({4, 3, 2}, r)}, [](const Inputs& x) { return slice(x[0], 1, 1, 3); }};
  });
  add_case("gather_rows", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({4, 3}, r)},
                                 [](const Inputs& x) { return gather_rows(x[0], {2, 0, 2}); }};
  });
  add_case("reshape", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({2, 6}, r)}, [](const Inputs& x) { return reshape(x[0], {3, 4}); }};
  });
  add_case("sum", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({3, 3}, r)}, [](const Inputs& x) { return sum(x[0]); }};
  });
  add_case("mean", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({3, 3}, r)}, [](const Inputs& x) { return mean(x[0]); }};
  });
  add_case("mean_axis", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({3, 4, 2}, r)}, [](const Inputs& x) { return mean_axis(x[0], 1); }};
  });
  add_case("l2_normalize", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({3, 4}, r)}, [](const Inputs& x) { return l2_normalize(x[0]); }};
  });
  add_case("conv2d", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({5, 4, 2}, r), random_tensor({3, 3, 2, 3}, r)},
                                 [](const Inputs& x) { return conv2d(x[0], x[1], 1, 1); }};
  });
  add_case("conv2d_stride2", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({6, 6, 2}, r), random_tensor({3, 3, 2, 2}, r)},
                                 [](const Inputs& x) { return conv2d(x[0], x[1], 2, 0); }};
  });
  add_case("bilinear_upsample", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({3, 4, 2}, r)},
                                 [](const Inputs& x) { return bilinear_upsample(x[0], 2); }};
  });
  add_case("space_to_depth", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({4, 4, 3}, r)}, [](const Inputs& x) { return space_to_depth(x[0], 2); }};
  });
  add_case("layer_norm", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({3, 5}, r), random_tensor({5}, r), random_tensor({5}, r)},
                                 [](const Inputs& x) { return layer_norm(x[0], x[1], x[2]); }};
  });
  add_case("batch_norm", [](auto& r) {
    return std::pair<Inputs, Fn>{{random_tensor({4, 3, 2}, r), random_tensor({2}, r), random_tensor({2}, r)},
                                 [](const Inputs& x) {
                                   BatchNormState<double> st;
                                   st.running_mean = Tensor<double>::zeros({2});
                                   st.running_var = Tensor<double>::full({2}, 1.0);
                                   return batch_norm(x[0], x[1], x[2], st, true);
                                 }};
  });
  add_case("seg_loss", [](auto& r) {
    Tensor<double> mask = detail::random_mask(4, 4, r);
    return std::pair<Inputs, Fn>{{random_tensor({4, 4}, r, -3, 3)},
                                 [mask](const Inputs& x) { return seg_loss(x[0], mask); }};
  });
  add_case("aux_loss", [](auto& r) {
    Tensor<double> mask = detail::random_mask(16, 16, r);
    return std::pair<Inputs, Fn>{{random_tensor({4, 4, 3}, r)},
                                 [mask](const Inputs& x) { return aux_loss(x[0], mask, 0.5); }};
  });
  add_case("aux_loss_raw", [](auto& r) {
    Tensor<double> mask = detail::random_mask(16, 16, r);
    return std::pair<Inputs, Fn>{{random_tensor({4, 4, 3}, r)},
                                 [mask](const Inputs& x) { return aux_loss(x[0], mask, 1.0, false); }};
  });

  // Sub-networks, probed through their inputs and parameters.

  cases.push_back({"attention", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ParamStore<double> ps;
                     MultiHeadAttention<double> attn(ps, "a", 4, 2, rng);
                     Inputs in{random_tensor({3, 4}, rng), random_tensor({5, 4}, rng)};
                     for (const auto& [_, t] : ps.parameters()) in.push_back(t);
                     GradCheckOptions o;
                     o.seed = seed;
                     return grad_check(
                         [&]() { return detail::weighted_sum(attn(in[0], in[1], {1, 1, 0, 1, 1}), seed); }, in, o);
                   }});
  cases.push_back({"wpa_step", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ParamStore<double> ps;
                     WpaParams<double> p(ps, 1, 3, 4, 5, rng);
                     Inputs in{random_tensor({6, 3}, rng), random_tensor({4, 4}, rng)};
                     for (const auto& [_, t] : ps.parameters()) in.push_back(t);
                     GradCheckOptions o;
                     o.seed = seed;
                     return grad_check(
                         [&]() {
                           auto r = wpa_step(in[0], in[1], p, WpaMode::bi, {1, 1, 1, 0});
                           return add(detail::weighted_sum(r.v_next, seed), detail::weighted_sum(r.l_next, seed + 1));
                         },
                         in, o);
                   }});
  cases.push_back({"mask_generator", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ModelConfig c = tiny_model_config();
                     ParamStore<double> ps;
                     MaskGenerator<double> gen(ps, c, rng);
                     Inputs in{random_tensor({2, 2, c.channels(4)}, rng)};
                     for (const auto& [_, t] : ps.parameters()) in.push_back(t);
                     GradCheckOptions o;
                     o.seed = seed;
                     return grad_check([&]() { return detail::weighted_sum(gen(in[0]), seed); }, in, o);
                   }});
  cases.push_back({"seg_head", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ModelConfig c = tiny_model_config();
                     c.image_size = 64;
                     ParamStore<double> ps;
                     SegHead<double> head(ps, c, rng);
                     Inputs in;
                     for (std::size_t b = 0; b < 2; ++b) {
                       in.push_back(random_tensor({c.grid(4), c.grid(4), c.channels(4)}, rng));
                       for (std::size_t i = 1; i <= 4; ++i)
                         in.push_back(random_tensor({c.grid(i), c.grid(i), c.channels(i)}, rng));
                     }
                     for (const auto& [_, t] : ps.parameters()) in.push_back(t);
                     GradCheckOptions o;
                     o.seed = seed;
                     o.max_coords_per_tensor = 24;
                     return grad_check(
                         [&]() {
                           std::vector<Tensor<double>> s_o{in[0], in[5]};
                           std::vector<std::array<Tensor<double>, 4>> stages{{in[1], in[2], in[3], in[4]},
                                                                             {in[6], in[7], in[8], in[9]}};
                           auto ys = head(s_o, stages, true);
                           return add(detail::weighted_sum(ys[0], seed), detail::weighted_sum(ys[1], seed + 1));
                         },
                         in, o);
                   }});
  cases.push_back({"sma", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ModelConfig c = tiny_model_config();
                     ParamStore<double> ps;
                     SmaParams<double> p(ps, c, rng);
                     Inputs in{random_tensor({c.n_queries, c.d_q}, rng), random_tensor({3, 3, c.d_s}, rng),
                               random_tensor({1, c.d_lang}, rng), p.wq, p.wy};
                     GradCheckOptions o;
                     o.seed = seed;
                     return grad_check([&]() { return detail::weighted_sum(sma(in[0], in[1], in[2], p).m, seed); }, in,
                                       o);
                   }});
  cases.push_back({"pipeline", [](std::uint64_t seed) { return pipeline_grad_check(seed); }});
  return cases;
}

}  // namespace coupalign
