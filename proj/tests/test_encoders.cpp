#include <gtest/gtest.h>

#include <random>

#include "coupalign/encoders.hpp"
#include "coupalign/gradcheck_suite.hpp"
#include "oracles.hpp"

using namespace coupalign;
using TD = Tensor<double>;

namespace {

TD random(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  const std::size_t n = coupalign::numel(s);
  return TD(std::move(s), oracle::random_vec(n, rng, lo, hi));
}

void fill_params(ParamStore<double>& ps, double v) {
  for (const auto& item : ps.parameters()) {
    TD t = item.second;  // shares storage
    auto d = t.mutable_data();
    std::fill(d.begin(), d.end(), v);
  }
}

ModelConfig small_config() {
  ModelConfig c;
  c.c1 = 8;
  c.d_lang = 8;
  c.t_max = 6;
  c.vocab_size = 10;
  return c;
}

}  // namespace

TEST(ImageStage, MergeHalvesGridAndDoublesChannels) {
  std::mt19937_64 rng(1);
  ParamStore<double> ps;
  ImageStage<double> stage(ps, "s", 16, true, 2, rng);
  const TD out = stage(random({8, 8, 16}, rng));
  EXPECT_EQ(out.shape(), (Shape{4, 4, 32}));
}

TEST(ImageStage, ZeroWeightsZeroInputGiveZero) {
  std::mt19937_64 rng(2);
  ParamStore<double> ps;
  ImageStage<double> stage(ps, "s", 4, true, 2, rng);
  fill_params(ps, 0.0);
  const TD out = stage(TD::zeros({4, 4, 4}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(ImageStage, OddExtentIsContractError) {
  std::mt19937_64 rng(3);
  ParamStore<double> ps;
  ImageStage<double> stage(ps, "s", 4, true, 2, rng);
  EXPECT_THROW(stage(TD::zeros({3, 4, 4})), ContractError);
}

TEST(ImageStage, GradCheck) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    std::mt19937_64 rng(seed);
    ParamStore<double> ps;
    ImageStage<double> stage(ps, "s", 4, true, 2, rng);
    std::vector<TD> in{random({4, 4, 4}, rng)};
    for (auto& [name, t] : ps.parameters()) in.push_back(t);
    const TD w = random({2, 2, 8}, rng);
    const auto r = grad_check([&]() { return sum(mul(stage(in[0]), w)); }, in);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
}

TEST(ImageEncoder, PatchLocality) {
  std::mt19937_64 rng(4);
  ParamStore<double> ps;
  const ModelConfig cfg = small_config();
  ImageEncoder<double> enc(ps, cfg, rng);
  TD image = random({64, 64, 3}, rng, 0, 1);
  const TD before = enc.embed(image);
  auto px = image.mutable_data();
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x)
      if (y >= 4 || x >= 4)
        for (std::size_t c = 0; c < 3; ++c) px[(y * 64 + x) * 3 + c] = 0.5;
  const TD after = enc.embed(image);
  for (std::size_t c = 0; c < cfg.c1; ++c) EXPECT_EQ(before[c], after[c]);
  EXPECT_EQ(before.shape(), (Shape{16, 16, cfg.c1}));
}

TEST(ImageEncoder, FourStagesWithExpectedShapes) {
  std::mt19937_64 rng(5);
  ParamStore<double> ps;
  const ModelConfig cfg = small_config();
  ImageEncoder<double> enc(ps, cfg, rng);
  LanguageEncoder<double> lang(ps, cfg, rng);
  EXPECT_EQ(enc.stages.size(), 4u);
  EXPECT_EQ(lang.stages.size(), 4u);
  TD v = enc.embed(random({64, 64, 3}, rng, 0, 1));
  const std::vector<Shape> expected{{8, 8, 16}, {4, 4, 32}, {2, 2, 64}, {2, 2, 64}};
  for (std::size_t i = 1; i <= 4; ++i) {
    v = enc.stage(i, v);
    EXPECT_EQ(v.shape(), expected[i - 1]) << "stage " << i;
  }
  EXPECT_THROW(enc.embed(TD::zeros({48, 64, 3})), ContractError);
  EXPECT_THROW(enc.embed(TD::zeros({32, 32, 3})), DimensionError);
}

TEST(LanguageEncoder, EmbedIsTableRowPlusPositionRow) {
  std::mt19937_64 rng(6);
  ParamStore<double> ps;
  const ModelConfig cfg = small_config();
  LanguageEncoder<double> lang(ps, cfg, rng);
  const std::vector<int> ids{1, 7, 7, 0};
  const auto [e, valid] = lang.embed_tokens(ids);
  EXPECT_EQ(valid, (std::vector<std::uint8_t>{1, 1, 1, 0}));
  for (std::size_t j = 0; j < ids.size(); ++j)
    for (std::size_t k = 0; k < cfg.d_lang; ++k) {
      EXPECT_EQ(e[j * cfg.d_lang + k], lang.table[static_cast<std::size_t>(ids[j]) * cfg.d_lang + k] +
                                           lang.position[j * cfg.d_lang + k]);
    }
  for (std::size_t k = 0; k < cfg.d_lang; ++k) {
    EXPECT_NEAR(e[1 * cfg.d_lang + k] - e[2 * cfg.d_lang + k],
                lang.position[1 * cfg.d_lang + k] - lang.position[2 * cfg.d_lang + k], 1e-12);
  }
}

TEST(LanguageEncoder, BadSequencesAreInputErrors) {
  std::mt19937_64 rng(7);
  ParamStore<double> ps;
  LanguageEncoder<double> lang(ps, small_config(), rng);
  EXPECT_THROW(lang.embed_tokens({}), InputError);
  EXPECT_THROW(lang.embed_tokens({1, 10}), InputError);
  EXPECT_THROW(lang.embed_tokens({1, -1}), InputError);
  EXPECT_THROW(lang.embed_tokens(std::vector<int>(7, 1)), InputError);
}

TEST(LanguageEncoder, SingleTokenAttendsToItselfWithWeightOne) {
  std::mt19937_64 rng(8);
  ParamStore<double> ps;
  LanguageEncoder<double> lang(ps, small_config(), rng);
  const auto [e, valid] = lang.embed_tokens({1});
  std::vector<TD> probs;
  const TD out = lang.stage(1, e, valid, &probs);
  EXPECT_EQ(out.shape(), (Shape{1, 8}));
  ASSERT_FALSE(probs.empty());
  for (const TD& p : probs) EXPECT_EQ(p.item(), 1.0);
}

TEST(LanguageEncoder, PaddingGetsNoAttentionAndChangesNothing) {
  std::mt19937_64 rng(9);
  ParamStore<double> ps;
  LanguageEncoder<double> lang(ps, small_config(), rng);
  auto [e, valid] = lang.embed_tokens({1, 4, 5, 0, 0, 0});
  std::vector<TD> probs;
  const TD a = lang.stage(2, e, valid, &probs);
  for (const TD& p : probs)
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 3; c < 6; ++c) EXPECT_EQ(p[r * 6 + c], 0.0);
  auto d = e.mutable_data();
  for (std::size_t k = 3 * 8; k < d.size(); ++k) d[k] += 5.0;
  const TD b = lang.stage(2, e, valid);
  for (std::size_t k = 0; k < 3 * 8; ++k) EXPECT_EQ(a[k], b[k]);
}

TEST(LanguageEncoder, AllPaddingIsContractError) {
  std::mt19937_64 rng(10);
  ParamStore<double> ps;
  LanguageEncoder<double> lang(ps, small_config(), rng);
  const auto [e, valid] = lang.embed_tokens({0, 0, 0});
  EXPECT_THROW(lang.stage(1, e, valid), ContractError);
}

TEST(LanguageEncoder, GradCheck) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    std::mt19937_64 rng(seed);
    ParamStore<double> ps;
    ModelConfig cfg = small_config();
    cfg.d_lang = 4;
    LanguageEncoder<double> lang(ps, cfg, rng);
    std::vector<TD> in{random({4, 4}, rng)};
    for (auto& [name, t] : ps.parameters())
      if (name.rfind("enc.lang.stage1", 0) == 0) in.push_back(t);
    const TD w = random({4, 4}, rng);
    const std::vector<std::uint8_t> valid{1, 1, 1, 0};
    const auto r = grad_check([&]() { return sum(mul(lang.stage(1, in[0], valid), w)); }, in);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
}

TEST(LanguageEncoder, SentenceVectorIsClsRow) {
  std::mt19937_64 rng(11);
  ParamStore<double> ps;
  LanguageEncoder<double> lang(ps, small_config(), rng);
  auto run = [&](const std::vector<int>& ids, double pad_shift) {
    auto [l, valid] = lang.embed_tokens(ids);
    auto d = l.mutable_data();
    for (std::size_t j = 0; j < ids.size(); ++j)
      if (!valid[j])
        for (std::size_t k = 0; k < 8; ++k) d[j * 8 + k] += pad_shift;
    for (std::size_t i = 1; i <= 4; ++i) l = lang.stage(i, l, valid);
    return std::pair{l, LanguageEncoder<double>::extract_sentence(l)};
  };
  const auto [l1, g1] = run({1}, 0);
  EXPECT_EQ(g1.shape(), (Shape{1, 8}));
  EXPECT_EQ(g1.values(), l1.values());
  const auto [la, ga] = run({1, 3, 0, 0}, 0);
  const auto [lb, gb] = run({1, 3, 0, 0}, 3.0);
  EXPECT_EQ(ga.values(), gb.values());
  EXPECT_EQ(ga.shape(), (Shape{1, 8}));
}

TEST(Encoders, DeterministicUnderSeed) {
  auto build = [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParamStore<double> ps;
    ImageEncoder<double> enc(ps, small_config(), rng);
    LanguageEncoder<double> lang(ps, small_config(), rng);
    std::vector<double> all;
    for (auto& [n, t] : ps.parameters()) all.insert(all.end(), t.values().begin(), t.values().end());
    return all;
  };
  EXPECT_EQ(build(3), build(3));
  EXPECT_NE(build(3), build(4));
}
