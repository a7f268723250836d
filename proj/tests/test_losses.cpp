#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "coupalign/gradcheck_suite.hpp"
#include "coupalign/losses.hpp"
#include "oracles.hpp"

using namespace coupalign;
using TD = Tensor<double>;

namespace {

TD random(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  const std::size_t n = coupalign::numel(s);
  return TD(std::move(s), oracle::random_vec(n, rng, lo, hi));
}

TD random_mask(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.4);
  std::vector<double> m(h * w);
  for (double& x : m) x = b(rng) ? 1.0 : 0.0;
  return TD({h, w}, std::move(m));
}

GradCheckResult run_case(const std::string& name, std::uint64_t seed) {
  for (const auto& c : grad_check_cases())
    if (c.name == name) return c.run(seed);
  throw std::runtime_error("no case " + name);
}

// Two pixels on a 1×2 grid, one per set, with orthogonal features.
TD two_orthogonal(double a, double b) { return TD({1, 2, 2}, {a, 0, 0, b}); }

}  // namespace

TEST(SegLoss, ZeroLogitsGiveLn2) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const TD mask = random_mask(6, 5, rng);
    EXPECT_NEAR(seg_loss(TD::zeros({6, 5}), mask).item(), std::log(2.0), 1e-12);
  }
}

TEST(SegLoss, SaturatedLogitsGiveNearZero) {
  std::mt19937_64 rng(2);
  const TD mask = random_mask(8, 8, rng);
  std::vector<double> x(64);
  for (std::size_t i = 0; i < 64; ++i) x[i] = mask[i] > 0 ? 20.0 : -20.0;
  const double v = seg_loss(TD({8, 8}, x), mask).item();
  EXPECT_LT(v, 1e-8);
  EXPECT_GE(v, 0.0);
}

TEST(SegLoss, HandComputedTwoByTwo) {
  const TD logits({2, 2}, {1, -1, 0, 2}), mask({2, 2}, {1, 0, 0, 1});
  const double l1 = std::log1p(std::exp(-1.0));
  const double expect = (l1 + l1 + std::log(2.0) + std::log1p(std::exp(-2.0))) / 4;
  EXPECT_NEAR(seg_loss(logits, mask).item(), expect, 1e-12);
  EXPECT_NEAR(seg_loss(logits, mask).item(), oracle::bce(logits.values(), mask.values()), 1e-12);
}

TEST(SegLoss, MatchesOracleOnRandomInstances) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const TD logits = random({5, 7}, rng, -8, 8), mask = random_mask(5, 7, rng);
    EXPECT_LT(std::abs(seg_loss(logits, mask).item() - oracle::bce(logits.values(), mask.values())), 1e-6);
  }
}

TEST(SegLoss, LargeLogitsStayFinite) {
  const TD logits({1, 2}, {800, -800}), mask({1, 2}, {0, 1});
  const double v = seg_loss(logits, mask).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 800.0, 1e-9);
}

TEST(SegLoss, InputErrors) {
  EXPECT_THROW(seg_loss(TD::zeros({2, 2}), TD({2, 2}, {0, 1, 0.5, 1})), InputError);
  EXPECT_THROW(seg_loss(TD::zeros({2, 2}), TD::zeros({2, 3})), DimensionError);
}

TEST(SegLoss, GradCheck) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) EXPECT_LT(run_case("seg_loss", seed).max_rel_error, 1e-4);
}

TEST(AuxLoss, OrthogonalPairClosedForm) {
  const TD mask({1, 2}, {1, 0});
  const double v = aux_loss(two_orthogonal(1, 1), mask, 1.0).item();
  const double e = std::exp(1.0);
  EXPECT_NEAR(v, -2 * std::log(e / (e + 1)), 1e-12);
  EXPECT_NEAR(v, 0.626524, 1e-5);
  // Normalization makes the feature lengths irrelevant.
  EXPECT_NEAR(aux_loss(two_orthogonal(3, 0.2), mask, 1.0).item(), 0.626524, 1e-5);
  const TD terms = aux_loss_terms(two_orthogonal(1, 1), mask, 1.0);
  ASSERT_EQ(terms.numel(), 2u);
  for (double t : terms.values()) EXPECT_NEAR(t, 0.313262, 1e-6);
}

TEST(AuxLoss, MatchesOracleOnRandomInstances) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const TD y1 = random({4, 4, 3}, rng);
    TD mask = random_mask(16, 16, rng);
    const auto fg = downsample_mask(mask, 4, 4);
    std::vector<int> fgi(fg.begin(), fg.end());
    int n_fg = 0;
    for (int f : fgi) n_fg += f;
    if (n_fg == 0 || n_fg == 16) continue;
    for (bool normalize : {true, false}) {
      const double tau = normalize ? 0.07 : 1.0;
      const double got = aux_loss(y1, mask, tau, normalize).item();
      EXPECT_LT(std::abs(got - oracle::infonce(y1.values(), fgi, 3, tau, normalize)), 1e-6);
    }
  }
}

TEST(AuxLoss, EmptySetIsSkipped) {
  std::mt19937_64 rng(5);
  const TD y1 = random({2, 2, 3}, rng);
  EXPECT_FALSE(aux_loss(y1, TD::full({8, 8}, 1.0), 0.07).defined());
  EXPECT_FALSE(aux_loss(y1, TD::zeros({8, 8}), 0.07).defined());
  LossReport rep;
  const TD loss = total_loss<double>({TD::zeros({8, 8})}, {y1}, {TD::full({8, 8}, 1.0)}, 0.1, 0.07, true, true, &rep);
  EXPECT_EQ(rep.aux_skipped, 1u);
  EXPECT_EQ(rep.aux, 0.0);
  EXPECT_NEAR(loss.item(), std::log(2.0), 1e-12);
}

TEST(AuxLoss, DownsamplingIsNearestNeighbour) {
  // 8×8 mask onto 2×2: cell (i, j) reads pixel (4i + 2, 4j + 2).
  std::vector<double> m(64, 0.0);
  m[2 * 8 + 6] = 1.0;
  m[6 * 8 + 2] = 1.0;
  m[0] = 1.0;
  EXPECT_EQ(downsample_mask(TD({8, 8}, m), 2, 2), (std::vector<std::uint8_t>{0, 1, 1, 0}));
  EXPECT_THROW(downsample_mask(TD::zeros({8, 8}), 3, 3), DimensionError);
}

TEST(AuxLoss, PositiveAndDecreasingAsPositivesAlign) {
  // Positives rotate towards their prototype direction as t grows.
  const TD mask({1, 4}, {1, 1, 0, 0});
  double prev = INFINITY;
  for (double t = 0.0; t <= 1.0; t += 0.125) {
    const TD y1({1, 4, 2}, {1, 1 - t, 1, -(1 - t), -1, 0.3, -1, -0.3});
    const double v = aux_loss(y1, mask, 0.5).item();
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(AuxLoss, GradCheck) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    EXPECT_LT(run_case("aux_loss", seed).max_rel_error, 1e-4);
    EXPECT_LT(run_case("aux_loss_raw", seed).max_rel_error, 1e-4);
  }
}

TEST(TotalLoss, ZeroLambdaIsMeanSegLoss) {
  std::mt19937_64 rng(6);
  const TD l1 = random({8, 8}, rng), l2 = random({8, 8}, rng), y1 = random({2, 2, 3}, rng);
  const TD m1 = random_mask(8, 8, rng), m2 = random_mask(8, 8, rng);
  const double got = total_loss<double>({l1, l2}, {y1, y1}, {m1, m2}, 0.0, 0.07, true, true).item();
  EXPECT_NEAR(got, (seg_loss(l1, m1).item() + seg_loss(l2, m2).item()) / 2, 1e-12);
}

TEST(TotalLoss, SingleImageIsSegPlusWeightedAux) {
  std::mt19937_64 rng(7);
  const TD logits = random({8, 8}, rng), y1 = random({2, 2, 3}, rng);
  std::vector<double> bits(64, 0.0);
  bits[2] = bits[2 * 8 + 2] = 1.0;
  const TD m({8, 8}, bits);
  LossReport rep;
  const double got = total_loss<double>({logits}, {y1}, {m}, 0.3, 0.07, true, true, &rep).item();
  const double expect = seg_loss(logits, m).item() + 0.3 * aux_loss(y1, m, 0.07).item();
  EXPECT_NEAR(got, expect, 1e-12);
  EXPECT_NEAR(rep.total, expect, 1e-12);
  EXPECT_EQ(rep.aux_skipped, 0u);
}

TEST(TotalLoss, BatchOfTwoHandArithmetic) {
  // Image 1: zero logits, seg = ln 2; image 2: all-ones mask, aux skipped.
  // Image 1 aux is the orthogonal-pair case at τ = 1.
  const TD y1a = two_orthogonal(1, 1), y1b = two_orthogonal(1, 1);
  const TD mask_a({2, 4}, {1, 1, 0, 0, 1, 1, 0, 0}), mask_b = TD::full({2, 4}, 1.0);
  std::vector<double> big(8, 30.0);
  LossReport rep;
  const double got = total_loss<double>({TD::zeros({2, 4}), TD({2, 4}, big)}, {y1a, y1b}, {mask_a, mask_b}, 0.5,
                                        1.0, true, true, &rep)
                         .item();
  const double seg_b = std::log1p(std::exp(-30.0));
  const double expect = ((std::log(2.0) + 0.5 * 0.626524) + seg_b) / 2;
  EXPECT_NEAR(got, expect, 1e-6);
  EXPECT_NEAR(rep.seg, (std::log(2.0) + seg_b) / 2, 1e-12);
  EXPECT_NEAR(rep.aux, 0.626524 / 2, 1e-6);
  EXPECT_EQ(rep.aux_skipped, 1u);
}

TEST(TotalLoss, AuxDisabledIgnoresFeatures) {
  std::mt19937_64 rng(8);
  const TD logits = random({8, 8}, rng), mask = random_mask(8, 8, rng);
  LossReport rep;
  const double got = total_loss<double>({logits}, {}, {mask}, 0.1, 0.07, false, true, &rep).item();
  EXPECT_NEAR(got, seg_loss(logits, mask).item(), 1e-15);
  EXPECT_EQ(rep.aux, 0.0);
  EXPECT_THROW(total_loss<double>({logits}, {}, {}, 0.1, 0.07, false, true), ContractError);
}
