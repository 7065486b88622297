#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fortress/numerics.hpp"
#include "fortress/rng.hpp"

using namespace fortress;

TEST(Cosine, IdenticalAndOrthogonal) {
  EXPECT_DOUBLE_EQ(cosine_sim(Vec64{1, 0}, Vec64{1, 0}), 1.0);
  EXPECT_DOUBLE_EQ(cosine_sim(Vec64{1, 0}, Vec64{0, 1}), 0.0);
}

TEST(Cosine, HandComputed) {
  // 32 / (sqrt(14) * sqrt(77))
  const double oracle = 32.0 / (std::sqrt(14.0) * std::sqrt(77.0));
  EXPECT_NEAR(cosine_sim(Vec64{1, 2, 3}, Vec64{4, 5, 6}), oracle, 1e-15);
  EXPECT_NEAR(oracle, 0.974631846, 1e-9);
}

TEST(Cosine, ZeroVectorIsDegenerate) {
  const auto before = degenerate_similarity_count();
  const Similarity s = cosine_similarity(Vec64{0, 0}, Vec64{1, 2});
  EXPECT_EQ(s.value, 0.0);
  EXPECT_TRUE(s.degenerate);
  EXPECT_EQ(degenerate_similarity_count(), before + 1);
}

TEST(Cosine, ClampedToUnitInterval) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    Vec64 a(5);
    for (double& x : a) x = rng.normal(0.0, 1e3);
    const double c = cosine_sim(a, a);
    EXPECT_LE(c, 1.0);
    EXPECT_GE(c, -1.0);
  }
}

TEST(Cosine, DimensionMismatchThrows) {
  EXPECT_THROW(cosine_sim(Vec64{1, 2}, Vec64{1, 2, 3}), ShapeError);
}

TEST(InfoNce, EmptyNegativesIsZero) {
  const auto r = info_nce(Vec64{1, 0}, Vec64{0.3, 0.7}, {}, 0.5);
  EXPECT_EQ(r.loss, 0.0);
}

TEST(InfoNce, EqualSimilaritiesGiveLog2) {
  const std::vector<Vec64> negs{Vec64{1, 0}};
  const auto r = info_nce(Vec64{1, 0}, Vec64{1, 0}, negs, 1.0);
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-12);
}

TEST(InfoNce, OrthogonalNegative) {
  const std::vector<Vec64> negs{Vec64{0, 1}};
  const auto r = info_nce(Vec64{1, 0}, Vec64{1, 0}, negs, 0.5);
  const double oracle = -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0));
  EXPECT_NEAR(r.loss, oracle, 1e-14);
  EXPECT_NEAR(r.loss, 0.126928, 1e-6);
}

TEST(InfoNce, NonPositiveTauThrows) {
  EXPECT_THROW(info_nce(Vec64{1, 0}, Vec64{1, 0}, {}, 0.0), InvalidHyperparameter);
}

TEST(InfoNce, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  auto random_vec = [&] {
    Vec64 v(8);
    for (double& x : v) x = rng.normal();
    return v;
  };
  const Vec64 a = random_vec(), p = random_vec();
  const std::vector<Vec64> negs{random_vec(), random_vec(), random_vec()};
  const auto r = info_nce(a, p, negs, 0.5);

  auto loss_anchor = [&](const Vec64& x) { return info_nce(x, p, negs, 0.5).loss; };
  EXPECT_LT(finite_diff_check(loss_anchor, a, r.grad_anchor, 1e-6), 1e-4);
  auto loss_pos = [&](const Vec64& x) { return info_nce(a, x, negs, 0.5).loss; };
  EXPECT_LT(finite_diff_check(loss_pos, p, r.grad_positive, 1e-6), 1e-4);
  for (std::size_t j = 0; j < negs.size(); ++j) {
    auto loss_neg = [&](const Vec64& x) {
      auto n = negs;
      n[j] = x;
      return info_nce(a, p, n, 0.5).loss;
    };
    EXPECT_LT(finite_diff_check(loss_neg, negs[j], r.grad_negatives[j], 1e-6), 1e-4);
  }
}

TEST(InfoNce, LossIsNonNegative) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    Vec64 a(4), p(4);
    std::vector<Vec64> n(3, Vec64(4));
    for (double& x : a) x = rng.normal();
    for (double& x : p) x = rng.normal();
    for (auto& v : n)
      for (double& x : v) x = rng.normal();
    EXPECT_GE(info_nce(a, p, n, 0.2).loss, 0.0);
  }
}

TEST(CrossEntropy, UniformTwoWay) {
  const auto r = softmax_cross_entropy(Vec64{0, 0}, 0);
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-15);
}

TEST(CrossEntropy, ConfidentCorrect) {
  const auto r = softmax_cross_entropy(Vec64{10, 0, 0}, 0);
  EXPECT_NEAR(r.loss, std::log1p(2.0 * std::exp(-10.0)), 1e-15);
  EXPECT_NEAR(r.loss, 9.08e-5, 1e-7);
}

TEST(CrossEntropy, GradientSumsToZero) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    Vec64 z(7);
    for (double& x : z) x = rng.normal(0.0, 5.0);
    const auto r = softmax_cross_entropy(z, static_cast<std::size_t>(t % 7));
    double s = 0.0;
    for (double g : r.grad) s += g;
    EXPECT_NEAR(s, 0.0, 1e-14);
  }
}

TEST(CrossEntropy, StableForHugeLogits) {
  const auto r = softmax_cross_entropy(Vec64{1e4, -1e4, 0}, 1);
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_NEAR(r.loss, 2e4, 1e-6);
}

TEST(CrossEntropy, TargetOutOfRange) {
  EXPECT_THROW(softmax_cross_entropy(Vec64{0, 0}, 2), std::out_of_range);
}

TEST(FiniteDiff, Quadratic) {
  auto f = [](const Vec64& x) { return x[0] * x[0]; };
  EXPECT_LT(finite_diff_check(f, Vec64{3.0}, Vec64{6.0}, 1e-5), 1e-9);
}

TEST(FiniteDiff, DetectsWrongGradient) {
  auto f = [](const Vec64& x) { return x[0] * x[0]; };
  EXPECT_GT(finite_diff_check(f, Vec64{3.0}, Vec64{5.0}, 1e-5), 0.1);
}

TEST(FiniteDiff, EpsilonOutsideRangeThrows) {
  auto f = [](const Vec64& x) { return x[0]; };
  EXPECT_THROW(finite_diff_check(f, Vec64{1.0}, Vec64{1.0}, 1e-2), InvalidHyperparameter);
  EXPECT_THROW(finite_diff_check(f, Vec64{1.0}, Vec64{1.0}, 1e-9), InvalidHyperparameter);
}

TEST(ClipGlobalNorm, ScalesOnlyWhenAbove) {
  std::vector<double> g{3, 4};
  clip_global_norm(g, 10.0);
  EXPECT_EQ(g, (std::vector<double>{3, 4}));
  clip_global_norm(g, 1.0);
  EXPECT_NEAR(g[0], 0.6, 1e-15);
  EXPECT_NEAR(g[1], 0.8, 1e-15);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, UniformIndexInRange) {
  Rng r(1);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(r.uniform_index(7), 7u);
}

TEST(Rng, DeriveSeedSeparatesStreams) {
  EXPECT_NE(derive_seed({1, 2, 3}), derive_seed({1, 3, 2}));
  EXPECT_EQ(derive_seed({1, 2, 3}), derive_seed({1, 2, 3}));
}

TEST(Rng, NormalMoments) {
  Rng r(9);
  double s = 0.0, s2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.03);
  EXPECT_NEAR(s2 / n, 1.0, 0.05);
}
