#include <gtest/gtest.h>

#include "mpthcl/metrics.hpp"
#include "mpthcl/rng.hpp"

using namespace mpthcl;

TEST(Metrics, PerfectPredictions) {
  const std::vector<int> y{0, 2, 1, 1, 2};
  auto m = compute_metrics(y, y, 3);
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.weighted_f1, 1.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(m.confusion[i][j] > 0, i == j);
}

TEST(Metrics, ThreeSampleExample) {
  const std::vector<int> pred{0, 0, 1}, y{0, 1, 1};
  auto m = compute_metrics(y, pred, 2);
  // class 0: tp 1, fp 1, fn 0 -> P 1/2, R 1 -> F1 2/3; class 1: P 1, R 1/2 -> 2/3
  EXPECT_EQ(m.accuracy, 2.0 / 3.0);
  EXPECT_EQ(m.per_class_f1[0], 2.0 / 3.0);
  EXPECT_EQ(m.per_class_f1[1], 2.0 / 3.0);
  EXPECT_EQ(m.weighted_f1, 2.0 / 3.0);
  EXPECT_EQ(m.confusion[0][0], 1u);
  EXPECT_EQ(m.confusion[1][0], 1u);
  EXPECT_EQ(m.confusion[1][1], 1u);
}

TEST(Metrics, ZeroSupportClassHasNoWeight) {
  const std::vector<int> y{0, 0, 1}, pred{0, 2, 1};
  auto m = compute_metrics(y, pred, 3);
  EXPECT_EQ(m.per_class_f1[2], 0.0);
  const double f0 = 2 * 1.0 * 0.5 / 1.5;
  EXPECT_DOUBLE_EQ(m.weighted_f1, 2.0 / 3.0 * f0 + 1.0 / 3.0 * 1.0);
}

TEST(Metrics, InvariantsOnRandomSets) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(40), J = 2 + rng.below(5);
    std::vector<int> y(n), p(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng.below(J));
      p[i] = static_cast<int>(rng.below(J));
    }
    auto m = compute_metrics(y, p, J);
    std::size_t tr = 0, tot = 0;
    for (std::size_t i = 0; i < J; ++i)
      for (std::size_t j = 0; j < J; ++j) {
        tot += m.confusion[i][j];
        if (i == j) tr += m.confusion[i][j];
      }
    EXPECT_EQ(tot, n);
    EXPECT_DOUBLE_EQ(m.accuracy, static_cast<double>(tr) / tot);
    EXPECT_GE(m.weighted_f1, 0.0);
    EXPECT_LE(m.weighted_f1, 1.0 + 1e-12);
    EXPECT_EQ(compute_metrics(y, p, J), m);
  }
}

TEST(Metrics, Rejections) {
  const std::vector<int> a{0, 1}, b{0}, c{0, 5}, e{};
  EXPECT_THROW(compute_metrics(a, b, 2), ShapeError);
  EXPECT_THROW(compute_metrics(a, c, 2), ShapeError);
  EXPECT_THROW(compute_metrics(e, e, 2), ShapeError);
}
