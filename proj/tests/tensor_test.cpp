#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "mpthcl/grad_check.hpp"
#include "mpthcl/tensor.hpp"
#include "test_util.hpp"

using namespace mpthcl;
using testutil::weighted_sum;

TEST(Tensor, ConstructionValidatesShape) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor::zeros({0, 3}), ShapeError);
  auto s = Tensor::scalar(2.5);
  EXPECT_EQ(s.numel(), 1u);
  EXPECT_EQ(s.rank(), 0u);
  EXPECT_DOUBLE_EQ(s.item(), 2.5);
}

TEST(Softmax, UniformOverEqualLogits) {
  auto y = softmax(Tensor::zeros({4}), 0);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, ShiftInvariantWithoutOverflow) {
  Rng rng(1);
  auto x = randn({3, 6}, rng);
  auto shifted = add(x, Tensor::scalar(1000.0));
  auto a = softmax(x, 1);
  auto b = softmax(shifted, 1);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-12);
}

TEST(Softmax, RowsAreDistributions) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = randn({5, 7}, rng, 10.0);
    for (std::size_t axis : {0u, 1u}) {
      auto y = softmax(x, axis);
      const std::size_t lines = axis == 1 ? 5 : 7, len = axis == 1 ? 7 : 5;
      for (std::size_t k = 0; k < lines; ++k) {
        double s = 0;
        for (std::size_t t = 0; t < len; ++t) {
          const double v = axis == 1 ? y.at(k, t) : y.at(t, k);
          EXPECT_GE(v, 0.0);
          s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    }
  }
}

TEST(Softmax, RejectsInvalidAxis) {
  EXPECT_THROW(softmax(Tensor::zeros({2, 2}), 2), ShapeError);
  EXPECT_THROW(softmax(Tensor::zeros({3}), 1), ShapeError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto m = Tensor::matrix({{1, 2}, {3, 4}});
  auto y = matmul(Tensor::identity(2), m);
  EXPECT_EQ(y.values(), m.values());
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({3, 4}), Tensor::zeros({5, 4}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(3,4)"), std::string::npos);
    EXPECT_NE(msg.find("(5,4)"), std::string::npos);
  }
}

TEST(Concat, ShapeArithmetic) {
  auto y = concat({Tensor::zeros({3, 4}), Tensor::zeros({5, 4})}, 0);
  EXPECT_EQ(y.shape(), (Shape{8, 4}));
  auto z = concat({Tensor::zeros({3, 4}), Tensor::zeros({3, 2})}, 1);
  EXPECT_EQ(z.shape(), (Shape{3, 6}));
  EXPECT_THROW(concat({Tensor::zeros({3, 4}), Tensor::zeros({5, 3})}, 0), ShapeError);
}

TEST(Concat, BackwardSplitsGradientExactly) {
  Rng rng(3);
  for (std::size_t axis : {0u, 1u}) {
    auto a = randn({2, 3}, rng, 1.0, true);
    auto b = randn({axis == 0 ? 4u : 2u, axis == 0 ? 3u : 5u}, rng, 1.0, true);
    auto y = concat({a, b}, axis);
    auto w = randn(y.shape(), rng);
    backward(sum(mul(y, w)));
    // d/dy of sum(w*y) is w, so each input's grad is its slice of w
    auto wa = axis == 0 ? slice(w, 0, 0, 2) : slice(w, 1, 0, 3);
    auto wb = axis == 0 ? slice(w, 0, 2, 6) : slice(w, 1, 3, 8);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.grad()[i], wa.at(i));
    for (std::size_t i = 0; i < b.numel(); ++i) EXPECT_EQ(b.grad()[i], wb.at(i));
  }
}

TEST(L2Normalize, UnitNorm) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto y = l2_normalize(randn({4, 9}, rng, 5.0));
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 9; ++j) s += y.at(i, j) * y.at(i, j);
      EXPECT_NEAR(std::sqrt(s), 1.0, 1e-12);
    }
  }
}

TEST(Dropout, IdentityCases) {
  Rng rng(5);
  auto x = randn({3, 3}, rng);
  EXPECT_EQ(dropout(x, 0.0, true, &rng).values(), x.values());
  EXPECT_EQ(dropout(x, 0.5, false, &rng).values(), x.values());
}

TEST(Dropout, InvertedScaling) {
  Rng rng(6);
  auto x = Tensor::full({1000}, 1.0);
  auto y = dropout(x, 0.25, true, &rng);
  std::size_t kept = 0;
  for (double v : y.data()) {
    if (v != 0.0) {
      EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
      ++kept;
    }
  }
  EXPECT_GT(kept, 700u);
  EXPECT_LT(kept, 800u);
}

TEST(Primitive, NonFiniteOutputNamesPrimitive) {
  try {
    log(Tensor::vector({1.0, 0.0}));
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
  }
  EXPECT_THROW(exp(Tensor::vector({1000.0})), NumericError);
}

TEST(Primitive, DispatchMatchesDirectCalls) {
  Rng rng(7);
  auto x = randn({3, 4}, rng);
  PrimitiveAttrs attrs;
  attrs.axis = 1;
  EXPECT_EQ(apply_primitive(Primitive::kSoftmax, {x}, attrs).values(), softmax(x, 1).values());
  attrs.start = 1;
  attrs.end = 3;
  EXPECT_EQ(apply_primitive(Primitive::kSlice, {x}, attrs).values(), slice(x, 1, 1, 3).values());
  EXPECT_THROW(apply_primitive(Primitive::kAdd, {x}), ShapeError);
  EXPECT_THROW(apply_primitive(Primitive::kSoftmax, {x}), ShapeError);  // axis missing
}

TEST(Backward, SquareHasDerivativeSix) {
  auto x = Tensor::scalar(3.0, true);
  backward(mul(x, x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  Rng rng(8);
  auto x = randn({6}, rng, 1.0, true);
  backward(sum(softmax(x, 0)));
  for (double g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, RejectsNonScalarRoot) {
  auto x = Tensor::zeros({2}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
}

TEST(Backward, DetachedLeafGetsZeroGrad) {
  auto x = Tensor::vector({1, 2}, true);
  auto unused = Tensor::vector({3, 4}, true);
  backward(sum(x));
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, AccumulatesOverAllPaths) {
  auto x = Tensor::scalar(2.0, true);
  auto y = add(mul(x, x), scale(x, 3.0));  // x^2 + 3x
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Backward, VisitsEachNodeOnce) {
  auto x = Tensor::vector({1, 2, 3}, true);
  auto a = tanh(x);
  auto b = add(a, a);
  auto c = mul(b, a);
  auto g = trace(sum(c));
  std::set<detail::Node*> unique(g.nodes.begin(), g.nodes.end());
  EXPECT_EQ(unique.size(), g.nodes.size());
  EXPECT_EQ(g.nodes.size(), 5u);  // x, a, b, c, sum
  EXPECT_EQ(g.leaves.size(), 1u);
}

TEST(Backward, RandomThreeLayerCompositionMatchesFiniteDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = randn({4, 5}, rng, 1.0, true);
    auto w1 = randn({5, 6}, rng, 0.5, true);
    auto b1 = randn({6}, rng, 0.5, true);
    auto w2 = randn({6, 3}, rng, 0.5, true);
    auto w3 = randn({3, 3}, rng, 0.5, true);
    auto f = [&]() {
      auto h1 = tanh(add(matmul(x, w1), b1));
      auto h2 = sigmoid(matmul(h1, w2));
      return weighted_sum(softmax(matmul(h2, w3), 1), 17);
    };
    backward(f());
    for (Tensor* t : {&x, &w1, &b1, &w2, &w3}) {
      auto num = testutil::numeric_grad([&] { return f().item(); }, *t, 1e-5);
      for (std::size_t i = 0; i < num.size(); ++i)
        EXPECT_LT(testutil::rel_err(t->grad()[i], num[i]), 1e-4);
    }
  }
}

// Every primitive against central differences on five random instances.
class PrimitiveGradient : public ::testing::TestWithParam<Primitive> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
  const Primitive kind = GetParam();
  Rng rng(100 + static_cast<int>(kind));
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(5), k = 1 + rng.below(4);
    std::vector<Tensor> in;
    PrimitiveAttrs attrs;
    switch (kind) {
      case Primitive::kMatmul:
        in = {randn({r, k}, rng), randn({k, c}, rng)};
        break;
      case Primitive::kAdd:
      case Primitive::kSub:
      case Primitive::kMul:
        in = {randn({r, c}, rng), trial % 2 ? randn({c}, rng) : randn({r, c}, rng)};
        if (trial == 4) in[1] = randn({r, 1}, rng);
        break;
      case Primitive::kConcat:
        attrs.axis = trial % 2;
        in = {randn({r, c}, rng), trial % 2 ? randn({r, k}, rng) : randn({k, c}, rng)};
        break;
      case Primitive::kSlice:
        attrs.axis = trial % 2;
        attrs.start = 0;
        attrs.end = 1;
        in = {randn({r + 1, c + 1}, rng)};
        attrs.start = 1;
        attrs.end = (trial % 2 ? c + 1 : r + 1);
        break;
      case Primitive::kSum:
      case Primitive::kMean:
        if (trial < 4) attrs.axis = trial % 2;
        in = {randn({r, c}, rng)};
        break;
      case Primitive::kSoftmax:
      case Primitive::kLogSoftmax:
        attrs.axis = trial % 2;
        in = {randn({r, c + 1}, rng, 2.0)};
        break;
      case Primitive::kLog: {
        auto x = randn({r, c}, rng);
        for (auto& v : x.mutable_data()) v = 0.5 + std::abs(v);
        in = {x};
        break;
      }
      case Primitive::kRelu:
      case Primitive::kLeakyRelu:
        attrs.slope = 0.2;
        in = {testutil::rand_away_from_zero({r, c}, rng)};
        break;
      case Primitive::kLayerNorm:
        in = {randn({r, c + 1}, rng), randn({c + 1}, rng), randn({c + 1}, rng)};
        break;
      case Primitive::kL2Normalize:
        in = {randn({r, c + 1}, rng)};
        break;
      case Primitive::kDropout:
        attrs.p = 0.3;
        attrs.training = trial % 2 == 0;
        in = {randn({r, c}, rng)};
        break;
      case Primitive::kScale:
        attrs.factor = rng.normal();
        in = {randn({r, c}, rng)};
        break;
      default:
        in = {randn({r, c}, rng)};
    }
    NamedTensors leaves;
    for (std::size_t i = 0; i < in.size(); ++i) leaves.emplace_back("in" + std::to_string(i), in[i]);
    auto f = [&]() {
      Rng drop(42);  // same mask on every evaluation
      PrimitiveAttrs a = attrs;
      a.rng = &drop;
      return weighted_sum(apply_primitive(kind, in, a), 7 + trial);
    };
    GradCheckOptions opt;
    opt.tol = 1e-4;
    auto report = grad_check(f, leaves, opt);
    EXPECT_TRUE(report.passed) << primitive_name(kind) << " trial " << trial << ": " << report.summary();
    EXPECT_EQ(report.excluded, 0u) << primitive_name(kind);
  }
}

INSTANTIATE_TEST_SUITE_P(
    AllPrimitives, PrimitiveGradient,
    ::testing::Values(Primitive::kMatmul, Primitive::kAdd, Primitive::kSub, Primitive::kMul,
                      Primitive::kConcat, Primitive::kSlice, Primitive::kSum, Primitive::kMean,
                      Primitive::kSoftmax, Primitive::kLogSoftmax, Primitive::kSigmoid,
                      Primitive::kTanh, Primitive::kRelu, Primitive::kLeakyRelu, Primitive::kExp,
                      Primitive::kLog, Primitive::kLayerNorm, Primitive::kL2Normalize,
                      Primitive::kDropout, Primitive::kTranspose, Primitive::kScale),
    [](const auto& info) { return std::string(primitive_name(info.param)); });
