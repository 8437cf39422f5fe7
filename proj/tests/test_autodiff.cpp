#include <gtest/gtest.h>

#include <cmath>

#include "primitive_cases.hpp"

using namespace lolab;
using namespace lolab::testing;

class PrimitiveGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  const auto cases = primitive_cases();
  const auto& pc = cases.at(GetParam());
  const CaseOutcome o = check_case(pc, 100, 1000 + GetParam());
  EXPECT_EQ(o.failures, 0u) << pc.name << " worst rel " << o.worst_rel;
}

INSTANTIATE_TEST_SUITE_P(All, PrimitiveGradient, ::testing::Range<std::size_t>(0, primitive_cases().size()),
                         [](const auto& info) { return primitive_cases()[info.param].name; });

TEST(Tape, SumOfSquaresGradient) {
  Tape t;
  Var x = t.variable(Tensor::vector({3.0, 4.0}));
  Var y = sum(mul(x, x));
  EXPECT_DOUBLE_EQ(y.item(), 25.0);
  const Tensor g = t.backward(y).wrt(x);
  EXPECT_DOUBLE_EQ(g[0], 6.0);
  EXPECT_DOUBLE_EQ(g[1], 8.0);
}

TEST(Tape, ReluSubgradientAtZeroIsZero) {
  Tape t;
  Var x = t.variable(Tensor::vector({0.0, -1.0, 2.0}));
  const Tensor g = t.backward(sum(relu(x))).wrt(x);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_EQ(g[2], 1.0);
}

TEST(Tape, MaxpoolTieRoutesToFirstIndex) {
  Tape t;
  Var x = t.variable(Tensor({1, 1, 2, 2}, {1.0, 1.0, 1.0, 1.0}));
  const Tensor g = t.backward(sum(maxpool2d(x, 2, 2))).wrt(x);
  EXPECT_EQ(g[0], 1.0);
  EXPECT_EQ(g[1] + g[2] + g[3], 0.0);
}

TEST(Tape, SignHasZeroGradient) {
  Tape t;
  Var x = t.variable(Tensor::vector({-2.0, 0.5}));
  const Tensor g = t.backward(sum(sign(x))).wrt(x);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
}

TEST(Tape, UnreachedVariableGetsZeros) {
  Tape t;
  Var x = t.variable(Tensor::vector({1.0, 2.0}));
  Var z = t.variable(Tensor::vector({5.0}));
  const Gradients g = t.backward(sum(x));
  EXPECT_EQ(g.wrt(z), Tensor::vector({0.0}));
}

TEST(Tape, BackwardTwiceIsRejected) {
  Tape t;
  Var x = t.variable(Tensor::vector({1.0}));
  Var y = sum(x);
  t.backward(y);
  EXPECT_THROW(t.backward(y), Error);
}

TEST(Tape, NonScalarRootIsRejected) {
  Tape t;
  Var x = t.variable(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(t.backward(x), ShapeError);
}

TEST(Tape, MismatchedShapesAreRejected) {
  Tape t;
  Var a = t.variable(Tensor({2, 3}));
  Var b = t.variable(Tensor({3, 2}));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(mul(a, b), ShapeError);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Tape, NonFiniteValueIsRejected) {
  Tape t;
  EXPECT_THROW(t.variable(Tensor::vector({std::nan("")})), NonFiniteError);
  Var x = t.variable(Tensor::vector({1e300}));
  EXPECT_THROW(mul(x, x), NonFiniteError);
}

TEST(Tape, DifferentTapesAreRejected) {
  Tape t1, t2;
  Var a = t1.variable(Tensor::vector({1.0}));
  Var b = t2.variable(Tensor::vector({1.0}));
  EXPECT_THROW(add(a, b), Error);
}

TEST(Tape, GradientIsLinearInRoot) {
  RngStream rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor xv = randn({6}, rng);
    const double a = rng.normal(), b = rng.normal();
    auto grad_of = [&](int which) {
      Tape t;
      Var x = t.variable(xv);
      Var f = sum(tanh(x));
      Var g = sum(mul(sigmoid(x), x));
      Var root = which == 0 ? f : which == 1 ? g : add(scale(f, a), scale(g, b));
      return t.backward(root).wrt(x);
    };
    const Tensor gf = grad_of(0), gg = grad_of(1), gc = grad_of(2);
    for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_NEAR(gc[i], a * gf[i] + b * gg[i], 1e-12);
  }
}

TEST(Tape, ReplayIsBitwiseDeterministic) {
  RngStream rng(6);
  const Tensor xv = randn({2, 1, 6, 6}, rng);
  const Tensor wv = randn({3, 1, 3, 3}, rng);
  auto run = [&]() {
    Tape t;
    Var x = t.variable(xv);
    Var w = t.variable(wv);
    Var y = sum(maxpool2d(relu(conv2d(x, w)), 2, 2));
    const Gradients g = t.backward(y);
    return std::make_pair(g.wrt(x), g.wrt(w));
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, SharedSubexpressionAccumulates) {
  Tape t;
  Var x = t.variable(Tensor::vector({2.0}));
  Var y = sum(add(mul(x, x), x));
  EXPECT_DOUBLE_EQ(t.backward(y).wrt(x)[0], 5.0);
}

TEST(Tape, SoftmaxXentValue) {
  Tape t;
  Var z = t.variable(Tensor({1, 2}, {0.0, 0.0}));
  EXPECT_NEAR(softmax_xent(z, {1}).item(), std::log(2.0), 1e-15);
  EXPECT_THROW(softmax_xent(z, {2}), Error);
}

TEST(Tape, Conv2dMatchesHandComputation) {
  Tape t;
  Var x = t.variable(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
  Var w = t.variable(Tensor({1, 1, 2, 2}, {1, 0, 0, -1}));
  Var b = t.variable(Tensor::vector({0.5}));
  Var y = conv2d(x, w, &b);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 1 - 4 + 0.5);
}

TEST(Tape, SigmoidAtZeroIsHalf) {
  Tape t;
  EXPECT_EQ(sigmoid(t.constant(Tensor::scalar(0.0))).item(), 0.5);
}

TEST(Tape, IdentityMatmulReturnsOperand) {
  RngStream rng(8);
  Tape t;
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 4] = 1.0;
  const Tensor a = randn({3, 3}, rng);
  EXPECT_EQ(matmul(t.constant(eye), t.constant(a)).value(), a);
}

TEST(Tape, UnitKernelConvIsIdentity) {
  RngStream rng(9);
  Tape t;
  const Tensor x = randn({2, 1, 4, 5}, rng);
  EXPECT_EQ(conv2d(t.constant(x), t.constant(Tensor({1, 1, 1, 1}, {1.0}))).value(), x);
}

TEST(Tape, HalfSquareDerivative) {
  Tape t;
  Var th = t.variable(Tensor::scalar(3.0));
  Var root = scale(mul(th, th), 0.5);
  EXPECT_DOUBLE_EQ(t.backward(root).wrt(th).item(), 3.0);
}

TEST(Tape, MseAtMinimumHasZeroGradient) {
  RngStream rng(10);
  const Tensor v = randn({4, 2}, rng);
  Tape t;
  Var p = t.variable(v), q = t.variable(v);
  const Gradients g = t.backward(mse(p, q));
  EXPECT_EQ(g.wrt(p), Tensor({4, 2}));
  EXPECT_EQ(g.wrt(q), Tensor({4, 2}));
}
