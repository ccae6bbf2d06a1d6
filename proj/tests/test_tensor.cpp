#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "xptlab/error.hpp"
#include "xptlab/tensor.hpp"

using namespace xptlab;
using xptlab::testing::uniform;

namespace {

// Central differences computed here, independently of finite_diff_check.
Tensor numeric_gradient(const ScalarFn& f, const Tensor& x, double h = 1e-5) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor plus = x, minus = x;
    plus[i] += h;
    minus[i] -= h;
    Tape tp, tm;
    const double fp = f(tp, tp.constant(plus)).value().item();
    const double fm = f(tm, tm.constant(minus)).value().item();
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

Tensor tape_gradient(const ScalarFn& f, const Tensor& x) {
  Tape t;
  const Var v = t.variable(x);
  const Var loss = f(t, v);
  return t.backward(loss).at(v);
}

double max_rel_error(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), 1e-8}));
  }
  return worst;
}

// Weighted sum so every output element carries a distinct gradient.
Var probe_sum(Tape& t, Var y, std::uint64_t seed) {
  return sum(mul(y, t.constant(uniform(y.shape(), seed, 0.5, 1.5))));
}

void expect_gradient(const ScalarFn& f, const Tensor& x, double tol) {
  const double err = max_rel_error(tape_gradient(f, x), numeric_gradient(f, x));
  EXPECT_LT(err, tol);
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  const Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Matmul, IdentityCase) {
  const Tensor i = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor b = Tensor::matrix(2, 2, {2, 3, 4, 5});
  EXPECT_EQ(matmul(i, b), b);
}

TEST(Matmul, RowTimesColumn) {
  const Tensor c = matmul(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(2, 1, {3, 4}));
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c[0], 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  const Var a = t.constant(Tensor({3, 4}));
  const Var b = t.constant(Tensor({5, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("3"), std::string::npos);
    EXPECT_NE(msg.find("4"), std::string::npos);
    EXPECT_NE(msg.find("5"), std::string::npos);
  }
}

TEST(Matmul, GradientBothSides) {
  const Tensor a = uniform({3, 4}, 1);
  const Tensor b = uniform({4, 2}, 2);
  expect_gradient([&](Tape& t, Var x) { return probe_sum(t, matmul(x, t.constant(b)), 3); }, a, 1e-6);
  expect_gradient([&](Tape& t, Var x) { return probe_sum(t, matmul(t.constant(a), x), 4); }, b, 1e-6);
}

TEST(Softmax, SymmetricInput) {
  Tape t;
  const Var y = softmax(t.constant(Tensor({1, 2}, {0, 0})), 1);
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  Tape t;
  const Var y = softmax(t.constant(Tensor({1, 2}, {1000, 0})), 1);
  EXPECT_DOUBLE_EQ(y.value()[0], 1.0);
  EXPECT_GE(y.value()[1], 0.0);
  EXPECT_LT(y.value()[1], 1e-300);
  EXPECT_TRUE(y.value().all_finite());
}

TEST(Softmax, RowsSumToOneAndGradient) {
  const Tensor x = uniform({5, 7}, 11);
  for (std::size_t axis : {0u, 1u}) {
    Tape t;
    const Tensor y = softmax(t.constant(x), axis).value();
    for (double v : y.data()) EXPECT_GE(v, 0.0);
    const std::size_t outer = axis == 1 ? 5 : 7;
    for (std::size_t o = 0; o < outer; ++o) {
      double s = 0.0;
      for (std::size_t k = 0; k < (axis == 1 ? 7u : 5u); ++k) s += axis == 1 ? y(o, k) : y(k, o);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    expect_gradient([&](Tape& tp, Var v) { return probe_sum(tp, softmax(v, axis), 12); }, x, 1e-6);
  }
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  Tape t;
  const Var y = layer_norm(t.constant(Tensor({1, 4}, {5, 5, 5, 5})), t.constant(Tensor({4}, {1, 1, 1, 1})),
                           t.constant(Tensor({4})));
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, ZeroGainGivesBias) {
  Tape t;
  const Tensor bias({3}, {0.5, -1.0, 2.0});
  const Var y = layer_norm(t.constant(uniform({4, 3}, 5)), t.constant(Tensor({3})), t.constant(bias));
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y.value()(r, c), bias[c]);
  }
}

TEST(LayerNorm, NormalizesRowsBeforeAffine) {
  Tape t;
  const Var y = layer_norm(t.constant(uniform({6, 10}, 8)), t.constant(Tensor({10}, std::vector<double>(10, 1.0))),
                           t.constant(Tensor({10})));
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0.0, sq = 0.0;
    for (double v : y.value().row(r)) mean += v;
    mean /= 10;
    for (double v : y.value().row(r)) sq += (v - mean) * (v - mean);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(sq / 10, 1.0, 1e-3);  // eps shrinks the variance slightly
  }
}

TEST(LayerNorm, GradientAllInputs) {
  const Tensor x = uniform({4, 6}, 21);
  const Tensor g = uniform({6}, 22);
  const Tensor b = uniform({6}, 23);
  expect_gradient([&](Tape& t, Var v) { return probe_sum(t, layer_norm(v, t.constant(g), t.constant(b)), 24); }, x,
                  1e-5);
  expect_gradient([&](Tape& t, Var v) { return probe_sum(t, layer_norm(t.constant(x), v, t.constant(b)), 25); }, g,
                  1e-5);
  expect_gradient([&](Tape& t, Var v) { return probe_sum(t, layer_norm(t.constant(x), t.constant(g), v), 26); }, b,
                  1e-5);
}

TEST(Gelu, Values) {
  EXPECT_EQ(gelu_value(0.0), 0.0);
  EXPECT_NEAR(gelu_value(10.0), 10.0, 1e-12);
  // Longhand tanh form.
  for (double x : {-2.5, -0.3, 0.7, 1.9}) {
    const double ref = 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
    EXPECT_NEAR(gelu_value(x), ref, 1e-15);
    Tape t;
    EXPECT_NEAR(gelu(t.constant(Tensor({1}, {x}))).value()[0], ref, 1e-14);
  }
}

TEST(Gelu, GradientOnGrid) {
  std::vector<double> grid;
  for (int i = 0; i <= 60; ++i) grid.push_back(-3.0 + 0.1 * i + 1e-3);
  const Tensor x({grid.size()}, grid);
  expect_gradient([](Tape& t, Var v) { return sum(gelu(v)); }, x, 1e-6);
}

TEST(CrossEntropy, UniformLogits) {
  Tape t;
  const int label[] = {0};
  EXPECT_NEAR(cross_entropy_logits(t.constant(Tensor({1, 2}, {0, 0})), label).value().item(), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, ConfidentCorrect) {
  Tape t;
  const int label[] = {0};
  EXPECT_LT(cross_entropy_logits(t.constant(Tensor({1, 2}, {100, 0})), label).value().item(), 1e-40);
}

TEST(CrossEntropy, LabelOutOfRange) {
  Tape t;
  const int label[] = {2};
  EXPECT_THROW(cross_entropy_logits(t.constant(Tensor({1, 2})), label), IndexError);
  const int neg[] = {-1};
  EXPECT_THROW(cross_entropy_logits(t.constant(Tensor({1, 2})), neg), IndexError);
}

TEST(CrossEntropy, AnalyticGradient) {
  const Tensor logits = uniform({6, 3}, 31);
  const std::vector<int> labels{0, 2, 1, 1, 0, 2};
  Tape t;
  const Var v = t.variable(logits);
  const Tensor g = t.backward(cross_entropy_logits(v, labels)).at(v);
  for (std::size_t r = 0; r < 6; ++r) {
    double m = -1e300, z = 0.0;
    for (std::size_t c = 0; c < 3; ++c) m = std::max(m, logits(r, c));
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits(r, c) - m);
    for (std::size_t c = 0; c < 3; ++c) {
      const double p = std::exp(logits(r, c) - m) / z;
      const double expected = (p - (static_cast<int>(c) == labels[r] ? 1.0 : 0.0)) / 6.0;
      EXPECT_NEAR(g(r, c), expected, 1e-10);
    }
  }
}

TEST(Backward, SumGivesOnes) {
  Tape t;
  const Var x = t.variable(Tensor({3}, {1, -2, 3}));
  const Tensor g = t.backward(sum(x)).at(x);
  EXPECT_EQ(g, Tensor({3}, {1, 1, 1}));
}

TEST(Backward, QuadraticGivesTwoX) {
  Tape t;
  const Tensor xv({4}, {0.5, -1.5, 2.0, 3.0});
  const Var x = t.variable(xv);
  const Tensor g = t.backward(sum(mul(x, x))).at(x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(g[i], 2 * xv[i]);
}

TEST(Backward, NonScalarLossRejected) {
  Tape t;
  const Var x = t.variable(Tensor({3}));
  EXPECT_THROW(t.backward(x), ContractError);
}

TEST(Backward, UnreachableNodesHaveNoGradient) {
  Tape t;
  const Var x = t.variable(Tensor({2}, {1, 2}));
  const Var unused = t.variable(Tensor({2}, {3, 4}));
  const Var frozen = t.constant(Tensor({2}, {1, 1}));
  const Gradients g = t.backward(sum(mul(x, frozen)));
  EXPECT_TRUE(g.has(x));
  EXPECT_FALSE(g.has(unused));
  EXPECT_FALSE(g.has(frozen));
}

TEST(Backward, DeterministicAcrossCalls) {
  Tape t;
  const Var a = t.variable(uniform({5, 4}, 41));
  const Var b = t.variable(uniform({4, 3}, 42));
  const Var loss = sum(gelu(softmax(matmul(a, b), 1)));
  const Gradients g1 = t.backward(loss);
  const Gradients g2 = t.backward(loss);
  EXPECT_EQ(g1.at(a), g2.at(a));
  EXPECT_EQ(g1.at(b), g2.at(b));
}

TEST(Backward, InputsPrecedeNodes) {
  Tape t;
  const Var a = t.variable(uniform({2, 2}, 1));
  const Var y = add(matmul(a, a), a);
  EXPECT_GT(y.id, a.id);
  EXPECT_EQ(t.size(), y.id + 1);
}

TEST(Backward, CompositionMatchesChainedTapes) {
  // f(g(x)) on one tape vs. grad of f at g(x) pulled back through g's tape.
  const Tensor x = uniform({3, 4}, 51);
  const Tensor w = uniform({4, 4}, 52);
  Tape whole;
  const Var xw = whole.variable(x);
  const Tensor g_whole = whole.backward(sum(mul(softmax(gelu(matmul(xw, whole.constant(w))), 1),
                                                whole.constant(uniform({3, 4}, 53))))).at(xw);
  Tape outer;
  Tape inner;
  const Var xi = inner.variable(x);
  const Var gi = gelu(matmul(xi, inner.constant(w)));
  const Var go = outer.variable(gi.value());
  const Tensor dgo = outer.backward(sum(mul(softmax(go, 1), outer.constant(uniform({3, 4}, 53))))).at(go);
  const Tensor g_chain = inner.backward(gi, dgo).at(xi);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(g_whole[i], g_chain[i], 1e-12);
}

TEST(Ops, TransposeAddMulScaleAddRowGather) {
  const Tensor x = uniform({3, 4}, 61);
  const Tensor y = uniform({3, 4}, 62);
  const Tensor r = uniform({4}, 63);
  expect_gradient([&](Tape& t, Var v) { return probe_sum(t, transpose(v), 64); }, x, 1e-8);
  expect_gradient([&](Tape& t, Var v) { return probe_sum(t, add(v, t.constant(y)), 65); }, x, 1e-8);
  expect_gradient([&](Tape& t, Var v) { return probe_sum(t, mul(v, t.constant(y)), 66); }, x, 1e-8);
  expect_gradient([&](Tape& t, Var v) { return probe_sum(t, scale(v, -2.5), 67); }, x, 1e-8);
  expect_gradient([&](Tape& t, Var v) { return probe_sum(t, add_row(t.constant(x), v), 68); }, r, 1e-8);
  const std::size_t idx[] = {2, 0, 2, 1};
  expect_gradient([&](Tape& t, Var v) { return probe_sum(t, gather_rows(v, idx), 69); }, x, 1e-8);
}

TEST(FiniteDiff, SumIsNearExact) {
  const double err = finite_diff_check([](Tape&, Var v) { return sum(v); }, uniform({7}, 71));
  EXPECT_LT(err, 1e-9);
}

TEST(FiniteDiff, SoftmaxCrossEntropyComposite) {
  const std::vector<int> labels{1, 0, 2, 2};
  const ScalarFn f = [&](Tape&, Var v) { return cross_entropy_logits(scale(softmax(v, 1), 3.0), labels); };
  const Tensor x = uniform({4, 3}, 72);
  EXPECT_LT(finite_diff_check(f, x), 1e-6);
  // Agrees with the independent oracle in this file.
  EXPECT_LT(max_rel_error(tape_gradient(f, x), numeric_gradient(f, x)), 1e-6);
}

TEST(FiniteDiff, StepOutsideContractRejected) {
  const ScalarFn f = [](Tape&, Var v) { return sum(v); };
  EXPECT_THROW(finite_diff_check(f, uniform({2}, 1), 0.0), ContractError);
  EXPECT_THROW(finite_diff_check(f, uniform({2}, 1), 0.1), ContractError);
}

TEST(FiniteDiff, RelativeErrorDenominator) {
  EXPECT_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
}

// Property: every op on random inputs in [-2, 2] matches central differences.
class OpGradientProperty : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradientProperty, RandomInputs) {
  const std::uint64_t s = GetParam();
  const Tensor x = uniform({3, 5}, s);
  const Tensor w = uniform({5, 5}, s + 100);
  const ScalarFn chain = [&](Tape& t, Var v) {
    const Var h = layer_norm(gelu(matmul(v, t.constant(w))), t.constant(uniform({5}, s + 1)),
                             t.constant(uniform({5}, s + 2)));
    return probe_sum(t, softmax(h, 1), s + 3);
  };
  EXPECT_LT(finite_diff_check(chain, x), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradientProperty, ::testing::Range<std::uint64_t>(0, 10));
