#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cvf/gradcheck.hpp"
#include "cvf/ops.hpp"

using namespace cvf;
using Td = Tensor<double>;

namespace {

Td random_param(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Td::parameter(std::move(shape), std::move(v));
}

// Reduces any tensor to a scalar with fixed random weights so every output
// coordinate contributes a distinct amount to the loss.
Td scalarize(const Td& y, std::uint64_t seed = 99) {
  CounterRng rng(seed);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return ops::reduce_sum(ops::mul(y, Td(y.shape(), std::move(w))));
}

void expect_grad_ok(const std::function<Td()>& f, std::vector<std::pair<std::string, Td>> inputs, double tol) {
  const auto report = check_gradients<double>(f, std::move(inputs));
  ASSERT_FALSE(report.probes.empty());
  const auto* w = report.worst();
  EXPECT_LT(report.max_rel_err(), tol) << "worst probe " << w->tensor << "[" << w->index << "] analytic "
                                       << w->analytic << " numeric " << w->numeric;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Td eye({2, 2}, {1, 0, 0, 1});
  const Td m({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto out = ops::matmul(eye, m);
  EXPECT_EQ(out.shape(), (Shape{2, 3}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(out[i], m[i]);
}

TEST(Matmul, HandArithmetic) {
  const auto out = ops::matmul(Td({2, 2}, {1, 2, 3, 4}), Td({2, 1}, {1, 1}));
  EXPECT_EQ(out.shape(), (Shape{2, 1}));
  EXPECT_EQ(out[0], 3.0);
  EXPECT_EQ(out[1], 7.0);
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  EXPECT_THROW(ops::matmul(Td::zeros({2, 3}), Td::zeros({2, 3})), DimensionError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  CounterRng rng(1);
  auto a = random_param({5, 7}, rng);
  auto b = random_param({7, 3}, rng);
  expect_grad_ok([&] { return scalarize(ops::matmul(a, b)); }, {{"a", a}, {"b", b}}, 1e-5);
}

TEST(Matmul, LeadingBatchDims) {
  CounterRng rng(2);
  auto a = random_param({2, 3, 4}, rng);
  auto b = random_param({4, 5}, rng);
  const auto out = ops::matmul(a, b);
  EXPECT_EQ(out.shape(), (Shape{2, 3, 5}));
  expect_grad_ok([&] { return scalarize(ops::matmul(a, b)); }, {{"a", a}, {"b", b}}, 1e-5);
}

TEST(Bmm, GradientBothLayouts) {
  CounterRng rng(3);
  auto a = random_param({2, 3, 4}, rng);
  auto b = random_param({2, 4, 5}, rng);
  auto bt = random_param({2, 5, 4}, rng);
  expect_grad_ok([&] { return scalarize(ops::bmm(a, b)); }, {{"a", a}, {"b", b}}, 1e-5);
  expect_grad_ok([&] { return scalarize(ops::bmm(a, bt, true)); }, {{"a", a}, {"bt", bt}}, 1e-5);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i) * 0.5;
  const Td x({1, 1, 4, 4}, v);
  const auto y = ops::conv2d(x, Td({1, 1, 1, 1}, {1.0}), 1, 0);
  EXPECT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y[i], v[i]);
}

TEST(Conv2d, StridedSumOfOnes) {
  const auto y = ops::conv2d(Td::full({1, 1, 4, 4}, 1.0), Td::full({1, 1, 2, 2}, 1.0), 2, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[i], 4.0);
}

TEST(Conv2d, OutputExtentFormula) {
  // H' = floor((H + 2p - k) / s) + 1
  const auto y = ops::conv2d(Td::zeros({1, 2, 9, 7}), Td::zeros({3, 2, 3, 3}), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 5, 4}));
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
  EXPECT_THROW(ops::conv2d(Td::zeros({1, 1, 2, 2}), Td::zeros({1, 1, 5, 5}), 1, 1), DimensionError);
  EXPECT_THROW(ops::conv2d(Td::zeros({1, 2, 4, 4}), Td::zeros({1, 3, 1, 1}), 1, 0), DimensionError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  CounterRng rng(4);
  auto x = random_param({2, 3, 9, 9}, rng);
  auto w = random_param({4, 3, 3, 3}, rng);
  auto b = random_param({4}, rng);
  expect_grad_ok([&] { return scalarize(ops::conv2d<double>(x, w, b, ops::Conv2dOptions::symmetric(2, 0))); },
                 {{"x", x}, {"w", w}, {"b", b}}, 1e-4);
}

TEST(Conv2d, AsymmetricPaddingGradient) {
  CounterRng rng(5);
  auto x = random_param({1, 2, 6, 6}, rng);
  auto w = random_param({3, 2, 3, 3}, rng);
  const ops::Conv2dOptions opts{2, 0, 0, 1, 1};
  const auto y = ops::conv2d<double>(x, w, std::nullopt, opts);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
  expect_grad_ok([&] { return scalarize(ops::conv2d<double>(x, w, std::nullopt, opts)); }, {{"x", x}, {"w", w}},
                 1e-4);
}

TEST(Softmax, UniformInput) {
  const auto y = ops::softmax(Td({3}, {0, 0, 0}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, RowsAreDistributionsProperty) {
  CounterRng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.below(6);
    const std::size_t cols = 1 + rng.below(9);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = rng.uniform(-30.0, 30.0);
    const auto y = ops::softmax(Td({rows, cols}, v), -1);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        EXPECT_GE(y[r * cols + c], 0.0);
        total += y[r * cols + c];
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, AxisOutOfRangeThrows) {
  EXPECT_THROW(ops::softmax(Td::zeros({2, 3}), 2), DimensionError);
  EXPECT_THROW(ops::softmax(Td::zeros({2, 3}), -3), DimensionError);
  EXPECT_THROW(ops::reduce_sum(Td::zeros({2, 3}), 5), DimensionError);
}

TEST(Softmax, GradientAlongEachAxis) {
  CounterRng rng(7);
  auto x = random_param({2, 3, 4}, rng, -2, 2);
  for (int axis : {0, 1, 2}) {
    expect_grad_ok([&] { return scalarize(ops::softmax(x, axis)); }, {{"x", x}}, 1e-4);
    expect_grad_ok([&] { return scalarize(ops::log_softmax(x, axis)); }, {{"x", x}}, 1e-4);
  }
}

TEST(Sigmoid, AtZero) { EXPECT_EQ(ops::sigmoid(Td::scalar(0.0)).item(), 0.5); }

TEST(Gelu, GradientAtRandomPoints) {
  CounterRng rng(8);
  auto x = random_param({20}, rng, -4, 4);
  expect_grad_ok([&] { return scalarize(ops::gelu(x)); }, {{"x", x}}, 1e-4);
}

TEST(Elementwise, GradientsOfUnaryOps) {
  CounterRng rng(9);
  auto x = random_param({3, 4}, rng, 0.2, 2.0);
  expect_grad_ok([&] { return scalarize(ops::sigmoid(x)); }, {{"x", x}}, 1e-4);
  expect_grad_ok([&] { return scalarize(ops::exp(x)); }, {{"x", x}}, 1e-4);
  expect_grad_ok([&] { return scalarize(ops::log(x)); }, {{"x", x}}, 1e-4);
  expect_grad_ok([&] { return scalarize(ops::scale(x, 2.5)); }, {{"x", x}}, 1e-4);
  expect_grad_ok([&] { return scalarize(ops::add_scalar(x, -0.3)); }, {{"x", x}}, 1e-4);
  expect_grad_ok([&] { return scalarize(ops::relu(ops::add_scalar(x, -1.0))); }, {{"x", x}}, 1e-4);
}

TEST(Elementwise, BinaryOpsWithTrailingBroadcast) {
  CounterRng rng(10);
  auto a = random_param({2, 3, 4}, rng, 0.5, 2.0);
  auto b = random_param({3, 4}, rng, 0.5, 2.0);
  auto c = random_param({4}, rng, 0.5, 2.0);
  auto d = random_param({2, 3, 4}, rng, 0.5, 2.0);
  expect_grad_ok([&] { return scalarize(ops::add(a, b)); }, {{"a", a}, {"b", b}}, 1e-4);
  expect_grad_ok([&] { return scalarize(ops::sub(a, c)); }, {{"a", a}, {"c", c}}, 1e-4);
  expect_grad_ok([&] { return scalarize(ops::mul(a, d)); }, {{"a", a}, {"d", d}}, 1e-4);
  expect_grad_ok([&] { return scalarize(ops::div(a, b)); }, {{"a", a}, {"b", b}}, 1e-4);
}

TEST(Elementwise, UnsupportedBroadcastThrows) {
  EXPECT_THROW(ops::add(Td::zeros({2, 3}), Td::zeros({2})), DimensionError);
  EXPECT_THROW(ops::mul(Td::zeros({3}), Td::zeros({2, 3})), DimensionError);
}

TEST(LayerNorm, NormalizesAndGradients) {
  CounterRng rng(11);
  auto x = random_param({3, 5}, rng, -3, 3);
  auto g = random_param({5}, rng, 0.5, 1.5);
  auto b = random_param({5}, rng);
  const auto y = ops::layer_norm(x, Td::full({5}, 1.0), Td::zeros({5}));
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < 5; ++j) mu += y[r * 5 + j];
    EXPECT_NEAR(mu / 5.0, 0.0, 1e-12);
  }
  expect_grad_ok([&] { return scalarize(ops::layer_norm(x, g, b)); }, {{"x", x}, {"g", g}, {"b", b}}, 1e-4);
}

TEST(MaxPool, ValuesAndGradient) {
  const Td x({1, 1, 4, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  const auto y = ops::max_pool2d(x, 2, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y[0], 6.0);
  EXPECT_EQ(y[3], 16.0);
  CounterRng rng(12);
  auto r = random_param({2, 2, 5, 5}, rng);
  expect_grad_ok([&] { return scalarize(ops::max_pool2d(r, 3, 2)); }, {{"r", r}}, 1e-4);
}

TEST(Shape, ReshapePermuteTransposeConcatSlice) {
  CounterRng rng(13);
  auto x = random_param({2, 3, 4}, rng);
  auto y = random_param({2, 1, 4}, rng);
  EXPECT_THROW(ops::reshape(x, {5, 5}), DimensionError);
  const auto p = ops::permute(x, {2, 0, 1});
  EXPECT_EQ(p.shape(), (Shape{4, 2, 3}));
  EXPECT_EQ(p[1 * 6 + 1 * 3 + 2], x[1 * 12 + 2 * 4 + 1]);
  expect_grad_ok([&] { return scalarize(ops::reshape(x, {6, 4})); }, {{"x", x}}, 1e-4);
  expect_grad_ok([&] { return scalarize(ops::permute(x, {2, 0, 1})); }, {{"x", x}}, 1e-4);
  expect_grad_ok([&] { return scalarize(ops::transpose(x)); }, {{"x", x}}, 1e-4);
  expect_grad_ok([&] { return scalarize(ops::concat<double>({y, x, y}, 1)); }, {{"x", x}, {"y", y}}, 1e-4);
  expect_grad_ok([&] { return scalarize(ops::slice(x, 2, 1, 2)); }, {{"x", x}}, 1e-4);
  EXPECT_THROW(ops::slice(x, 1, 2, 2), DimensionError);
  EXPECT_THROW(ops::concat<double>({x, Td::zeros({3, 3, 4})}, 1), DimensionError);
}

TEST(Reductions, SumAndMeanGradients) {
  CounterRng rng(14);
  auto x = random_param({2, 3, 4}, rng);
  expect_grad_ok([&] { return scalarize(ops::reduce_sum(x, 1)); }, {{"x", x}}, 1e-4);
  expect_grad_ok([&] { return scalarize(ops::mean(x, 0)); }, {{"x", x}}, 1e-4);
  expect_grad_ok([&] { return ops::mean(x); }, {{"x", x}}, 1e-4);
}

TEST(Gather, EmbeddingLookupPickRowNorm) {
  CounterRng rng(15);
  auto table = random_param({5, 3}, rng);
  const std::vector<std::size_t> ids{4, 0, 4, 2};
  expect_grad_ok([&] { return scalarize(ops::embedding_lookup<double>(table, ids)); }, {{"table", table}}, 1e-4);
  auto logits = random_param({4, 5}, rng);
  expect_grad_ok([&] { return scalarize(ops::pick<double>(logits, ids)); }, {{"logits", logits}}, 1e-4);
  EXPECT_THROW(ops::embedding_lookup<double>(table, std::vector<std::size_t>{5}), DimensionError);
  EXPECT_THROW(ops::pick<double>(logits, std::vector<std::size_t>{0, 1, 2, 5}), LabelError);
  for (double p : {1.5, 2.0, 3.0}) {
    expect_grad_ok([&] { return scalarize(ops::row_norm(logits, p)); }, {{"logits", logits}}, 1e-4);
  }
  const auto n = ops::row_norm(Td({1, 2}, {3.0, 4.0}), 2.0);
  EXPECT_NEAR(n[0], 5.0, 1e-12);
}

TEST(Gather, RowNormAtZeroHasZeroGradient) {
  auto x = Td::parameter({1, 3}, {0.0, 0.0, 0.0});
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  backward(ops::reduce_sum(ops::row_norm(x, 2.0)));
  for (const double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(GatedMix, GradientAndExtremes) {
  CounterRng rng(16);
  auto content = random_param({2, 3, 4, 4}, rng, 0, 1);
  auto positional = random_param({3, 4, 4}, rng, 0, 1);
  auto gate = random_param({3}, rng, -2, 2);
  expect_grad_ok([&] { return scalarize(ops::gated_mix(content, positional, gate)); },
                 {{"content", content}, {"positional", positional}, {"gate", gate}}, 1e-4);
  const auto zero = ops::gated_mix<double>(content, positional, gate, 0.0);
  for (std::size_t i = 0; i < zero.numel(); ++i) EXPECT_EQ(zero[i], content[i]);
  const auto one = ops::gated_mix<double>(content, positional, gate, 1.0);
  for (std::size_t i = 0; i < one.numel(); ++i) EXPECT_EQ(one[i], positional[i % 48]);
}

TEST(Dropout, IdentityWhenEvaluatingAndScaledWhenTraining) {
  CounterRng rng(17);
  const auto x = Td::full({1000}, 1.0);
  const auto eval = ops::dropout(x, 0.5, rng, false);
  EXPECT_TRUE(eval.same_storage(x));
  const auto train = ops::dropout(x, 0.25, rng, true);
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    if (train[i] == 0.0) {
      ++dropped;
    } else {
      EXPECT_NEAR(train[i], 1.0 / 0.75, 1e-12);
    }
  }
  EXPECT_GT(dropped, 180u);
  EXPECT_LT(dropped, 320u);
}

TEST(Backward, SumGivesOnes) {
  auto x = Td::parameter({2, 3}, {1, 2, 3, 4, 5, 6});
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  backward(ops::reduce_sum(x));
  for (const double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwiceInput) {
  auto x = Td::parameter({4}, {1.0, -2.0, 0.5, 3.0});
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  backward(ops::reduce_sum(ops::mul(x, x)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(x.grad()[i], 2.0 * x[i]);
}

TEST(Backward, NonScalarLossThrows) {
  auto x = Td::parameter({2}, {1.0, 2.0});
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  EXPECT_THROW(backward(ops::scale(x, 2.0)), ContractError);
}

TEST(Backward, NoActiveTapeThrows) {
  auto x = Td::parameter({1}, {1.0});
  EXPECT_THROW(backward(x), ContractError);
}

TEST(Backward, UnreachableLeafHasNoGradient) {
  auto x = Td::parameter({2}, {1.0, 2.0});
  auto unused = Td::parameter({2}, {3.0, 4.0});
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  const auto side = ops::mul(unused, unused);
  backward(ops::reduce_sum(x));
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(unused.has_grad());
  EXPECT_EQ(side.numel(), 2u);
}

TEST(Backward, DeterministicBitwise) {
  CounterRng rng(18);
  auto w = random_param({6, 8}, rng);
  auto x = random_param({4, 6}, rng);
  auto run = [&] {
    w.zero_grad();
    GradTape<double> tape;
    TapeScope<double> scope(tape);
    backward(scalarize(ops::softmax(ops::gelu(ops::matmul(x, w)))));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Numeric, NonFiniteForwardIsAnError) {
  EXPECT_THROW(ops::log(Td({2}, {1.0, 0.0})), NumericError);
  EXPECT_THROW(ops::div(Td({1}, {1.0}), Td({1}, {0.0})), NumericError);
}

TEST(SinglePrecision, GradientsWithinLooseTolerance) {
  CounterRng rng(19);
  std::vector<float> av(12), bv(12);
  for (auto& v : av) v = static_cast<float>(rng.uniform(-1, 1));
  for (auto& v : bv) v = static_cast<float>(rng.uniform(-1, 1));
  auto a = Tensor<float>::parameter({3, 4}, av);
  auto b = Tensor<float>::parameter({4, 3}, bv);
  GradCheckOptions opts;
  opts.step = 1e-2;
  opts.floor = 1e-3;
  const auto report = check_gradients<float>(
      [&] { return ops::reduce_sum(ops::gelu(ops::matmul(a, b))); }, {{"a", a}, {"b", b}}, opts);
  EXPECT_LT(report.max_rel_err(), 1e-2);
}
