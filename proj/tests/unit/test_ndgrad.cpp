#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "kadapter/gradcheck.hpp"
#include "kadapter/ndgrad.hpp"

using namespace kadapter;
using ndgrad::Tensor;
using gradcheck::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Matmul, IdentityAndProjector) {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(values(ndgrad::matmul(eye, m)), (std::vector<double>{1, 2, 3, 4}));
  Tensor p = Tensor::from({2, 2}, {1, 0, 0, 0});
  Tensor n = Tensor::from({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(values(ndgrad::matmul(p, n)), (std::vector<double>{5, 6, 0, 0}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    ndgrad::matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, SumGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  auto r = gradcheck::check([&] { return ndgrad::sum(ndgrad::matmul(a, b)); }, {a, b});
  EXPECT_LE(r.max_rel, 1e-6) << r.worst;
}

TEST(Softmax, SymmetricAndStable) {
  EXPECT_EQ(values(ndgrad::softmax_lastdim(Tensor::from({2}, {0, 0}))), (std::vector<double>{0.5, 0.5}));
  auto s = values(ndgrad::softmax_lastdim(Tensor::from({2}, {1000, 0})));
  EXPECT_DOUBLE_EQ(s[0], 1.0);
  EXPECT_LT(s[1], 1e-300);
  EXPECT_TRUE(std::isfinite(s[1]));
}

TEST(Softmax, RowSumsAndJacobian) {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({5}, rng);
  double total = 0;
  const Tensor s = ndgrad::softmax_lastdim(x);
  for (double v : s.data()) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
  // Each output coordinate separately covers the full Jacobian.
  for (std::size_t j = 0; j < 5; ++j) {
    std::vector<double> w(5, 0.0);
    w[j] = 1.0;
    auto r = gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::softmax_lastdim(x), w); }, {x});
    EXPECT_LE(r.max_rel, 1e-6) << j;
  }
}

TEST(Softmax, NonFiniteInputRejected) {
  Tensor x = Tensor::from({2}, {std::numeric_limits<double>::quiet_NaN(), 0});
  EXPECT_THROW(ndgrad::softmax_lastdim(x), NumericInputError);
}

TEST(LayerNorm, ConstantRowMapsToBias) {
  Tensor g = Tensor::filled({4}, 1.0), b = Tensor::zeros({4});
  EXPECT_EQ(values(ndgrad::layer_norm(Tensor::from({4}, {3, 3, 3, 3}), g, b)),
            (std::vector<double>{0, 0, 0, 0}));
}

TEST(LayerNorm, TwoElementRow) {
  Tensor g = Tensor::filled({2}, 1.0), b = Tensor::zeros({2});
  auto y = values(ndgrad::layer_norm(Tensor::from({2}, {1, -1}), g, b));
  EXPECT_NEAR(y[0], 1.0, 1e-5);
  EXPECT_NEAR(y[1], -1.0, 1e-5);
  EXPECT_LT(y[0], 1.0);
}

TEST(LayerNorm, GradientAndMean) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, 6}, rng);
  Tensor g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  auto w = gradcheck::random_weights(12, rng);
  auto r = gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::layer_norm(x, g, b), w); }, {x, g, b});
  EXPECT_LE(r.max_rel, 1e-5) << r.worst;
  Tensor one = Tensor::filled({6}, 1.0), zero = Tensor::zeros({6});
  auto y = values(ndgrad::layer_norm(x, one, zero));
  for (std::size_t row = 0; row < 2; ++row) {
    double mu = 0;
    for (std::size_t j = 0; j < 6; ++j) mu += y[row * 6 + j] / 6.0;
    EXPECT_LE(std::abs(mu), 1e-10);
  }
}

TEST(Concat, ValuesShapesAndGradient) {
  EXPECT_EQ(values(ndgrad::concat_lastdim({Tensor::from({2}, {1, 2}), Tensor::from({1}, {3})})),
            (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(ndgrad::concat_lastdim({Tensor::zeros({4, 8}), Tensor::zeros({4, 8})}).shape(), (ndgrad::Shape{4, 16}));
  Tensor a = Tensor::zeros({2, 3}, true), b = Tensor::zeros({2, 1}, true);
  ndgrad::backward(ndgrad::sum(ndgrad::concat_lastdim({a, b})));
  for (double g : a.grad()) EXPECT_EQ(g, 1.0);
  for (double g : b.grad()) EXPECT_EQ(g, 1.0);
  EXPECT_THROW(ndgrad::concat_lastdim({}), ArgumentError);
  EXPECT_THROW(ndgrad::concat_lastdim({Tensor::zeros({2, 3}), Tensor::zeros({3, 3})}), DimensionError);
}

TEST(CrossEntropy, HandValues) {
  const std::vector<int> zero{0};
  EXPECT_NEAR(ndgrad::cross_entropy(Tensor::from({1, 2}, {0, 0}), zero).item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(ndgrad::cross_entropy(Tensor::from({1, 2}, {10, -10}), zero).item(), 0.0, 1e-8);
}

TEST(CrossEntropy, GradientAndIgnore) {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({3, 4}, rng);
  const std::vector<int> labels{1, 3, 0};
  auto r = gradcheck::check([&] { return ndgrad::cross_entropy(x, labels); }, {x});
  EXPECT_LE(r.max_rel, 1e-6);
  const std::vector<int> ignored{-100, -100, -100};
  EXPECT_THROW(ndgrad::cross_entropy(x, ignored), UndefinedLossError);
  // Ignored rows contribute nothing: loss equals the loss over the kept row.
  const std::vector<int> one_kept{-100, 2, -100};
  Tensor row = Tensor::from({1, 4}, {x.data()[4], x.data()[5], x.data()[6], x.data()[7]});
  const std::vector<int> two{2};
  EXPECT_DOUBLE_EQ(ndgrad::cross_entropy(x, one_kept).item(), ndgrad::cross_entropy(row, two).item());
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  ndgrad::backward(ndgrad::sum(x));
  EXPECT_EQ(values(Tensor::from({3}, {x.grad().begin(), x.grad().end()})), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, FrozenLeavesGetNoGradient) {
  Tensor x = Tensor::from({3}, {1, 2, 3});
  ndgrad::backward(ndgrad::sum(ndgrad::gelu(x)));
  EXPECT_FALSE(x.has_grad());
  Tensor w = Tensor::from({3}, {1, 1, 1}, true);
  Tensor frozen = Tensor::from({3}, {4, 5, 6});
  ndgrad::backward(ndgrad::sum(ndgrad::add(w, frozen)));
  EXPECT_TRUE(w.has_grad());
  EXPECT_FALSE(frozen.has_grad());
}

TEST(Backward, NonScalarRejected) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(ndgrad::backward(ndgrad::gelu(x)), ArgumentError);
}

TEST(Determinism, ReplayIsBitIdentical) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({3, 4}, rng), w = random_tensor({4, 4}, rng);
  Tensor g = Tensor::filled({4}, 1.0), b = Tensor::zeros({4});
  auto run = [&] { return values(ndgrad::softmax_lastdim(ndgrad::layer_norm(ndgrad::linear(x, w), g, b))); };
  EXPECT_EQ(run(), run());
}

// Finite-difference sweep over every differentiable op, several seeds.
class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, MatchFiniteDifferences) {
  std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()));
  auto expect_ok = [](const gradcheck::Result& r, const char* op) { EXPECT_LE(r.max_rel, 1e-4) << op << " " << r.worst; };
  auto ws = [&](const Tensor& t) { return gradcheck::random_weights(t.size(), rng); };

  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng), bias = random_tensor({2}, rng);
  Tensor x3 = random_tensor({2, 3, 4}, rng);
  {
    auto w = ws(ndgrad::linear(x3, b, bias));
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::linear(x3, b, bias), w); }, {x3, b, bias}),
              "linear");
  }
  {
    Tensor p = random_tensor({2, 3, 4}, rng), q = random_tensor({2, 4, 5}, rng);
    auto w = gradcheck::random_weights(2 * 3 * 5, rng);
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::bmm(p, q), w); }, {p, q}), "bmm");
    Tensor k = random_tensor({2, 5, 4}, rng);
    auto w2 = gradcheck::random_weights(2 * 3 * 5, rng);
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::bmm_nt(p, k), w2); }, {p, k}), "bmm_nt");
  }
  {
    Tensor c = random_tensor({3, 4}, rng);
    auto w = ws(a);
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::add(a, c), w); }, {a, c}), "add");
    std::vector<double> k(a.size(), 0.25);
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::add_constant(a, k), w); }, {a}),
              "add_constant");
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::scale(a, -1.7), w); }, {a}), "scale");
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::gelu(a), w); }, {a}), "gelu");
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::softmax_lastdim(a), w); }, {a}),
              "softmax");
    expect_ok(gradcheck::check([&] { return ndgrad::mean(a); }, {a}), "mean");
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::reshape(a, {4, 3}), w); }, {a}),
              "reshape");
  }
  {
    Tensor g = random_tensor({4}, rng), be = random_tensor({4}, rng);
    auto w = ws(x3);
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::layer_norm(x3, g, be), w); },
                               {x3, g, be}),
              "layer_norm");
    Tensor y3 = random_tensor({2, 3, 2}, rng);
    auto w2 = gradcheck::random_weights(2 * 3 * 6, rng);
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::concat_lastdim({x3, y3}), w2); },
                               {x3, y3}),
              "concat");
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::split_heads(x3, 2), w); }, {x3}),
              "split_heads");
    Tensor h = random_tensor({4, 3, 2}, rng);
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::merge_heads(h, 2), w); }, {h}),
              "merge_heads");
    const std::vector<std::pair<std::size_t, std::size_t>> spans{{0, 2}, {1, 3}};
    auto w3 = gradcheck::random_weights(8, rng);
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::span_mean(x3, spans), w3); }, {x3}),
              "span_mean");
  }
  {
    const std::vector<int> labels{0, 3, -100};
    expect_ok(gradcheck::check([&] { return ndgrad::cross_entropy(a, labels); }, {a}), "cross_entropy");
    std::vector<double> targets(a.size());
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = (i % 3 == 0) ? 1.0 : 0.0;
    expect_ok(gradcheck::check([&] { return ndgrad::bce_with_logits(a, targets); }, {a}), "bce_with_logits");
  }
  {
    Tensor table = random_tensor({6, 3}, rng);
    const std::vector<int> ids{1, 4, 4, 0};
    auto w = gradcheck::random_weights(12, rng);
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::embedding(table, ids, {2, 2}), w); },
                               {table}),
              "embedding");
    const std::vector<std::size_t> rows{2, 0, 2};
    auto w2 = gradcheck::random_weights(9, rng);
    expect_ok(gradcheck::check([&] { return gradcheck::weighted_sum(ndgrad::gather_rows(table, rows), w2); },
                               {table}),
              "gather_rows");
  }
  expect_ok(gradcheck::check([&] { return ndgrad::sum(ndgrad::matmul(a, b)); }, {a, b}), "matmul");
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradients, ::testing::Range(0, 20));
