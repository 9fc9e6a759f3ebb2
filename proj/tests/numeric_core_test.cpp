#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "srki/autograd.hpp"
#include "srki/grad_check.hpp"
#include "srki/rng.hpp"
#include "srki/tensor.hpp"

namespace srki {
namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double sd = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.data()) v = sd * rng.normal();
  return t;
}

// Sum of squared entries, recorded as a single tape op.
Var sum_squares(GradTape& t, Var a) {
  double s = 0.0;
  for (double v : t.value(a).data()) s += v * v;
  return t.push(Tensor({1}, s), t.requires_grad(a), [a](GradTape& tp, const Tensor& g) {
    const Tensor& x = tp.value(a);
    Tensor& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < x.size(); ++i) ga.data()[i] += 2.0 * x.data()[i] * g.data()[0];
  });
}

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_NO_THROW(Tensor({2, 3}, std::vector<double>(6)));
}

TEST(Matmul, IdentityTimesBIsB) {
  const Tensor b = Tensor::from_rows({{1, -2, 3}, {4, 5, -6}});
  EXPECT_EQ(matmul(Tensor::identity(2), b), b);
}

TEST(Matmul, HandOracle) {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor b = Tensor::from_rows({{1}, {1}});
  EXPECT_EQ(matmul(a, b), Tensor::from_rows({{3}, {7}}));
}

TEST(Matmul, ZeroAnnihilates) {
  Rng rng(3);
  const Tensor b = random_matrix(rng, 4, 5);
  const Tensor z = matmul(Tensor::matrix(3, 4), b);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::matrix(2, 3), Tensor::matrix(2, 3)), DimensionError);
}

TEST(Matmul, RightIdentityExactOnIntegers) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng.below(6), c = 1 + rng.below(6);
    Tensor a = Tensor::matrix(r, c);
    for (double& v : a.data()) v = static_cast<double>(static_cast<int>(rng.below(201)) - 100);
    EXPECT_EQ(matmul(a, Tensor::identity(c)), a);
  }
}

TEST(Matmul, TransposedVariantsAgree) {
  Rng rng(5);
  const Tensor a = random_matrix(rng, 3, 4), b = random_matrix(rng, 5, 4), c = random_matrix(rng, 3, 2);
  Tensor bt = Tensor::matrix(4, 5), at = Tensor::matrix(4, 3);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) bt(j, i) = b(i, j);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) at(j, i) = a(i, j);
  const Tensor x = matmul_bt(a, b), y = matmul(a, bt);
  const Tensor u = matmul_at(a, c), w = matmul(at, c);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x.data()[i], y.data()[i], 1e-12);
  for (std::size_t i = 0; i < u.size(); ++i) EXPECT_NEAR(u.data()[i], w.data()[i], 1e-12);
}

TEST(MaskedSoftmax, SymmetricRow) {
  const Tensor p = masked_softmax_rows(Tensor::from_rows({{0, 0}}), Mask{1, 1});
  EXPECT_DOUBLE_EQ(p(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(p(0, 1), 0.5);
}

TEST(MaskedSoftmax, MaskedEntryIsExactlyZero) {
  const Tensor p = masked_softmax_rows(Tensor::from_rows({{3.5, 100}}), Mask{1, 0});
  EXPECT_EQ(p(0, 0), 1.0);
  EXPECT_EQ(p(0, 1), 0.0);
}

TEST(MaskedSoftmax, ScalarOracle) {
  const Tensor p = masked_softmax_rows(Tensor::from_rows({{1, 2, 3}}), Mask{1, 1, 1});
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(p(0, 0), std::exp(1.0) / z, 1e-12);
  EXPECT_NEAR(p(0, 1), std::exp(2.0) / z, 1e-12);
  EXPECT_NEAR(p(0, 2), std::exp(3.0) / z, 1e-12);
}

TEST(MaskedSoftmax, FullyMaskedRowThrows) {
  EXPECT_THROW(masked_softmax_rows(Tensor::from_rows({{1, 2}, {3, 4}}), Mask{1, 1, 0, 0}),
               DegenerateError);
}

TEST(MaskedSoftmax, RowsSumToOneProperty) {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t r = 1 + rng.below(8), c = 1 + rng.below(40);
    const Tensor x = random_matrix(rng, r, c, 1.0 + 20.0 * rng.uniform());
    Mask m(r * c);
    for (auto& b : m) b = rng.uniform() < 0.7;
    for (std::size_t i = 0; i < r; ++i) m[i * c + rng.below(c)] = 1;
    const Tensor p = masked_softmax_rows(x, m);
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        if (!m[i * c + j]) {
          EXPECT_EQ(p(i, j), 0.0);
        }
        s += p(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  const Tensor logits = Tensor::matrix(3, 4, 0.25);
  const std::vector<std::size_t> targets{0, 3, 1};
  EXPECT_NEAR(cross_entropy(logits, targets, {true, true, true}), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, MarginOracle) {
  // Target logit 5, three others at 0: loss = log(e^5 + 3) - 5.
  const Tensor logits = Tensor::from_rows({{0, 5, 0, 0}});
  const std::vector<std::size_t> targets{1};
  EXPECT_NEAR(cross_entropy(logits, targets, {true}), std::log(std::exp(5.0) + 3.0) - 5.0, 1e-12);
}

TEST(CrossEntropy, DuplicatedRowsDoNotChangeMean) {
  Rng rng(9);
  const Tensor a = random_matrix(rng, 1, 6);
  Tensor two = a;
  two.append_rows(a);
  const std::vector<std::size_t> t1{2}, t2{2, 2};
  EXPECT_NEAR(cross_entropy(a, t1, {true}), cross_entropy(two, t2, {true, true}), 1e-15);
}

TEST(CrossEntropy, MaskedRowsIgnored) {
  const Tensor logits = Tensor::from_rows({{0, 0}, {100, -100}});
  const std::vector<std::size_t> targets{0, 1};
  EXPECT_NEAR(cross_entropy(logits, targets, {true, false}), std::log(2.0), 1e-12);
}

TEST(CrossEntropy, AllMaskedThrows) {
  const std::vector<std::size_t> targets{0, 1};
  EXPECT_THROW(cross_entropy(Tensor::matrix(2, 3), targets, {false, false}), DegenerateError);
}

TEST(GradTape, OnlyRegisteredParametersReceiveGradients) {
  Rng rng(1);
  Tensor w = random_matrix(rng, 3, 3);
  GradTape t;
  const Var x = t.constant(random_matrix(rng, 2, 3));
  const Var p = t.parameter(w);
  const Var y = ag::matmul(t, x, p);
  const Var loss = sum_squares(t, y);
  t.backward(loss);
  const auto grads = t.parameter_grads();
  ASSERT_EQ(grads.size(), 1u);
  EXPECT_EQ(grads[0].param, &w);
  EXPECT_FALSE(t.requires_grad(x));
}

TEST(GradCheck, QuadraticLoss) {
  Rng rng(42);
  Tensor w = random_matrix(rng, 3, 4);
  auto build = [&](GradTape& t) { return sum_squares(t, t.parameter(w)); };
  Tensor* params[] = {&w};
  EXPECT_LE(grad_check(build, params, 1e-5), 1e-8);

  GradTape t;
  t.backward(build(t));
  const Tensor g = t.parameter_grads()[0].grad;
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(g.data()[i], 2.0 * w.data()[i], 1e-14);
}

TEST(GradCheck, ConstantLossHasZeroGradient) {
  Rng rng(43);
  Tensor w = random_matrix(rng, 2, 2);
  auto build = [&](GradTape& t) {
    const Var p = t.parameter(w);
    return ag::scale(t, sum_squares(t, p), 0.0);
  };
  GradTape t;
  t.backward(build(t));
  const auto grads = t.parameter_grads();
  for (double v : grads[0].grad.data()) EXPECT_EQ(v, 0.0);
  Tensor* params[] = {&w};
  EXPECT_EQ(grad_check(build, params, 1e-4), 0.0);
}

TEST(GradCheck, ComposedOpsMatchFiniteDifferences) {
  Rng rng(44);
  Tensor w1 = random_matrix(rng, 5, 6, 0.5), w2 = random_matrix(rng, 6, 4, 0.5);
  const Tensor x = random_matrix(rng, 3, 5);
  const std::vector<std::size_t> targets{0, 2, 3};
  auto build = [&](GradTape& t) {
    const Var h = ag::gelu(t, ag::matmul(t, t.constant(x), t.parameter(w1)));
    const Var logits = ag::matmul(t, ag::rms_norm(t, h), t.parameter(w2));
    return ag::cross_entropy(t, logits, targets, {true, false, true});
  };
  Tensor* params[] = {&w1, &w2};
  EXPECT_LE(grad_check(build, params, 1e-5), 1e-6);
}

TEST(GradCheck, EpsilonOutOfRangeRejected) {
  Tensor w = Tensor::matrix(1, 1, 1.0);
  auto build = [&](GradTape& t) { return sum_squares(t, t.parameter(w)); };
  Tensor* params[] = {&w};
  EXPECT_THROW(grad_check(build, params, 1e-2), ConfigError);
  EXPECT_THROW(grad_check(build, params, 1e-8), ConfigError);
}

TEST(GradCheck, NonFiniteLossRejected) {
  Tensor w = Tensor::matrix(1, 1, 1.0);
  auto build = [&](GradTape& t) {
    const Var p = t.parameter(w);
    return t.push(Tensor({1}, std::numeric_limits<double>::infinity()), true,
                  [p](GradTape&, const Tensor&) {});
  };
  Tensor* params[] = {&w};
  EXPECT_THROW(grad_check(build, params, 1e-4), NumericError);
}

}  // namespace
}  // namespace srki
