#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "gradient_cases.hpp"
#include "support.hpp"
#include "taxofuse/ndiff/optim.hpp"
#include "taxofuse/ndiff/tape.hpp"

using namespace taxofuse;
using namespace testing_support;
using nd::Parameter;
using nd::ParamKind;

class GradientCheck : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
  auto c = gradient_cases().at(GetParam());
  EXPECT_LT(max_relative_error(c.inputs, c.f, 1e-5), 1e-4) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, GradientCheck, ::testing::Range<std::size_t>(0, gradient_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return gradient_cases().at(info.param).name;
                         });

TEST(GradientCheck, MarginalisationAgreesWithProbabilityDomainLoss) {
  EXPECT_LT(marginalisation_cross_check(), 1e-4);
}

TEST(Gemm, MatchesNaiveProducts) {
  std::mt19937_64 rng(3);
  const std::size_t m = 4, n = 5, k = 3;
  Tensor a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, n}), bt = random_tensor(rng, {n, k}),
         at = random_tensor(rng, {k, m});
  std::vector<double> c1(m * n, 1.0), c2(m * n, 1.0), c3(m * n, 1.0);
  nd::blas::gemm_nn(m, n, k, a.data(), b.data(), c1.data());
  nd::blas::gemm_nt(m, n, k, a.data(), bt.data(), c2.data());
  nd::blas::gemm_tn(m, n, k, at.data(), b.data(), c3.data());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double e1 = 1.0, e2 = 1.0, e3 = 1.0;
      for (std::size_t p = 0; p < k; ++p) {
        e1 += a[i * k + p] * b[p * n + j];
        e2 += a[i * k + p] * bt[j * k + p];
        e3 += at[p * m + i] * b[p * n + j];
      }
      EXPECT_NEAR(c1[i * n + j], e1, 1e-12);
      EXPECT_NEAR(c2[i * n + j], e2, 1e-12);
      EXPECT_NEAR(c3[i * n + j], e3, 1e-12);
    }
}

TEST(Tape, ConvMatchesDirectSum) {
  std::mt19937_64 rng(8);
  Tensor x = random_tensor(rng, {1, 2, 4, 4}), w = random_tensor(rng, {1, 2, 3, 3}), b = random_tensor(rng, {1});
  Tape t;
  const auto& y = t.value(t.conv2d(t.constant(x), t.constant(w), t.constant(b), 1, 1));
  ASSERT_EQ(y.shape(), (nd::Shape{1, 1, 4, 4}));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double e = b[0];
      for (int c = 0; c < 2; ++c)
        for (int di = 0; di < 3; ++di)
          for (int dj = 0; dj < 3; ++dj) {
            int yi = i + di - 1, xj = j + dj - 1;
            if (yi < 0 || yi >= 4 || xj < 0 || xj >= 4) continue;
            e += x[(c * 4 + yi) * 4 + xj] * w[(c * 3 + di) * 3 + dj];
          }
      EXPECT_NEAR(y[i * 4 + j], e, 1e-12);
    }
}

TEST(Tape, ShapeMismatchNamesBothShapes) {
  Tape t;
  Var x = t.constant(Tensor({2, 3}));
  Var w = t.constant(Tensor({4, 5}));
  Var b = t.constant(Tensor({4}));
  try {
    t.dense(x, w, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
  }
}

TEST(Tape, BackwardNeedsScalar) {
  Tape t;
  Var x = t.constant(Tensor({2, 2}, 1.0));
  EXPECT_THROW(t.backward(x), ShapeError);
}

TEST(Tape, DropoutIsIdentityOutsideTraining) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor(rng, {3, 4});
  Tape t;
  nd::Rng r(5);
  EXPECT_EQ(t.value(t.dropout(t.constant(x), 0.5, false, r)), x);
}

TEST(Tape, DropoutKeepsExpectation) {
  Tape t;
  nd::Rng r(5);
  const auto& y = t.value(t.dropout(t.constant(Tensor({100, 100}, 1.0)), 0.5, true, r));
  double mean = 0;
  for (double v : y.values()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    mean += v;
  }
  EXPECT_NEAR(mean / y.size(), 1.0, 0.05);
}

TEST(Tape, NllClampsAndStopsGradient) {
  Tape t;
  Tensor logp({2, 2}, std::vector<double>{std::log(0.5), std::log(0.5), -1e6, 0.0});
  Var x = t.constant(logp);
  std::vector<std::size_t> labels{0, 0};
  Var loss = t.nll(x, labels);
  EXPECT_EQ(t.clamp_count(), 1u);
  EXPECT_NEAR(t.value(loss)[0], (std::log(2.0) - std::log(1e-12)) / 2, 1e-9);
  t.backward(loss);
  EXPECT_DOUBLE_EQ(t.grad(x)[0], -0.5);
  EXPECT_DOUBLE_EQ(t.grad(x)[2], 0.0);
}

TEST(Tape, GroupLogSumExpIsLogOfMarginal) {
  Tape t;
  std::vector<double> p{0.1, 0.2, 0.3, 0.4};
  Tensor logp({1, 4});
  for (int i = 0; i < 4; ++i) logp[i] = std::log(p[i]);
  const auto& y = t.value(t.group_logsumexp(t.constant(logp), {1, 0, 1, 0}, 2));
  EXPECT_NEAR(std::exp(y[0]), 0.6, 1e-12);
  EXPECT_NEAR(std::exp(y[1]), 0.4, 1e-12);
}

TEST(Tape, ReadOnlyParameterGradientsStayOnTape) {
  Parameter p("w", Tensor({1, 2}, std::vector<double>{1.0, 2.0}), ParamKind::dense);
  const Parameter& cp = p;
  Tape t;
  Var w = t.param(cp);
  Var x = t.constant(Tensor({1, 2}, std::vector<double>{3.0, 4.0}));
  Var y = t.dense(x, w, t.constant(Tensor({1})));
  t.backward(y);
  EXPECT_EQ(t.gradient_of(cp), Tensor({1, 2}, std::vector<double>({3.0, 4.0})));
  EXPECT_EQ(p.grad, Tensor({1, 2}));
}

TEST(Optimizer, SgdStepUsesGroupRateAndClearsGradients) {
  Parameter conv("c", Tensor({2}, std::vector<double>{1.0, 1.0}), ParamKind::conv);
  Parameter fc("f", Tensor({1}, std::vector<double>{1.0}), ParamKind::dense);
  conv.grad = Tensor({2}, std::vector<double>{1.0, -2.0});
  fc.grad = Tensor({1}, std::vector<double>{4.0});
  std::vector<nd::ParameterGroup> groups{{"conv", {&conv}, 0.1}, {"fc", {&fc}, 0.5}};
  nd::sgd_step(groups);
  EXPECT_DOUBLE_EQ(conv.value[0], 0.9);
  EXPECT_DOUBLE_EQ(conv.value[1], 1.2);
  EXPECT_DOUBLE_EQ(fc.value[0], -1.0);
  EXPECT_EQ(conv.grad, Tensor({2}));
}

TEST(Optimizer, NonFiniteGradientIsDivergence) {
  Parameter p("p", Tensor({1}, 1.0), ParamKind::dense);
  p.grad[0] = std::numeric_limits<double>::quiet_NaN();
  std::vector<nd::ParameterGroup> groups{{"fc", {&p}, 0.1}};
  EXPECT_THROW(nd::sgd_step(groups), DivergenceError);
  EXPECT_DOUBLE_EQ(p.value[0], 1.0);
}

TEST(Optimizer, NonPositiveRateRejected) {
  Parameter p("p", Tensor({1}, 1.0), ParamKind::dense);
  std::vector<nd::ParameterGroup> groups{{"fc", {&p}, 0.0}};
  EXPECT_THROW(nd::sgd_step(groups), ConfigError);
}

TEST(Optimizer, PlateauHalvesAfterPatienceEpochs) {
  Parameter p("p", Tensor({1}), ParamKind::dense);
  std::vector<nd::ParameterGroup> groups{{"fc", {&p}, 1.0}};
  nd::PlateauScheduler s(2, 0.5, 1e-7);
  EXPECT_FALSE(s.step(1.0, groups));  // epoch 1 sets the best value
  EXPECT_FALSE(s.step(1.0, groups));  // epoch 2: one bad epoch
  EXPECT_TRUE(s.step(1.0, groups));   // epoch 3: patience exhausted
  EXPECT_DOUBLE_EQ(groups[0].lr, 0.5);
}

TEST(Optimizer, PlateauRespectsFloorAndImprovement) {
  Parameter p("p", Tensor({1}), ParamKind::dense);
  std::vector<nd::ParameterGroup> groups{{"fc", {&p}, 1e-7}};
  nd::PlateauScheduler s(1, 0.5, 1e-7);
  s.step(1.0, groups);
  s.step(1.0, groups);
  s.step(1.0, groups);
  EXPECT_DOUBLE_EQ(groups[0].lr, 1e-7);

  std::vector<nd::ParameterGroup> g2{{"fc", {&p}, 1.0}};
  nd::PlateauScheduler s2(1, 0.5, 1e-7);
  for (double m : {5.0, 4.0, 3.0, 2.0}) EXPECT_FALSE(s2.step(m, g2));
  EXPECT_DOUBLE_EQ(g2[0].lr, 1.0);
  EXPECT_THROW(s2.step(std::numeric_limits<double>::infinity(), g2), DivergenceError);
}
