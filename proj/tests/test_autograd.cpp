#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "seqtr/gradcheck.hpp"
#include "seqtr/gradcheck_suite.hpp"

using namespace seqtr;

TEST(Gradcheck, QuadraticMatchesClosedForm) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = Tensor::randn({6, 1}, rng);
    const double err = central_diff_gradcheck(
        [](Tape&, Var v) { return ad::sum(ad::matmul(ad::transpose(v), v)); }, x);
    EXPECT_LT(err, 1e-8);

    Tape t;
    Var v = t.param(x);
    t.backward(ad::sum(ad::matmul(ad::transpose(v), v)));
    const Tensor g = t.grad(v);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(g[i], 2.0 * x[i], 1e-14);
  }
}

TEST(Gradcheck, SumOfWeightedSoftmax) {
  std::mt19937_64 rng(2);
  const Tensor w = Tensor::randn({3, 5}, rng);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = Tensor::randn({3, 5}, rng);
    const double err = central_diff_gradcheck(
        [&](Tape& t, Var v) { return ad::sum(ad::mul(ad::softmax_rows(v), t.constant(w))); }, x);
    EXPECT_LT(err, 1e-6);
  }
}

TEST(Gradcheck, PlainSumOfSoftmaxHasZeroGradient) {
  std::mt19937_64 rng(3);
  const Tensor x = Tensor::randn({2, 4}, rng);
  Tape t;
  Var v = t.param(x);
  t.backward(ad::sum(ad::softmax_rows(v)));
  const Tensor g = t.grad(v);
  for (double gi : g.data()) EXPECT_NEAR(gi, 0.0, 1e-15);
}

TEST(Gradcheck, NonFiniteValueIsNumericError) {
  const Tensor x = Tensor::vector({std::numeric_limits<double>::infinity()}).reshaped({1, 1});
  EXPECT_THROW(central_diff_gradcheck([](Tape&, Var v) { return ad::sum(v); }, x), NumericError);
}

TEST(Gradcheck, DetectsWrongGradient) {
  std::mt19937_64 rng(4);
  const Tensor x = Tensor::randn({3, 3}, rng);
  const double err = central_diff_gradcheck(
      [](Tape&, Var v) { return ad::corrupt_gradient(ad::sum(ad::mul(v, v)), 1.5); }, x);
  EXPECT_GT(err, 0.1);
}

TEST(Gradcheck, DirectionalFormAgreesOnSmoothFunction) {
  std::mt19937_64 rng(5);
  Tensor a = Tensor::randn({4, 3}, rng), b = Tensor::randn({3, 2}, rng);
  auto build = [&](Tape& t) {
    Var m = ad::matmul(t.param(a), t.param(b));
    return ad::sum(ad::mul(ad::softmax_rows(m), m));
  };
  const Tensor a0 = a, b0 = b;
  EXPECT_LT(gradcheck_directional(build, {&a, &b}, 1e-6, 10, 7), 1e-6);
  EXPECT_EQ(a.values(), a0.values());
  EXPECT_EQ(b.values(), b0.values());
}

TEST(Tape, SharedParameterAccumulates) {
  const Tensor w = Tensor::vector({2.0, -1.0});
  Tape t;
  Var a = t.param(w);
  Var b = t.param(w);
  EXPECT_EQ(a.id, b.id);
  t.backward(ad::sum(ad::add(ad::scale(a, 3.0), b)));
  const auto g = t.param_grad(w);
  ASSERT_TRUE(g.has_value());
  EXPECT_EQ((*g)[0], 4.0);
  EXPECT_EQ((*g)[1], 4.0);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  Tape t;
  Var c = t.constant(Tensor::vector({1, 2}));
  Var v = t.variable(Tensor::vector({3, 4}));
  t.backward(ad::sum(ad::mul(c, v)));
  const Tensor gv = t.grad(v);
  EXPECT_EQ(gv[0], 1.0);
  EXPECT_EQ(gv[1], 2.0);
}

TEST(GradientSuite, EveryPrimitiveBlockPasses) {
  RunConfig cfg = default_gradcheck_config();
  const GradcheckReport r = run_gradcheck_suite(cfg);
  std::size_t primitives = 0;
  for (const auto& b : r.blocks) {
    if (!b.primitive) continue;
    ++primitives;
    EXPECT_LT(b.result.max_rel_error, 1e-6) << b.name;
    EXPECT_GT(b.result.coordinates, 0u) << b.name;
  }
  EXPECT_GE(primitives, 10u);
  EXPECT_TRUE(r.passed());
}

TEST(GradientSuite, CorruptHookFailsOnlyThatBlock) {
  RunConfig cfg = default_gradcheck_config();
  cfg.gradcheck.corrupt_block = "softmax_rows";
  const GradcheckReport r = run_gradcheck_suite(cfg);
  EXPECT_FALSE(r.passed());
  for (const auto& b : r.blocks) EXPECT_EQ(b.passed(), b.name != "softmax_rows") << b.name;
}

TEST(GradientSuite, UnknownCorruptBlockIsConfigError) {
  RunConfig cfg = default_gradcheck_config();
  cfg.gradcheck.corrupt_block = "no_such_block";
  EXPECT_THROW(run_gradcheck_suite(cfg), ConfigError);
}
