#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "sfnet/gradcheck_suite.hpp"
#include "sfnet/losses.hpp"
#include "sfnet/ops.hpp"

using namespace sfnet;
using ad::Tape;
using ad::Var;

TEST(Backward, SumGivesOnes) {
  Tape t;
  const Var x = t.leaf(Tensor(Shape{2, 3}, 0.4));
  t.backward(ad::sum(x));
  for (double g : x.grad().data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesX) {
  std::mt19937_64 rng(51);
  const Tensor v = oracle::random_tensor({7}, rng);
  Tape t;
  const Var x = t.leaf(v);
  t.backward(ad::scale(ad::sum(ad::square(x)), 0.5));
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], v[i]);
}

TEST(Backward, DetachedAndNonScalarRejected) {
  Tape t;
  EXPECT_THROW(t.backward(Var()), std::logic_error);
  const Var x = t.leaf(Tensor(Shape{2}));
  EXPECT_THROW(t.backward(x), std::invalid_argument);
  Tape other;
  const Var y = other.leaf(Tensor(Shape{1}));
  EXPECT_THROW(t.backward(y), std::logic_error);
  EXPECT_THROW(ad::add(x, other.leaf(Tensor(Shape{2}))), std::logic_error);
}

TEST(Backward, EachNodeVisitedOnceAndRepeatable) {
  Tape t;
  const Var x = t.leaf(Tensor(Shape{3}, 2.0));
  const Var y = ad::mul(x, x);
  const Var z = ad::add(y, ad::scale(y, 3.0));  // diamond through y
  const Var loss = ad::sum(z);
  t.backward(loss);
  const Tensor first = x.grad();
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t.visits(i), 1u);
  for (double g : first.data()) EXPECT_DOUBLE_EQ(g, 16.0);  // d/dx 4x^2
  t.backward(loss);
  EXPECT_EQ(x.grad(), first);
}

TEST(Backward, TopologicalOrder) {
  Tape t;
  const Var a = t.leaf(Tensor(Shape{2}, 1.0));
  const Var b = ad::relu(ad::sub(a, t.constant(Tensor(Shape{2}, 0.5))));
  ad::sum(ad::abs(b));
  for (std::size_t i = 0; i < t.size(); ++i)
    for (std::size_t p : t.parents(i)) EXPECT_LT(p, i);
}

TEST(Backward, Linearity) {
  std::mt19937_64 rng(53);
  const Tensor v = oracle::random_tensor({4, 4, 2}, rng);
  const Tensor flow = oracle::random_tensor({4, 4, 2}, rng, -1.3, 1.3);
  auto grads = [&](double a, double b) {
    Tape t;
    const Var x = t.leaf(v);
    const Var l1 = ad::sum(ad::square(ad::warp(x, t.constant(flow))));
    const Var l2 = ad::sum(ad::abs(ad::forward_diff(x, ad::Axis::Y)));
    t.backward(ad::add(ad::scale(l1, a), ad::scale(l2, b)));
    return x.grad();
  };
  const Tensor g1 = grads(1, 0), g2 = grads(0, 1), g = grads(2.5, -0.75);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], 2.5 * g1[i] - 0.75 * g2[i], 1e-12);
}

TEST(StopGradient, BlocksGradient) {
  Tape t;
  const Var x = t.leaf(Tensor(Shape{3}, 1.5));
  const Var s = ad::stop_gradient(ad::square(x));
  t.backward(ad::sum(ad::mul(s, t.constant(Tensor(Shape{3}, 4.0)))));
  for (double g : x.grad().data()) EXPECT_EQ(g, 0.0);
  EXPECT_EQ(s.value()[0], 2.25);

  // Gradient flows only around the marker.
  Tape u;
  const Var y = u.leaf(Tensor(Shape{2}, 3.0));
  u.backward(ad::sum(ad::mul(y, ad::stop_gradient(y))));
  for (double g : y.grad().data()) EXPECT_EQ(g, 3.0);
}

TEST(Subgradients, ReluAndAbsAtZero) {
  Tape t;
  const Var x = t.leaf(Tensor(Shape{1}, 0.0));
  t.backward(ad::sum(ad::abs(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  t.backward(ad::sum(ad::relu(x)));
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(GradCheck, ExactQuadratic) {
  std::mt19937_64 rng(55);
  const auto r = ad::grad_check([](Tape&, std::span<const Var> in) { return ad::sum(ad::square(in[0])); },
                                {{"x", oracle::random_tensor({10}, rng)}});
  EXPECT_TRUE(r.passed());
  EXPECT_LT(r.max_rel_error(), 1e-8);  // central differences leave roundoff only
}

TEST(GradCheck, ReportsNonFiniteValues) {
  const auto r = ad::grad_check(
      [](Tape&, std::span<const Var> in) {
        const double v = in[0].value()[0];
        return ad::scale(ad::sum(in[0]), v > 1.0 ? INFINITY : 1.0);
      },
      {{"x", Tensor(Shape{1}, 1.0)}});
  EXPECT_FALSE(r.passed());
  ASSERT_EQ(r.params.size(), 1u);
  ASSERT_EQ(r.params[0].failures.size(), 1u);
  EXPECT_FALSE(r.params[0].failures[0].finite);
  const auto j = ad::to_json(r);
  EXPECT_TRUE(j.contains("worst"));
  EXPECT_EQ(j["step"], 1e-5);
}

TEST(GradCheck, KernelSoftArgmaxOneCoordinate) {
  std::mt19937_64 rng(57);
  const auto r = ad::grad_check(
      [](Tape& t, std::span<const Var> in) {
        Tensor pick(Shape{1, 1, 2});
        pick[0] = 1.0;
        return ad::sum(ad::mul(ad::kernel_soft_argmax(in[0], MatchParams{}).flow, t.constant(pick)));
      },
      {{"slice", oracle::random_tensor({1, 1, 5, 5}, rng)}});
  EXPECT_TRUE(r.passed()) << ad::to_json(r).dump();
}

TEST(GradCheck, ConvInputsAndWeights) {
  std::mt19937_64 rng(59);
  const auto r = ad::grad_check(
      [](Tape& t, std::span<const Var> in) {
        const Var y = ad::conv2d(in[0], in[1], in[2]);
        Tensor w(y.shape());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(double(i));
        return ad::sum(ad::mul(y, t.constant(w)));
      },
      {{"input", oracle::random_tensor({5, 5, 2}, rng)},
       {"weight", oracle::random_tensor({3, 3, 2, 3}, rng)},
       {"bias", oracle::random_tensor({3}, rng)}});
  EXPECT_TRUE(r.passed());
  EXPECT_LT(r.max_rel_error(), 1e-6);
}

TEST(GradCheck, WarpFieldAndFlow) {
  std::mt19937_64 rng(61);
  const auto r = ad::grad_check(
      [](Tape&, std::span<const Var> in) { return ad::sum(ad::square(ad::warp(in[0], in[1]))); },
      {{"field", oracle::random_tensor({4, 5, 2}, rng)}, {"flow", oracle::random_tensor({4, 5, 2}, rng, -0.45, 0.45)}});
  EXPECT_TRUE(r.passed()) << ad::to_json(r).dump();
}

TEST(GradCheck, SuiteDefaultSeedPasses) {
  const auto cases = run_gradcheck_suite({});
  ASSERT_EQ(cases.size(), 7u);
  for (const auto& c : cases) EXPECT_TRUE(c.report.passed()) << c.name << " " << c.report.max_rel_error();
  const auto j = to_json(cases);
  EXPECT_TRUE(j["passed"].get<bool>());
}
