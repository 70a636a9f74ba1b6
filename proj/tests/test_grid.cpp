#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "sfnet/grid.hpp"

using namespace sfnet;

TEST(Tensor, ShapeAndIndexing) {
  Tensor t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  t.at(1, 2, 3) = 5.0;
  EXPECT_EQ(t[23], 5.0);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>(3)), std::invalid_argument);
}

TEST(Bilinear, IntegerCellReturnsStoredValue) {
  std::mt19937_64 rng(3);
  const FeatureGrid g(oracle::random_tensor({4, 5, 3}, rng));
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 5; ++x) {
      const auto v = bilinear_sample(g, {double(x), double(y)});
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(v[c], g.at(y, x, c));
    }
}

TEST(Bilinear, Midpoint) {
  BinaryMask m(1, 2);
  m.at(0, 1) = 1.0;
  EXPECT_DOUBLE_EQ(bilinear_sample(m, {0.5, 0.0}), 0.5);
}

TEST(Bilinear, HalfOutsideIsZeroPadded) {
  BinaryMask ones(3, 3, 1.0);
  EXPECT_DOUBLE_EQ(bilinear_sample(ones, {-0.5, 0.0}), 0.5);
}

TEST(Bilinear, NonFiniteCoordinateRejected) {
  BinaryMask m(2, 2);
  EXPECT_THROW(bilinear_sample(m, {std::nan(""), 0.0}), std::domain_error);
  EXPECT_THROW(bilinear_sample(m, {0.0, INFINITY}), std::domain_error);
}

TEST(Bilinear, CoordinateGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const Grid g(oracle::random_tensor({5, 6, 2}, rng));
  std::uniform_real_distribution<double> u(0.1, 0.9);
  const double h = 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    const GridCoord at{double(trial % 5) + u(rng) - 0.5, double(trial % 4) + u(rng) - 0.5};
    for (std::size_t c = 0; c < 2; ++c) {
      const GridCoord grad = bilinear_sample_grad(g, at, c);
      const double nx = (oracle::bilinear(g.tensor(), at.x + h, at.y, c) - oracle::bilinear(g.tensor(), at.x - h, at.y, c)) / (2 * h);
      const double ny = (oracle::bilinear(g.tensor(), at.x, at.y + h, c) - oracle::bilinear(g.tensor(), at.x, at.y - h, c)) / (2 * h);
      EXPECT_LT(std::abs(grad.x - nx), 1e-4 * std::max({std::abs(nx), std::abs(grad.x), 1e-8}));
      EXPECT_LT(std::abs(grad.y - ny), 1e-4 * std::max({std::abs(ny), std::abs(grad.y), 1e-8}));
    }
  }
}

TEST(Warp, ZeroFlowIsIdentity) {
  std::mt19937_64 rng(7);
  const FlowField f(oracle::random_tensor({6, 7, 2}, rng));
  const FlowField w = warp(f, FlowField(6, 7));
  EXPECT_EQ(w.tensor(), f.tensor());
}

TEST(Warp, FarFlowGivesZeros) {
  const BinaryMask ones(4, 4, 1.0);
  const BinaryMask w = warp(ones, FlowField::uniform(4, 4, 6.0, 0.0));
  for (double v : w.tensor().data()) EXPECT_EQ(v, 0.0);
}

TEST(Warp, UnitShiftMovesLeft) {
  std::mt19937_64 rng(9);
  const BinaryMask m(oracle::random_mask(5, 6, rng));
  const BinaryMask w = warp(m, FlowField::uniform(5, 6, 1.0, 0.0));
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 6; ++x) EXPECT_EQ(w.at(y, x), x + 1 < 6 ? m.at(y, x + 1) : 0.0);
}

TEST(Warp, MatchesOracleOnRandomFields) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 20; ++i) {
    const Tensor field = oracle::random_tensor({5, 6, 3}, rng);
    const Tensor flow = oracle::random_tensor({5, 6, 2}, rng, -2.5, 2.5);
    const Grid out = warp(Grid(field), FlowField(flow));
    EXPECT_LT(max_abs_diff(out.tensor(), oracle::warp(field, flow)), 1e-12);
  }
}

TEST(Warp, LinearInField) {
  std::mt19937_64 rng(13);
  const Tensor x = oracle::random_tensor({4, 4, 2}, rng), y = oracle::random_tensor({4, 4, 2}, rng);
  const FlowField flow(oracle::random_tensor({4, 4, 2}, rng, -1.5, 1.5));
  Tensor combo = x;
  for (std::size_t i = 0; i < combo.size(); ++i) combo[i] = 2.0 * x[i] - 0.5 * y[i];
  const Tensor lhs = warp(Grid(combo), flow).tensor();
  const Tensor wx = warp(Grid(x), flow).tensor(), wy = warp(Grid(y), flow).tensor();
  for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], 2.0 * wx[i] - 0.5 * wy[i], 1e-14);
}

TEST(Warp, ShapeMismatchRejected) {
  EXPECT_THROW(warp(BinaryMask(3, 3), FlowField(3, 4)), std::invalid_argument);
}

TEST(Upsample, SameSizeIsIdentity) {
  std::mt19937_64 rng(15);
  const FeatureGrid g(oracle::random_tensor({4, 5, 2}, rng));
  EXPECT_EQ(upsample_bilinear(g, 4, 5).tensor(), g.tensor());
}

TEST(Upsample, ConstantStaysConstant) {
  const FeatureGrid g(Tensor(Shape{3, 3, 2}, 0.75));
  const FeatureGrid up = upsample_bilinear(g, 7, 11);
  for (double v : up.tensor().data()) EXPECT_NEAR(v, 0.75, 1e-15);
}

TEST(Upsample, FlowDisplacementsScaleWithSize) {
  const FlowField f = upsample_bilinear(FlowField::uniform(2, 2, 1.0, 0.0), 4, 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      EXPECT_DOUBLE_EQ(f.dx(y, x), 2.0);
      EXPECT_DOUBLE_EQ(f.dy(y, x), 0.0);
    }
}

TEST(Upsample, CornersMapToCorners) {
  std::mt19937_64 rng(17);
  const FeatureGrid g(oracle::random_tensor({3, 4, 1}, rng));
  const FeatureGrid u = upsample_bilinear(g, 9, 10);
  EXPECT_NEAR(u.at(0, 0, 0), g.at(0, 0, 0), 1e-15);
  EXPECT_NEAR(u.at(8, 9, 0), g.at(2, 3, 0), 1e-15);
  EXPECT_NEAR(u.at(0, 9, 0), g.at(0, 3, 0), 1e-15);
  EXPECT_THROW(upsample_bilinear(g, 0, 3), std::invalid_argument);
}

TEST(Resize, AdjointIdentity) {
  std::mt19937_64 rng(19);
  const Tensor x = oracle::random_tensor({3, 4, 2}, rng);
  const Tensor g = oracle::random_tensor({7, 5, 2}, rng);
  const Tensor y = resize_bilinear(x, 7, 5);
  const Tensor a = resize_bilinear_adjoint(g, 3, 4);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += y[i] * g[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * a[i];
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Mask, DownsampleAreaThreshold) {
  BinaryMask m(4, 4);
  m.at(0, 0) = m.at(0, 1) = 1.0;  // half of the first block
  m.at(2, 2) = 1.0;               // a quarter of the last block
  const BinaryMask d = downsample_mask(m, 2);
  EXPECT_EQ(d.at(0, 0), 1.0);
  EXPECT_EQ(d.at(1, 1), 0.0);
  EXPECT_THROW(downsample_mask(m, 3), std::invalid_argument);
}
