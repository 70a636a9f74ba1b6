#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "sfnet/model.hpp"

using namespace sfnet;

namespace {

Image impulse_image(std::size_t size, std::size_t y, std::size_t x) {
  Image img(size, size, 3);
  for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = 255;
  return img;
}

}  // namespace

TEST(Conv, IdentityKernel) {
  std::mt19937_64 rng(91);
  const FeatureGrid x(oracle::random_tensor({4, 5, 3}, rng));
  ConvLayer l = ConvLayer::zeros(1, 3, 3);
  for (std::size_t c = 0; c < 3; ++c) l.weight.at(0, 0, c, c) = 1.0;
  EXPECT_EQ(conv2d(x, l).tensor(), x.tensor());
}

TEST(Conv, ImpulseResponseClippedAtBorder) {
  FeatureGrid x(4, 4, 1);
  x.at(0, 1, 0) = 1.0;
  ConvLayer l = ConvLayer::zeros(3, 1, 1);
  l.weight.fill(1.0);
  const FeatureGrid y = conv2d(x, l);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at(r, c, 0), (r <= 1 && c <= 2) ? 1.0 : 0.0) << r << "," << c;
}

TEST(Conv, NaiveOracle) {
  std::mt19937_64 rng(93);
  for (int i = 0; i < 20; ++i) {
    const Tensor x = oracle::random_tensor({5, 5, 2}, rng), w = oracle::random_tensor({3, 3, 2, 3}, rng),
                 b = oracle::random_tensor({3}, rng);
    EXPECT_LT(max_abs_diff(conv2d_forward(x, w, b), oracle::conv(x, w, b)), 1e-12);
  }
  EXPECT_THROW(conv2d_forward(Tensor(Shape{3, 3, 2}), Tensor(Shape{3, 3, 3, 1}), Tensor(Shape{1})), std::invalid_argument);
  EXPECT_THROW(ConvLayer::zeros(2, 1, 1), std::invalid_argument);
}

TEST(Adapt, IdentityAtInit) {
  std::mt19937_64 rng(95);
  const AdaptationBlock b = AdaptationBlock::init(4, 5, rng);
  const FeatureGrid x(oracle::random_tensor({6, 6, 4}, rng));
  EXPECT_EQ(adapt(x, b).tensor(), x.tensor());
  EXPECT_EQ(adapt(x, b, batch_stats(b, {&x})).tensor(), x.tensor());
}

TEST(Adapt, ZeroConvIsIdentity) {
  std::mt19937_64 rng(97);
  AdaptationBlock b = AdaptationBlock::init(3, 3, rng);
  b.conv = ConvLayer::zeros(3, 3, 3);
  b.gamma = oracle::random_tensor({3}, rng, 0.5, 2.0);
  const FeatureGrid x(oracle::random_tensor({5, 5, 3}, rng));
  EXPECT_EQ(adapt(x, b, batch_stats(b, {&x})).tensor(), x.tensor());
}

TEST(Adapt, ResidualNonNegativeAndOracle) {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 20; ++i) {
    AdaptationBlock b = AdaptationBlock::init(3, 3, rng);
    b.conv.bias = oracle::random_tensor({3}, rng);
    b.gamma = oracle::random_tensor({3}, rng);
    b.beta = oracle::random_tensor({3}, rng);
    const FeatureGrid x(oracle::random_tensor({5, 4, 3}, rng)), y(oracle::random_tensor({5, 4, 3}, rng));
    const NormStats s = batch_stats(b, {&x, &y});
    const FeatureGrid out = adapt(x, b, s);
    const Tensor z = oracle::conv(x.tensor(), b.conv.weight, b.conv.bias);
    const Tensor zy = oracle::conv(y.tensor(), b.conv.weight, b.conv.bias);
    for (std::size_t c = 0; c < 3; ++c) {
      double mean = 0.0, var = 0.0;
      for (std::size_t k = c; k < z.size(); k += 3) mean += z[k] + zy[k];
      mean /= 40.0;
      for (std::size_t k = c; k < z.size(); k += 3) var += (z[k] - mean) * (z[k] - mean) + (zy[k] - mean) * (zy[k] - mean);
      var /= 40.0;
      EXPECT_NEAR(s.mean[c], mean, 1e-12);
      EXPECT_NEAR(s.var[c], var, 1e-12);
      for (std::size_t k = c; k < z.size(); k += 3) {
        const double r = std::max(0.0, b.gamma[c] * (z[k] - mean) / std::sqrt(var + b.eps) + b.beta[c]);
        EXPECT_NEAR(out.tensor()[k], x.tensor()[k] + r, 1e-12);
        EXPECT_GE(out.tensor()[k] - x.tensor()[k], 0.0);
      }
    }
  }
}

TEST(Adapt, RunningStatsMomentum) {
  std::mt19937_64 rng(101);
  AdaptationBlock b = AdaptationBlock::init(2, 3, rng);
  b.update_running({Tensor(Shape{2}, 1.0), Tensor(Shape{2}, 3.0)});
  EXPECT_DOUBLE_EQ(b.running_mean[0], 0.1);
  EXPECT_DOUBLE_EQ(b.running_var[1], 0.9 + 0.3);
}

TEST(Backbone, ConstantImageGivesConstantGrids) {
  const ToyBackbone bb;
  Image img(32, 32, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = std::uint8_t(40 + 50 * (i % 3));
  const auto out = bb.extract(img);
  EXPECT_EQ(out.fine.height(), 8u);
  EXPECT_EQ(out.coarse.height(), 4u);
  for (const FeatureGrid* g : {&out.fine, &out.coarse})
    for (std::size_t y = 0; y < g->height(); ++y)
      for (std::size_t x = 0; x < g->width(); ++x)
        for (std::size_t c = 0; c < g->depth(); ++c) EXPECT_NEAR(g->at(y, x, c), g->at(0, 0, c), 1e-12);
}

TEST(Backbone, ImpulseShiftMovesFineResponse) {
  const ToyBackbone bb;
  const auto a = bb.extract(impulse_image(32, 12, 12));
  const auto b = bb.extract(impulse_image(32, 12, 16));  // one fine cell to the right
  double response = 0.0;
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x + 1 < 8; ++x)
      for (std::size_t c = 0; c < a.fine.depth(); ++c) {
        EXPECT_NEAR(b.fine.at(y, x + 1, c), a.fine.at(y, x, c), 1e-12);
        response += std::abs(a.fine.at(y, x, c) - a.fine.at(0, 0, c));
      }
  EXPECT_GT(response, 0.0);
}

TEST(Backbone, DeterministicAndValidated) {
  const ToyBackbone a, b;
  const Image img = impulse_image(16, 3, 5);
  EXPECT_EQ(a.extract(img).fine.tensor(), b.extract(img).fine.tensor());
  EXPECT_THROW(a.extract(Image(12, 16, 3)), std::invalid_argument);
  EXPECT_THROW(a.extract(Image(16, 16, 1)), std::invalid_argument);
}

TEST(Model, AdaptationAtInitMatchesRawFeatures) {
  const ToyBackbone bb;
  Image s = impulse_image(32, 10, 9), t = impulse_image(32, 14, 15);
  for (std::size_t i = 0; i < s.pixels.size(); i += 5) s.pixels[i] = t.pixels[i] = std::uint8_t(i % 251);
  ModelConfig with, without;
  without.adaptation = false;
  const Model mw(with), mo(without);
  const PairFeatures pf = mw.features(s, t, BinaryMask(32, 32, 1.0), BinaryMask(32, 32, 1.0));
  EXPECT_EQ(evaluate_correlation(mw, pf).tensor(), evaluate_correlation(mo, pf).tensor());
  EXPECT_EQ(pf.source_mask.height(), 8u);
}

TEST(Model, ParameterOrderAndCount) {
  Model m;
  const auto params = m.parameters();
  ASSERT_EQ(params.size(), 8u);
  EXPECT_EQ(params[0].first, "fine.conv.weight");
  EXPECT_EQ(params[7].first, "coarse.beta");
  EXPECT_EQ(m.parameter_count(), 5u * 5 * 16 * 16 + 16 * 3 + 3u * 3 * 16 * 16 + 16 * 3);
  std::vector<double> flat = m.flat_parameters();
  flat[0] += 1.0;
  m.set_flat_parameters(flat);
  EXPECT_EQ(m.flat_parameters(), flat);
  flat.pop_back();
  EXPECT_THROW(m.set_flat_parameters(flat), std::invalid_argument);
}
