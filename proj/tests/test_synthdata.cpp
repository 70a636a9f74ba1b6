#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "sfnet/dataset.hpp"

using namespace sfnet;

TEST(Affine, ZeroRangesGiveIdentity) {
  std::mt19937_64 rng(111);
  const AffineParams a = sample_affine(rng, AffineRanges::identity()).params;
  const std::array<double, 6> id{1, 0, 0, 0, 1, 0};
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(a.m[i], id[i], 1e-15);
}

TEST(Affine, PureTranslationMatrix) {
  AffineDraw d;
  d.tx = 0.1;
  const AffineParams a = compose_affine(d);
  const std::array<double, 6> expect{1, 0, 0.1, 0, 1, 0};
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(a.m[i], expect[i], 1e-15);
}

TEST(Affine, InverseAndDegeneracy) {
  std::mt19937_64 rng(113);
  const AffineParams a = sample_affine(rng).params;
  const AffineParams inv = a.inverse();
  const GridCoord u{0.3, -0.2};
  const GridCoord back = inv.apply(a.apply(u));
  EXPECT_NEAR(back.x, u.x, 1e-14);
  EXPECT_NEAR(back.y, u.y, 1e-14);
  AffineParams squash;
  squash.m = {0.1, 0, 0, 0, 1, 0};
  EXPECT_TRUE(squash.degenerate());
  EXPECT_THROW(make_pair(Image(8, 8, 3), BinaryMask(8, 8), squash), std::invalid_argument);
  EXPECT_THROW(AffineRanges({5, 1.2, 0.8, 0.1, 0}).validate(), std::invalid_argument);
}

TEST(Affine, MonteCarloMeans) {
  std::mt19937_64 rng(115);
  const AffineRanges r;
  const int n = 10000;
  double rot = 0, scale = 0, shear = 0, tx = 0, ty = 0;
  for (int i = 0; i < n; ++i) {
    const AffineDraw d = sample_affine(rng, r).draw;
    rot += d.rotation, scale += d.scale, shear += d.shear, tx += d.tx, ty += d.ty;
  }
  const double deg = std::numbers::pi / 180.0;
  auto check = [&](double sum, double lo, double hi) {
    const double sd = (hi - lo) / std::sqrt(12.0) / std::sqrt(double(n));
    EXPECT_LT(std::abs(sum / n - (lo + hi) / 2), 3 * sd);
  };
  check(rot, -r.rotation_deg * deg, r.rotation_deg * deg);
  check(scale, r.scale_min, r.scale_max);
  check(shear, -r.shear_deg * deg, r.shear_deg * deg);
  check(tx, -2 * r.translation, 2 * r.translation);
  check(ty, -2 * r.translation, 2 * r.translation);
}

TEST(MakePair, IdentityReproducesSource) {
  const auto scenes = procedural_scenes(1, 3);
  const TrainingPair p = make_pair(scenes[0].image, scenes[0].mask, AffineParams{});
  EXPECT_EQ(p.target, p.source);
  EXPECT_EQ(p.target_mask.tensor(), p.source_mask.tensor());
  for (double v : p.gt_flow.tensor().data()) EXPECT_NEAR(v, 0.0, 1e-12);
  EXPECT_EQ(p.gt_flow.height(), 16u);
}

TEST(MakePair, TwoCellTranslation) {
  const auto scenes = procedural_scenes(1, 5);
  AffineDraw d;
  d.tx = -0.25;  // 2 cells of a 16-cell grid
  const TrainingPair p = make_pair(scenes[0].image, scenes[0].mask, compose_affine(d));
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      EXPECT_NEAR(p.gt_flow.dx(y, x), 2.0, 1e-12);
      EXPECT_NEAR(p.gt_flow.dy(y, x), 0.0, 1e-12);
    }
  // The target image is the source moved 8 pixels to the right.
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 8; x < 64; ++x) EXPECT_EQ(p.target.at(y, x, 1), p.source.at(y, x - 8, 1));
}

TEST(MakePair, FlowAgreesWithAffine) {
  const auto scenes = procedural_scenes(4, 7);
  GenerateOptions opt;
  opt.count = 8;
  for (const auto& [p, k] : generate_pairs(scenes, opt)) {
    const std::size_t n = p.gt_flow.height();
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double tx = double(x) + p.gt_flow.dx(y, x), ty = double(y) + p.gt_flow.dy(y, x);
        const GridCoord us = p.affine.apply({to_normalized(tx, n), to_normalized(ty, n)});
        EXPECT_NEAR(from_normalized(us.x, n), double(x), 1e-6);
        EXPECT_NEAR(from_normalized(us.y, n), double(y), 1e-6);
      }
  }
}

TEST(MakePair, MaskSelfConsistencyAndArea) {
  const auto scenes = procedural_scenes(8, 9);
  GenerateOptions opt;
  opt.count = 40;
  int checked = 0;
  for (const auto& [p, k] : generate_pairs(scenes, opt)) {
    if (!interior_contained(p)) continue;
    ++checked;
    EXPECT_GE(mask_transfer_metrics(p.gt_flow, p.source_mask, p.target_mask).iou, 0.95);
    const double ratio = p.source_mask.sum() / p.target_mask.sum();
    EXPECT_GE(ratio, 0.8 * p.affine.det());
    EXPECT_LE(ratio, 1.25 * p.affine.det());
  }
  EXPECT_GE(checked, 10);
}

TEST(MakePair, FixedSeedIsReproducible) {
  const auto scenes = procedural_scenes(3, 11);
  GenerateOptions opt;
  opt.count = 5;
  const auto a = generate_pairs(scenes, opt), b = generate_pairs(scenes, opt);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first.target, b[i].first.target);
    EXPECT_EQ(a[i].first.gt_flow.tensor(), b[i].first.gt_flow.tensor());
    EXPECT_EQ(a[i].second.source.size(), b[i].second.source.size());
  }
  opt.seed = 2;
  EXPECT_NE(generate_pairs(scenes, opt)[0].first.target, a[0].first.target);
}

TEST(MakePair, FlipIsApplied) {
  const auto scenes = procedural_scenes(1, 13);
  const TrainingPair p = make_pair(scenes[0].image, scenes[0].mask, AffineParams{}, {4, true});
  EXPECT_TRUE(p.flipped);
  EXPECT_EQ(p.source.at(5, 0, 0), scenes[0].image.at(5, 63, 0));
}

TEST(Multimask, UnionOracle) {
  std::mt19937_64 rng(117);
  const BinaryMask a(oracle::random_mask(6, 7, rng, 0.3)), b(oracle::random_mask(6, 7, rng, 0.3));
  EXPECT_EQ(make_multimask({a}).tensor(), a.tensor());
  const BinaryMask u = make_multimask({a, b});
  for (std::size_t i = 0; i < u.tensor().size(); ++i)
    EXPECT_EQ(u.tensor()[i], (a.tensor()[i] >= 0.5 || b.tensor()[i] >= 0.5) ? 1.0 : 0.0);
  BinaryMask l(2, 4), r(2, 4);
  l.at(0, 0) = l.at(1, 1) = 1.0;
  r.at(0, 3) = 1.0;
  EXPECT_EQ(make_multimask({l, r}).sum(), 3.0);
  EXPECT_THROW(make_multimask({}), std::invalid_argument);
}

TEST(Keypoints, InsideTargetMaskWithBox) {
  const auto scenes = procedural_scenes(2, 15);
  GenerateOptions opt;
  opt.count = 4;
  for (const auto& [p, k] : generate_pairs(scenes, opt)) {
    ASSERT_FALSE(k.source.empty());
    const auto box = mask_bounding_box(p.target_mask);
    ASSERT_TRUE(box.has_value());
    EXPECT_EQ(k.box.x_min, box->x_min);
    EXPECT_EQ(k.box.y_max, box->y_max);
    for (std::size_t i = 0; i < k.source.size(); ++i) EXPECT_GE(bilinear_sample(p.target_mask, k.target[i]), 0.5);
    // Ground-truth flow transfers every keypoint within the threshold.
    EXPECT_EQ(pck(p.gt_flow, k, 0.1, 64, 64), 1.0);
  }
}
