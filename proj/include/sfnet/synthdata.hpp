// SPDX-License-Identifier: Apache-2.0
#pragma once

// Self-supervised training pairs: a single image and its foreground mask
// are warped by a random affine transform; the ground-truth flow follows
// analytically from the transform.
//
// Normalized coordinates place pixel centers at u = (2x + 1) / W - 1, so the
// same affine is consistent at image and grid resolution.

#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "sfnet/io.hpp"
#include "sfnet/metrics.hpp"

namespace sfnet {

struct AffineRanges {
  double rotation_deg = 15.0;      // +/- range
  double scale_min = 0.8;          // isotropic
  double scale_max = 1.2;
  double translation = 0.1;        // +/- fraction of image size
  double shear_deg = 10.0;         // +/- range

  void validate() const {
    if (rotation_deg < 0 || shear_deg < 0 || translation < 0 || !(scale_min > 0) || scale_max < scale_min)
      throw std::invalid_argument("affine ranges: negative range or invalid scale interval");
    if (shear_deg >= 89.0) throw std::invalid_argument("affine ranges: shear must stay below 89 degrees");
  }

  static AffineRanges identity() { return {0.0, 1.0, 1.0, 0.0, 0.0}; }
};

inline nlohmann::json to_json(const AffineRanges& r) {
  return {{"rotation_deg", r.rotation_deg}, {"scale_min", r.scale_min},     {"scale_max", r.scale_max},
          {"translation", r.translation},   {"shear_deg", r.shear_deg}};
}

inline AffineRanges affine_ranges_from_json(const nlohmann::json& j) {
  AffineRanges r;
  for (const auto& [key, value] : j.items()) {
    if (key == "rotation_deg") r.rotation_deg = value.get<double>();
    else if (key == "scale_min") r.scale_min = value.get<double>();
    else if (key == "scale_max") r.scale_max = value.get<double>();
    else if (key == "translation") r.translation = value.get<double>();
    else if (key == "shear_deg") r.shear_deg = value.get<double>();
    else throw std::invalid_argument("affine ranges: unknown key '" + key + "'");
  }
  r.validate();
  return r;
}

/// 2x3 matrix [a b c; d e f] mapping normalized target coordinates to
/// normalized source coordinates.
struct AffineParams {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};

  double det() const { return m[0] * m[4] - m[1] * m[3]; }

  GridCoord apply(GridCoord u) const { return {m[0] * u.x + m[1] * u.y + m[2], m[3] * u.x + m[4] * u.y + m[5]}; }

  AffineParams inverse() const {
    const double d = det();
    if (d == 0.0 || !std::isfinite(d)) throw std::domain_error("affine is singular");
    AffineParams inv;
    inv.m[0] = m[4] / d;
    inv.m[1] = -m[1] / d;
    inv.m[3] = -m[3] / d;
    inv.m[4] = m[0] / d;
    inv.m[2] = -(inv.m[0] * m[2] + inv.m[1] * m[5]);
    inv.m[5] = -(inv.m[3] * m[2] + inv.m[4] * m[5]);
    return inv;
  }

  /// Sanity bounds on the linear part.
  bool degenerate() const {
    for (double v : m)
      if (!std::isfinite(v)) return true;
    const double d = det();
    return !(d >= 0.25 && d <= 4.0);
  }
};

inline nlohmann::json to_json(const AffineParams& a) {
  return {{"matrix", {{a.m[0], a.m[1], a.m[2]}, {a.m[3], a.m[4], a.m[5]}}}, {"determinant", a.det()}};
}

/// Independent draws behind one sampled affine.
struct AffineDraw {
  double rotation = 0.0;  // radians
  double scale = 1.0;
  double shear = 0.0;     // radians
  double tx = 0.0;        // normalized units
  double ty = 0.0;
};

/// u_source = R(rotation) * Shear(shear) * S(scale) * (u_target + t).
inline AffineParams compose_affine(const AffineDraw& d) {
  const double c = std::cos(d.rotation), s = std::sin(d.rotation), k = std::tan(d.shear);
  // R * Sh = [c, c k - s; s, s k + c]
  const double l00 = (c) * d.scale, l01 = (c * k - s) * d.scale;
  const double l10 = (s) * d.scale, l11 = (s * k + c) * d.scale;
  AffineParams a;
  a.m = {l00, l01, l00 * d.tx + l01 * d.ty, l10, l11, l10 * d.tx + l11 * d.ty};
  return a;
}

struct SampledAffine {
  AffineParams params;
  AffineDraw draw;
};

/// Uniform independent draws within the ranges. Translation is drawn in
/// normalized units, where the full image spans 2.
inline SampledAffine sample_affine(std::mt19937_64& rng, const AffineRanges& ranges = {}) {
  ranges.validate();
  auto uni = [&](double lo, double hi) { return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double deg = std::numbers::pi / 180.0;
  AffineDraw d;
  d.rotation = uni(-ranges.rotation_deg, ranges.rotation_deg) * deg;
  d.shear = uni(-ranges.shear_deg, ranges.shear_deg) * deg;
  d.scale = uni(ranges.scale_min, ranges.scale_max);
  d.tx = uni(-2.0 * ranges.translation, 2.0 * ranges.translation);
  d.ty = uni(-2.0 * ranges.translation, 2.0 * ranges.translation);
  return {compose_affine(d), d};
}

inline double to_normalized(double pixel, std::size_t size) {
  return (2.0 * pixel + 1.0) / static_cast<double>(size) - 1.0;
}
inline double from_normalized(double u, std::size_t size) {
  return ((u + 1.0) * static_cast<double>(size) - 1.0) / 2.0;
}

/// Ground-truth source->target flow on an h x w grid: target(q) samples
/// source(A q), so source cell p moves to A^{-1}(p).
inline FlowField affine_flow(const AffineParams& affine, std::size_t height, std::size_t width) {
  const AffineParams inv = affine.inverse();
  FlowField f(height, width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const GridCoord ut = inv.apply({to_normalized(static_cast<double>(x), width), to_normalized(static_cast<double>(y), height)});
      f.dx(y, x) = from_normalized(ut.x, width) - static_cast<double>(x);
      f.dy(y, x) = from_normalized(ut.y, height) - static_cast<double>(y);
    }
  return f;
}

/// Target pixel position of a source pixel position.
inline GridCoord map_source_to_target(const AffineParams& affine, GridCoord s, std::size_t height, std::size_t width) {
  const GridCoord ut = affine.inverse().apply({to_normalized(s.x, width), to_normalized(s.y, height)});
  return {from_normalized(ut.x, width), from_normalized(ut.y, height)};
}

inline Image flip_horizontal(const Image& img) {
  Image out = img;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

inline BinaryMask flip_horizontal(const BinaryMask& m) {
  BinaryMask out(m.height(), m.width());
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x) out.at(y, x) = m.at(y, m.width() - 1 - x);
  return out;
}

struct TrainingPair {
  Image source;
  BinaryMask source_mask;
  Image target;
  BinaryMask target_mask;
  FlowField gt_flow;  // source -> target, grid units
  AffineParams affine;
  bool flipped = false;
};

struct PairOptions {
  std::size_t grid_stride = 4;  // image pixels per grid cell
  bool flip = false;
};

/// Builds a pair by inverse-warp sampling the (optionally flipped) image
/// and mask under the affine. Target masks are thresholded at 0.5.
inline TrainingPair make_pair(const Image& image, const BinaryMask& mask, const AffineParams& affine,
                              const PairOptions& options = {}) {
  if (image.height != mask.height() || image.width != mask.width())
    throw std::invalid_argument("make_pair: image and mask extents differ");
  if (affine.degenerate()) throw std::invalid_argument("make_pair: degenerate affine (determinant outside [0.25, 4])");
  if (options.grid_stride == 0 || image.height % options.grid_stride || image.width % options.grid_stride)
    throw std::invalid_argument("make_pair: image extent must be a multiple of the grid stride");
  TrainingPair p;
  p.flipped = options.flip;
  p.source = options.flip ? flip_horizontal(image) : image;
  p.source_mask = options.flip ? flip_horizontal(mask) : mask;
  p.affine = affine;
  const std::size_t h = image.height, w = image.width;
  const FeatureGrid src = image_to_grid(p.source);
  FeatureGrid tgt(h, w, image.channels);
  BinaryMask tmask(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const GridCoord us = affine.apply({to_normalized(static_cast<double>(x), w), to_normalized(static_cast<double>(y), h)});
      const GridCoord at{from_normalized(us.x, w), from_normalized(us.y, h)};
      bilinear_sample_into(src, at, tgt.tensor().data().subspan((y * w + x) * image.channels, image.channels));
      tmask.at(y, x) = bilinear_sample(p.source_mask, at) >= 0.5 ? 1.0 : 0.0;
    }
  p.target = grid_to_image(tgt);
  p.target_mask = tmask;
  p.gt_flow = affine_flow(affine, h / options.grid_stride, w / options.grid_stride);
  return p;
}

/// Pixelwise union of instance masks.
inline BinaryMask make_multimask(const std::vector<BinaryMask>& masks) {
  if (masks.empty()) throw std::invalid_argument("make_multimask: no masks");
  BinaryMask out(masks[0].height(), masks[0].width());
  for (const auto& m : masks) {
    require_same_extent(out, m, "make_multimask");
    for (std::size_t i = 0; i < m.tensor().size(); ++i)
      out.tensor()[i] = std::max(out.tensor()[i], m.tensor()[i] >= 0.5 ? 1.0 : 0.0);
  }
  return out;
}

/// Samples up to `count` source foreground pixels whose mapped position is
/// inside the target image and target mask. The box is the target mask's
/// bounding box.
inline KeypointSet make_keypoints(const TrainingPair& pair, std::size_t count, std::mt19937_64& rng) {
  const std::size_t h = pair.source.height, w = pair.source.width;
  std::vector<GridCoord> candidates;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (pair.source_mask.at(y, x) < 0.5) continue;
      const GridCoord t = map_source_to_target(pair.affine, {double(x), double(y)}, h, w);
      if (t.x < 0 || t.y < 0 || t.x > double(w - 1) || t.y > double(h - 1)) continue;
      if (bilinear_sample(pair.target_mask, t) < 0.5) continue;
      candidates.push_back({double(x), double(y)});
    }
  std::shuffle(candidates.begin(), candidates.end(), rng);
  candidates.resize(std::min(count, candidates.size()));
  KeypointSet kps;
  for (const auto& s : candidates) {
    kps.source.push_back(s);
    kps.target.push_back(map_source_to_target(pair.affine, s, h, w));
  }
  if (auto box = mask_bounding_box(pair.target_mask)) kps.box = *box;
  return kps;
}

/// True when no foreground touches the image border in either mask.
inline bool interior_contained(const TrainingPair& pair) {
  for (const BinaryMask* m : {&pair.source_mask, &pair.target_mask}) {
    const auto box = mask_bounding_box(*m);
    if (!box) return false;
    if (box->x_min <= 0 || box->y_min <= 0 || box->x_max >= double(m->width() - 1) || box->y_max >= double(m->height() - 1))
      return false;
  }
  return true;
}

struct Scene {
  Image image;
  BinaryMask mask;
};

/// Procedural RGB scene: smooth colored background with clutter and one
/// textured blob-shaped object near the center, which defines the mask.
inline Scene procedural_scene(std::mt19937_64& rng, std::size_t size = 64) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double pi = std::numbers::pi;
  const double s = static_cast<double>(size);
  FeatureGrid img(size, size, 3);
  // Background: low-frequency sinusoids per channel.
  std::array<std::array<double, 5>, 3> waves{};
  for (auto& wv : waves) wv = {u01(rng) * 0.5 + 0.25, u01(rng) * 2.0 * pi / s * 2.0, u01(rng) * 2.0 * pi / s * 2.0,
                               u01(rng) * 2.0 * pi, u01(rng) * 0.2 + 0.1};
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const auto& wv = waves[c];
        img.at(y, x, c) = wv[0] + wv[4] * std::sin(wv[1] * double(x) + wv[2] * double(y) + wv[3]);
      }
  // Clutter discs.
  const int clutter = 3 + static_cast<int>(u01(rng) * 4);
  for (int i = 0; i < clutter; ++i) {
    const double cx = u01(rng) * s, cy = u01(rng) * s, r = 2.0 + u01(rng) * s / 10.0;
    const double col[3] = {u01(rng), u01(rng), u01(rng)};
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        if ((double(x) - cx) * (double(x) - cx) + (double(y) - cy) * (double(y) - cy) <= r * r)
          for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = col[c];
  }
  // Object outline: radius modulated by a few harmonics.
  const double cx = s / 2.0 - 0.5 + (u01(rng) - 0.5) * s / 8.0;
  const double cy = s / 2.0 - 0.5 + (u01(rng) - 0.5) * s / 8.0;
  const double r0 = s * (0.18 + 0.07 * u01(rng));
  const double a1 = 0.15 * u01(rng), a2 = 0.12 * u01(rng), a3 = 0.08 * u01(rng);
  const double p1 = 2 * pi * u01(rng), p2 = 2 * pi * u01(rng), p3 = 2 * pi * u01(rng);
  const double base[3] = {u01(rng), u01(rng), u01(rng)};
  struct Spot { double x, y, r, col[3]; };
  std::vector<Spot> spots;
  const int nspots = 6 + static_cast<int>(u01(rng) * 5);
  for (int i = 0; i < nspots; ++i) {
    const double ang = 2 * pi * u01(rng), rad = r0 * u01(rng);
    spots.push_back({cx + rad * std::cos(ang), cy + rad * std::sin(ang), s * (0.04 + 0.06 * u01(rng)),
                     {u01(rng), u01(rng), u01(rng)}});
  }
  BinaryMask mask(size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = double(x) - cx, dy = double(y) - cy;
      const double th = std::atan2(dy, dx);
      const double rad = r0 * (1.0 + a1 * std::cos(th + p1) + a2 * std::cos(2 * th + p2) + a3 * std::cos(3 * th + p3));
      if (dx * dx + dy * dy > rad * rad) continue;
      mask.at(y, x) = 1.0;
      double col[3] = {base[0], base[1], base[2]};
      for (const Spot& sp : spots)
        if ((double(x) - sp.x) * (double(x) - sp.x) + (double(y) - sp.y) * (double(y) - sp.y) <= sp.r * sp.r)
          for (int c = 0; c < 3; ++c) col[c] = sp.col[c];
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = col[c];
    }
  return {grid_to_image(img), mask};
}

}  // namespace sfnet
