// SPDX-License-Identifier: Apache-2.0
#pragma once

// Flow color wheel (hue = direction, saturation = magnitude) and image
// warping previews.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "json.hpp"
#include "sfnet/io.hpp"
#include "sfnet/matching.hpp"

namespace sfnet {

namespace detail {

// Middlebury wheel: red-yellow-green-cyan-blue-magenta segments.
inline std::vector<std::array<double, 3>> color_wheel() {
  const int seg[6] = {15, 6, 4, 11, 13, 6};
  std::vector<std::array<double, 3>> w;
  for (int i = 0; i < seg[0]; ++i) w.push_back({255, 255.0 * i / seg[0], 0});
  for (int i = 0; i < seg[1]; ++i) w.push_back({255 - 255.0 * i / seg[1], 255, 0});
  for (int i = 0; i < seg[2]; ++i) w.push_back({0, 255, 255.0 * i / seg[2]});
  for (int i = 0; i < seg[3]; ++i) w.push_back({0, 255 - 255.0 * i / seg[3], 255});
  for (int i = 0; i < seg[4]; ++i) w.push_back({255.0 * i / seg[4], 0, 255});
  for (int i = 0; i < seg[5]; ++i) w.push_back({255, 0, 255 - 255.0 * i / seg[5]});
  return w;
}

}  // namespace detail

/// Zero flow maps to white. `max_radius` <= 0 normalizes by the largest
/// displacement in the field.
inline Image flow_to_color(const FlowField& flow, double max_radius = 0.0) {
  const auto wheel = detail::color_wheel();
  const double ncols = static_cast<double>(wheel.size());
  if (max_radius <= 0.0) {
    for (std::size_t i = 0; i < flow.cells(); ++i)
      max_radius = std::max(max_radius, std::hypot(flow.tensor()[2 * i], flow.tensor()[2 * i + 1]));
    if (max_radius <= 0.0) max_radius = 1.0;
  }
  Image img(flow.height(), flow.width(), 3);
  for (std::size_t i = 0; i < flow.cells(); ++i) {
    const double u = flow.tensor()[2 * i] / max_radius, v = flow.tensor()[2 * i + 1] / max_radius;
    const double rad = std::min(1.0, std::hypot(u, v));
    const double a = std::atan2(-v, -u) / std::numbers::pi;
    const double fk = (a + 1.0) / 2.0 * (ncols - 1.0);
    const std::size_t k0 = static_cast<std::size_t>(std::floor(fk));
    const std::size_t k1 = (k0 + 1) % wheel.size();
    const double f = fk - static_cast<double>(k0);
    for (int ch = 0; ch < 3; ++ch) {
      const double col = ((1.0 - f) * wheel[k0][ch] + f * wheel[k1][ch]) / 255.0;
      const double c = 1.0 - rad * (1.0 - col);
      img.pixels[3 * i + ch] = static_cast<std::uint8_t>(std::lround(255.0 * c));
    }
  }
  return img;
}

/// Samples `image` at p + flow(p) for every pixel p of the flow's frame,
/// i.e. brings the target image into the source frame. The flow is
/// upsampled to the image size first when needed.
inline Image warp_image(const Image& image, const FlowField& flow) {
  const FlowField dense = (flow.height() == image.height && flow.width() == image.width)
                              ? flow
                              : upsample_bilinear(flow, image.height, image.width);
  return grid_to_image(warp(image_to_grid(image), dense));
}

/// Per-location statistics of a match distribution.
inline nlohmann::json match_summary(const MatchDistribution& m) {
  const std::size_t hs = m.src_height(), ws = m.src_width();
  double mean_peak = 0.0, mean_entropy = 0.0, min_peak = 1.0;
  for (std::size_t y = 0; y < hs; ++y)
    for (std::size_t x = 0; x < ws; ++x) {
      const auto s = m.slice(y, x);
      double peak = 0.0, h = 0.0;
      for (double p : s) {
        peak = std::max(peak, p);
        if (p > 0.0) h -= p * std::log(p);
      }
      mean_peak += peak;
      mean_entropy += h;
      min_peak = std::min(min_peak, peak);
    }
  const double n = static_cast<double>(hs * ws);
  return {{"source_grid", {hs, ws}},
          {"target_grid", {m.tgt_height(), m.tgt_width()}},
          {"mean_peak_probability", mean_peak / n},
          {"min_peak_probability", min_peak},
          {"mean_entropy", mean_entropy / n}};
}

inline nlohmann::json flow_summary(const FlowField& f) {
  double mean = 0.0, peak = 0.0;
  for (std::size_t i = 0; i < f.cells(); ++i) {
    const double r = std::hypot(f.tensor()[2 * i], f.tensor()[2 * i + 1]);
    mean += r;
    peak = std::max(peak, r);
  }
  return {{"grid", {f.height(), f.width()}},
          {"mean_magnitude", f.cells() ? mean / static_cast<double>(f.cells()) : 0.0},
          {"max_magnitude", peak}};
}

}  // namespace sfnet
