// SPDX-License-Identifier: Apache-2.0
#pragma once

// Grid containers and the bilinear sampling primitives everything else is
// built on.
//
// Coordinates: x is the column, y is the row, both zero-based and real-valued.
// Integer coordinates address cell centers and (0, 0) is the top-left cell.
// Sampling outside the grid reads zeros (zero padding, never clamping).

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "sfnet/tensor.hpp"

namespace sfnet {

struct GridCoord {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const GridCoord&, const GridCoord&) = default;
};

/// h x w x d block of doubles stored (y, x, channel) row-major.
class Grid {
 public:
  Grid() = default;
  Grid(std::size_t height, std::size_t width, std::size_t depth, double fill = 0.0)
      : t_(Shape{height, width, depth}, fill) {}
  explicit Grid(Tensor t) : t_(std::move(t)) {
    if (t_.rank() != 3) throw std::invalid_argument("grid tensor must have rank 3, got " + shape_string(t_.shape()));
  }

  std::size_t height() const { return t_.rank() == 0 ? 0 : t_.dim(0); }
  std::size_t width() const { return t_.rank() == 0 ? 0 : t_.dim(1); }
  std::size_t depth() const { return t_.rank() == 0 ? 0 : t_.dim(2); }
  std::size_t cells() const { return height() * width(); }
  bool empty() const { return t_.empty(); }

  double& at(std::size_t y, std::size_t x, std::size_t c) { return t_.at(y, x, c); }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return t_.at(y, x, c); }

  const Tensor& tensor() const { return t_; }
  Tensor& tensor() { return t_; }

  bool same_extent(const Grid& other) const {
    return height() == other.height() && width() == other.width();
  }

 protected:
  Tensor t_;
};

class FeatureGrid : public Grid {
 public:
  using Grid::Grid;
};

class BinaryMask : public Grid {
 public:
  BinaryMask() = default;
  BinaryMask(std::size_t height, std::size_t width, double fill = 0.0) : Grid(height, width, 1, fill) {}
  explicit BinaryMask(Tensor t) : Grid(std::move(t)) {
    if (depth() != 1) throw std::invalid_argument("mask must have depth 1");
  }
  double& at(std::size_t y, std::size_t x) { return t_.at(y, x, 0); }
  double at(std::size_t y, std::size_t x) const { return t_.at(y, x, 0); }
  using Grid::at;

  double sum() const {
    double s = 0.0;
    for (double v : t_.data()) s += v;
    return s;
  }
};

/// Per-cell displacement in grid units; channel 0 is dx, channel 1 is dy.
class FlowField : public Grid {
 public:
  FlowField() = default;
  FlowField(std::size_t height, std::size_t width, double fill = 0.0) : Grid(height, width, 2, fill) {}
  explicit FlowField(Tensor t) : Grid(std::move(t)) {
    if (depth() != 2) throw std::invalid_argument("flow must have depth 2");
  }
  double& dx(std::size_t y, std::size_t x) { return t_.at(y, x, 0); }
  double dx(std::size_t y, std::size_t x) const { return t_.at(y, x, 0); }
  double& dy(std::size_t y, std::size_t x) { return t_.at(y, x, 1); }
  double dy(std::size_t y, std::size_t x) const { return t_.at(y, x, 1); }

  static FlowField uniform(std::size_t height, std::size_t width, double dx, double dy) {
    FlowField f(height, width);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        f.dx(y, x) = dx;
        f.dy(y, x) = dy;
      }
    return f;
  }
};

/// The (up to) four cells contributing to a bilinear sample, with their
/// interpolation weights and the weights of the coordinate derivatives.
/// Cells outside the grid are dropped (valid == false).
struct BilinearTaps {
  struct Tap {
    std::size_t y = 0, x = 0;
    double w = 0.0;    // interpolation weight
    double wdx = 0.0;  // d(weight)/dx
    double wdy = 0.0;  // d(weight)/dy
    bool valid = false;
  };
  std::array<Tap, 4> taps{};

  static BilinearTaps at(GridCoord c, std::size_t height, std::size_t width) {
    if (!std::isfinite(c.x) || !std::isfinite(c.y))
      throw std::domain_error("bilinear sample at non-finite coordinate");
    BilinearTaps out;
    const auto h = static_cast<double>(height);
    const auto w = static_cast<double>(width);
    if (c.x <= -1.0 || c.y <= -1.0 || c.x >= w || c.y >= h) return out;
    const double fx = std::floor(c.x);
    const double fy = std::floor(c.y);
    const double ax = c.x - fx;
    const double ay = c.y - fy;
    const auto x0 = static_cast<long long>(fx);
    const auto y0 = static_cast<long long>(fy);
    const long long xs[2] = {x0, x0 + 1};
    const long long ys[2] = {y0, y0 + 1};
    const double wxs[2] = {1.0 - ax, ax};
    const double wys[2] = {1.0 - ay, ay};
    const double dwx[2] = {-1.0, 1.0};
    const double dwy[2] = {-1.0, 1.0};
    int k = 0;
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 2; ++i, ++k) {
        Tap& t = out.taps[k];
        t.valid = xs[i] >= 0 && ys[j] >= 0 && xs[i] < static_cast<long long>(width) &&
                  ys[j] < static_cast<long long>(height);
        if (!t.valid) continue;
        t.x = static_cast<std::size_t>(xs[i]);
        t.y = static_cast<std::size_t>(ys[j]);
        t.w = wxs[i] * wys[j];
        t.wdx = dwx[i] * wys[j];
        t.wdy = wxs[i] * dwy[j];
      }
    return out;
  }
};

/// Samples every channel of `field` at `at` into `out` (size == depth).
inline void bilinear_sample_into(const Grid& field, GridCoord at, std::span<double> out) {
  if (field.empty()) throw std::invalid_argument("bilinear sample on empty grid");
  const auto taps = BilinearTaps::at(at, field.height(), field.width());
  const std::size_t d = field.depth();
  std::fill(out.begin(), out.end(), 0.0);
  for (const auto& t : taps.taps) {
    if (!t.valid || t.w == 0.0) continue;
    for (std::size_t c = 0; c < d; ++c) out[c] += t.w * field.at(t.y, t.x, c);
  }
}

inline std::vector<double> bilinear_sample(const FeatureGrid& field, GridCoord at) {
  std::vector<double> out(field.depth());
  bilinear_sample_into(field, at, out);
  return out;
}

inline double bilinear_sample(const BinaryMask& field, GridCoord at) {
  double v = 0.0;
  bilinear_sample_into(field, at, std::span<double>(&v, 1));
  return v;
}

/// Returns the sampled displacement (dx, dy) packed as a GridCoord.
inline GridCoord bilinear_sample(const FlowField& field, GridCoord at) {
  double v[2];
  bilinear_sample_into(field, at, v);
  return {v[0], v[1]};
}

/// Closed-form derivative of one sampled channel w.r.t. the sample position.
/// At cell boundaries this is the derivative of the branch floor() selects.
inline GridCoord bilinear_sample_grad(const Grid& field, GridCoord at, std::size_t channel) {
  const auto taps = BilinearTaps::at(at, field.height(), field.width());
  GridCoord g;
  for (const auto& t : taps.taps) {
    if (!t.valid) continue;
    g.x += t.wdx * field.at(t.y, t.x, channel);
    g.y += t.wdy * field.at(t.y, t.x, channel);
  }
  return g;
}

inline void require_same_extent(const Grid& a, const Grid& b, const char* what) {
  if (!a.same_extent(b))
    throw std::invalid_argument(std::string(what) + ": grid extent mismatch " + std::to_string(a.height()) + "x" +
                                std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                                std::to_string(b.width()));
}

/// output(p) = field(p + flow(p)), bilinear with zero padding.
template <class G>
G warp(const G& field, const FlowField& flow) {
  require_same_extent(field, flow, "warp");
  const std::size_t h = field.height(), w = field.width(), d = field.depth();
  Tensor out(Shape{h, w, d});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const GridCoord at{static_cast<double>(x) + flow.dx(y, x), static_cast<double>(y) + flow.dy(y, x)};
      bilinear_sample_into(field, at, out.data().subspan((y * w + x) * d, d));
    }
  return G(std::move(out));
}

/// Vector-Jacobian product of warp: accumulates d(loss)/d(field) and
/// d(loss)/d(flow) given d(loss)/d(output). Either target may be null.
inline void warp_backward(const Tensor& field, const Tensor& flow, const Tensor& grad_out, Tensor* grad_field,
                          Tensor* grad_flow) {
  const std::size_t h = field.dim(0), w = field.dim(1), d = field.dim(2);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const GridCoord at{static_cast<double>(x) + flow.at(y, x, 0), static_cast<double>(y) + flow.at(y, x, 1)};
      const auto taps = BilinearTaps::at(at, h, w);
      double gx = 0.0, gy = 0.0;
      for (const auto& t : taps.taps) {
        if (!t.valid) continue;
        for (std::size_t c = 0; c < d; ++c) {
          const double go = grad_out.at(y, x, c);
          if (grad_field) grad_field->at(t.y, t.x, c) += t.w * go;
          gx += t.wdx * field.at(t.y, t.x, c) * go;
          gy += t.wdy * field.at(t.y, t.x, c) * go;
        }
      }
      if (grad_flow) {
        grad_flow->at(y, x, 0) += gx;
        grad_flow->at(y, x, 1) += gy;
      }
    }
}

namespace detail {

// Align-corners source position of destination index i when resizing n -> m.
inline double align_corners_src(std::size_t i, std::size_t n_src, std::size_t n_dst) {
  if (n_dst <= 1 || n_src <= 1) return 0.0;
  return static_cast<double>(i) * static_cast<double>(n_src - 1) / static_cast<double>(n_dst - 1);
}

}  // namespace detail

/// Bilinear resize of an (h, w, d) tensor; corner cell centers map onto
/// corner cell centers. Values are not rescaled.
inline Tensor resize_bilinear(const Tensor& in, std::size_t new_height, std::size_t new_width) {
  if (new_height < 1 || new_width < 1) throw std::invalid_argument("resize: target dimensions must be >= 1");
  const std::size_t h = in.dim(0), w = in.dim(1), d = in.dim(2);
  Tensor out(Shape{new_height, new_width, d});
  const Grid src(in);
  for (std::size_t y = 0; y < new_height; ++y)
    for (std::size_t x = 0; x < new_width; ++x) {
      const GridCoord at{detail::align_corners_src(x, w, new_width), detail::align_corners_src(y, h, new_height)};
      bilinear_sample_into(src, at, out.data().subspan((y * new_width + x) * d, d));
    }
  return out;
}

/// Adjoint of resize_bilinear: scatters an output gradient back onto the
/// source grid of extent (height, width).
inline Tensor resize_bilinear_adjoint(const Tensor& grad_out, std::size_t height, std::size_t width) {
  const std::size_t H = grad_out.dim(0), W = grad_out.dim(1), d = grad_out.dim(2);
  Tensor g(Shape{height, width, d});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const GridCoord at{detail::align_corners_src(x, width, W), detail::align_corners_src(y, height, H)};
      const auto taps = BilinearTaps::at(at, height, width);
      for (const auto& t : taps.taps) {
        if (!t.valid || t.w == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) g.at(t.y, t.x, c) += t.w * grad_out.at(y, x, c);
      }
    }
  return g;
}

inline FeatureGrid upsample_bilinear(const FeatureGrid& field, std::size_t new_height, std::size_t new_width) {
  return FeatureGrid(resize_bilinear(field.tensor(), new_height, new_width));
}

/// Flow resize: positions follow the align-corners rule, displacements are
/// multiplied by new_width / width and new_height / height so they stay
/// correct in the new grid units.
inline FlowField upsample_bilinear(const FlowField& field, std::size_t new_height, std::size_t new_width) {
  Tensor t = resize_bilinear(field.tensor(), new_height, new_width);
  const double sx = static_cast<double>(new_width) / static_cast<double>(field.width());
  const double sy = static_cast<double>(new_height) / static_cast<double>(field.height());
  for (std::size_t i = 0; i < t.size(); i += 2) {
    t[i] *= sx;
    t[i + 1] *= sy;
  }
  return FlowField(std::move(t));
}

/// Area-average downsampling by an integer factor followed by a 0.5
/// threshold (values >= 0.5 become foreground).
inline BinaryMask downsample_mask(const BinaryMask& mask, std::size_t factor) {
  if (factor == 0 || mask.height() % factor != 0 || mask.width() % factor != 0)
    throw std::invalid_argument("downsample_mask: extent not divisible by factor " + std::to_string(factor));
  const std::size_t h = mask.height() / factor, w = mask.width() / factor;
  BinaryMask out(h, w);
  const double area = static_cast<double>(factor * factor);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::size_t j = 0; j < factor; ++j)
        for (std::size_t i = 0; i < factor; ++i) s += mask.at(y * factor + j, x * factor + i);
      out.at(y, x) = s / area >= 0.5 ? 1.0 : 0.0;
    }
  return out;
}

inline BinaryMask threshold_mask(const BinaryMask& mask, double level = 0.5) {
  BinaryMask out = mask;
  for (double& v : out.tensor().data()) v = v >= level ? 1.0 : 0.0;
  return out;
}

}  // namespace sfnet
