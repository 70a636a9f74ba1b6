// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense matching: correlation volumes and the three argmax operators that
// turn them into flow fields (hard, soft, kernel soft).

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "sfnet/grid.hpp"

namespace sfnet {

inline constexpr double kDefaultEpsilon = 1e-8;

struct MatchParams {
  double beta = 50.0;   // softmax temperature
  double sigma = 5.0;   // Gaussian kernel std, grid units
  double epsilon = kDefaultEpsilon;

  void validate() const {
    if (!(beta > 0.0) || !(sigma > 0.0) || !(epsilon > 0.0) || !std::isfinite(beta) || !std::isfinite(sigma))
      throw std::invalid_argument("match params: beta, sigma and epsilon must be positive and finite");
  }
};

enum class ArgmaxMode { Hard, Soft, Kernel };

inline std::string_view to_string(ArgmaxMode m) {
  switch (m) {
    case ArgmaxMode::Hard: return "hard";
    case ArgmaxMode::Soft: return "soft";
    case ArgmaxMode::Kernel: return "kernel";
  }
  return "kernel";
}

inline ArgmaxMode parse_argmax_mode(std::string_view s) {
  if (s == "hard" || s == "H") return ArgmaxMode::Hard;
  if (s == "soft" || s == "S") return ArgmaxMode::Soft;
  if (s == "kernel" || s == "KS") return ArgmaxMode::Kernel;
  throw std::invalid_argument("unknown argmax mode '" + std::string(s) + "' (expected hard|soft|kernel)");
}

/// Scores c(p, q) stored (p_y, p_x, q_y, q_x).
class CorrelationTensor {
 public:
  CorrelationTensor() = default;
  CorrelationTensor(std::size_t src_h, std::size_t src_w, std::size_t tgt_h, std::size_t tgt_w, double fill = 0.0)
      : t_(Shape{src_h, src_w, tgt_h, tgt_w}, fill) {}
  explicit CorrelationTensor(Tensor t) : t_(std::move(t)) {
    if (t_.rank() != 4) throw std::invalid_argument("correlation tensor must have rank 4");
  }

  std::size_t src_height() const { return t_.dim(0); }
  std::size_t src_width() const { return t_.dim(1); }
  std::size_t tgt_height() const { return t_.dim(2); }
  std::size_t tgt_width() const { return t_.dim(3); }
  std::size_t slice_size() const { return tgt_height() * tgt_width(); }

  double& at(std::size_t py, std::size_t px, std::size_t qy, std::size_t qx) { return t_.at(py, px, qy, qx); }
  double at(std::size_t py, std::size_t px, std::size_t qy, std::size_t qx) const { return t_.at(py, px, qy, qx); }

  std::span<const double> slice(std::size_t py, std::size_t px) const {
    return t_.data().subspan((py * src_width() + px) * slice_size(), slice_size());
  }
  std::span<double> slice(std::size_t py, std::size_t px) {
    return t_.data().subspan((py * src_width() + px) * slice_size(), slice_size());
  }
  /// The (p_y, p_x) slice as a tgt_height x tgt_width map.
  Tensor slice_map(std::size_t py, std::size_t px) const {
    auto s = slice(py, px);
    return Tensor(Shape{tgt_height(), tgt_width()}, std::vector<double>(s.begin(), s.end()));
  }

  const Tensor& tensor() const { return t_; }
  Tensor& tensor() { return t_; }

 private:
  Tensor t_;
};

/// Per-source-location probability maps, same layout as CorrelationTensor.
using MatchDistribution = CorrelationTensor;

/// Divides each location's channel vector by max(||v||_2, epsilon).
inline FeatureGrid normalize_features(const FeatureGrid& grid, double epsilon = kDefaultEpsilon) {
  FeatureGrid out = grid;
  const std::size_t d = grid.depth();
  auto data = out.tensor().data();
  for (std::size_t i = 0; i < grid.cells(); ++i) {
    auto v = data.subspan(i * d, d);
    double ss = 0.0;
    for (double x : v) ss += x * x;
    const double denom = std::max(std::sqrt(ss), epsilon);
    for (double& x : v) x /= denom;
  }
  return out;
}

/// c(p, q) = <source(p), target(q)>.
inline CorrelationTensor correlate(const FeatureGrid& source, const FeatureGrid& target) {
  if (source.depth() != target.depth())
    throw std::invalid_argument("correlate: depth mismatch " + std::to_string(source.depth()) + " vs " +
                                std::to_string(target.depth()));
  const std::size_t d = source.depth();
  const std::size_t ns = source.cells(), nt = target.cells();
  CorrelationTensor c(source.height(), source.width(), target.height(), target.width());
  const auto fs = source.tensor().data();
  const auto ft = target.tensor().data();
  auto out = c.tensor().data();
  for (std::size_t p = 0; p < ns; ++p) {
    const double* a = &fs[p * d];
    for (std::size_t q = 0; q < nt; ++q) {
      const double* b = &ft[q * d];
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += a[k] * b[k];
      out[p * nt + q] = s;
    }
  }
  return c;
}

inline CorrelationTensor fuse_correlations(const CorrelationTensor& a, const CorrelationTensor& b) {
  a.tensor().require_same_shape(b.tensor(), "fuse_correlations");
  CorrelationTensor out = a;
  auto o = out.tensor().data();
  const auto bv = b.tensor().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return out;
}

/// Scale applied to a slice by L2 normalization: 1 / max(||slice||, eps).
inline double slice_norm_scale(std::span<const double> slice, double epsilon) {
  double ss = 0.0;
  for (double v : slice) ss += v * v;
  return 1.0 / std::max(std::sqrt(ss), epsilon);
}

inline Tensor normalize_correlation_slice(const CorrelationTensor& c, GridCoord p, double epsilon = kDefaultEpsilon) {
  if (p.x < 0 || p.y < 0 || p.x != std::floor(p.x) || p.y != std::floor(p.y) ||
      static_cast<std::size_t>(p.x) >= c.src_width() || static_cast<std::size_t>(p.y) >= c.src_height())
    throw std::invalid_argument("normalize_correlation_slice: p must be an in-bounds integer location");
  Tensor n = c.slice_map(static_cast<std::size_t>(p.y), static_cast<std::size_t>(p.x));
  const double s = slice_norm_scale(n.data(), epsilon);
  for (double& v : n.data()) v *= s;
  return n;
}

/// Row-major first maximum (ties go to the smallest y, then smallest x).
inline GridCoord hard_argmax(const Tensor& map) {
  if (map.empty()) throw std::invalid_argument("hard_argmax: empty map");
  const std::size_t w = map.dim(map.rank() - 1);
  std::size_t best = 0;
  for (std::size_t i = 1; i < map.size(); ++i)
    if (map[i] > map[best]) best = i;
  return {static_cast<double>(best % w), static_cast<double>(best / w)};
}

inline GridCoord hard_argmax(std::span<const double> map, std::size_t width) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < map.size(); ++i)
    if (map[i] > map[best]) best = i;
  return {static_cast<double>(best % width), static_cast<double>(best / width)};
}

/// Unnormalized Gaussian with peak 1 at `center`.
inline Tensor gaussian_kernel(GridCoord center, std::size_t height, std::size_t width, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be positive");
  Tensor k(Shape{height, width});
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double dx = static_cast<double>(x) - center.x;
      const double dy = static_cast<double>(y) - center.y;
      k.at(y, x) = std::exp(-(dx * dx + dy * dy) * inv);
    }
  return k;
}

/// Softmax of beta * kernel * scores with max subtraction. Writes into `out`.
inline void match_distribution_into(std::span<const double> scores, std::span<const double> kernel, double beta,
                                    std::span<double> out) {
  double zmax = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = beta * kernel[i] * scores[i];
    zmax = std::max(zmax, out[i]);
  }
  double sum = 0.0;
  for (double& v : out) {
    v = std::exp(v - zmax);
    sum += v;
  }
  for (double& v : out) v /= sum;
}

inline Tensor match_distribution(const Tensor& scores, const Tensor& kernel, double beta) {
  scores.require_same_shape(kernel, "match_distribution");
  if (!(beta > 0.0)) throw std::invalid_argument("match_distribution: beta must be positive");
  Tensor m(scores.shape());
  match_distribution_into(scores.data(), kernel.data(), beta, m.data());
  return m;
}

/// sum_q m(q) * q over a tgt_height x tgt_width map.
inline GridCoord expected_coordinate(std::span<const double> m, std::size_t width) {
  GridCoord phi;
  for (std::size_t i = 0; i < m.size(); ++i) {
    phi.x += m[i] * static_cast<double>(i % width);
    phi.y += m[i] * static_cast<double>(i / width);
  }
  return phi;
}

struct MatchResult {
  FlowField flow;
  MatchDistribution distribution;
};

namespace detail {

// Shared driver for soft and kernel soft argmax.
inline MatchResult soft_match(const CorrelationTensor& c, const MatchParams& params, bool use_kernel) {
  params.validate();
  const std::size_t hs = c.src_height(), ws = c.src_width(), ht = c.tgt_height(), wt = c.tgt_width();
  MatchResult r{FlowField(hs, ws), MatchDistribution(hs, ws, ht, wt)};
  std::vector<double> n(ht * wt);
  const std::vector<double> ones(ht * wt, 1.0);
  for (std::size_t py = 0; py < hs; ++py)
    for (std::size_t px = 0; px < ws; ++px) {
      const auto slice = c.slice(py, px);
      const double s = slice_norm_scale(slice, params.epsilon);
      for (std::size_t i = 0; i < n.size(); ++i) n[i] = slice[i] * s;
      auto m = r.distribution.slice(py, px);
      if (use_kernel) {
        const Tensor k = gaussian_kernel(hard_argmax(n, wt), ht, wt, params.sigma);
        match_distribution_into(n, k.data(), params.beta, m);
      } else {
        match_distribution_into(n, ones, params.beta, m);
      }
      const GridCoord phi = expected_coordinate(m, wt);
      r.flow.dx(py, px) = phi.x - static_cast<double>(px);
      r.flow.dy(py, px) = phi.y - static_cast<double>(py);
    }
  return r;
}

}  // namespace detail

/// Kernel soft argmax: per source location, the Gaussian-gated softmax
/// expectation of target coordinates. The kernel center comes from the
/// discrete argmax of the normalized slice.
inline MatchResult kernel_soft_argmax(const CorrelationTensor& c, const MatchParams& params = {}) {
  return detail::soft_match(c, params, true);
}

inline MatchResult soft_argmax_match(const CorrelationTensor& c, double beta) {
  MatchParams p;
  p.beta = beta;
  return detail::soft_match(c, p, false);
}

inline FlowField soft_argmax(const CorrelationTensor& c, double beta) { return soft_argmax_match(c, beta).flow; }

/// Discrete argmax flow. Not differentiable.
inline FlowField hard_flow(const CorrelationTensor& c, double epsilon = kDefaultEpsilon) {
  FlowField f(c.src_height(), c.src_width());
  std::vector<double> n(c.slice_size());
  for (std::size_t py = 0; py < c.src_height(); ++py)
    for (std::size_t px = 0; px < c.src_width(); ++px) {
      const auto slice = c.slice(py, px);
      const double s = slice_norm_scale(slice, epsilon);
      for (std::size_t i = 0; i < n.size(); ++i) n[i] = slice[i] * s;
      const GridCoord q = hard_argmax(n, c.tgt_width());
      f.dx(py, px) = q.x - static_cast<double>(px);
      f.dy(py, px) = q.y - static_cast<double>(py);
    }
  return f;
}

inline FlowField compute_flow(const CorrelationTensor& c, ArgmaxMode mode, const MatchParams& params = {}) {
  switch (mode) {
    case ArgmaxMode::Hard: return hard_flow(c, params.epsilon);
    case ArgmaxMode::Soft: return detail::soft_match(c, params, false).flow;
    case ArgmaxMode::Kernel: return detail::soft_match(c, params, true).flow;
  }
  throw std::logic_error("unreachable");
}

/// Hand-derived vector-Jacobian product of phi(p) w.r.t. one raw slice c_p,
/// with the kernel held fixed. `grad_phi` is d(loss)/d(phi). Used to
/// cross-check the generic reverse-mode path.
inline std::vector<double> soft_argmax_slice_vjp(std::span<const double> slice, std::span<const double> kernel,
                                                 std::size_t width, double beta, double epsilon, GridCoord grad_phi) {
  const std::size_t n_entries = slice.size();
  double ss = 0.0;
  for (double v : slice) ss += v * v;
  const double norm = std::sqrt(ss);
  const bool guarded = norm <= epsilon;
  const double scale = 1.0 / std::max(norm, epsilon);
  std::vector<double> n(n_entries), m(n_entries), gn(n_entries), gc(n_entries);
  for (std::size_t i = 0; i < n_entries; ++i) n[i] = slice[i] * scale;
  match_distribution_into(n, kernel, beta, m);
  const GridCoord phi = expected_coordinate(m, width);
  for (std::size_t i = 0; i < n_entries; ++i) {
    const double qx = static_cast<double>(i % width), qy = static_cast<double>(i / width);
    const double gz = m[i] * ((qx - phi.x) * grad_phi.x + (qy - phi.y) * grad_phi.y);
    gn[i] = beta * kernel[i] * gz;
  }
  if (guarded) {
    for (std::size_t i = 0; i < n_entries; ++i) gc[i] = gn[i] * scale;
    return gc;
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < n_entries; ++i) dot += gn[i] * n[i];
  for (std::size_t i = 0; i < n_entries; ++i) gc[i] = (gn[i] - n[i] * dot) * scale;
  return gc;
}

}  // namespace sfnet
