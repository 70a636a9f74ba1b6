// SPDX-License-Identifier: Apache-2.0
#pragma once

// Differentiable grid and matching operations recorded on an ad::Tape.
// Forward values reuse the plain kernels in grid.hpp, conv.hpp and
// matching.hpp.

#include <cmath>
#include <cstddef>
#include <stdexcept>

#include "sfnet/autodiff.hpp"
#include "sfnet/conv.hpp"
#include "sfnet/grid.hpp"
#include "sfnet/matching.hpp"

namespace sfnet::ad {

/// Zero-padded same-size convolution.
inline Var conv2d(const Var& input, const Var& weight, const Var& bias) {
  Tape& t = detail::same_tape(input, weight);
  Tensor out = conv2d_forward(input.value(), weight.value(), bias.value(), Padding::Zero);
  return t.record(std::move(out), {input, weight, bias}, [input, weight, bias](Tape& tape, const Tensor& g) {
    conv2d_backward(input.value(), weight.value(), g, tape.grad_target(input), tape.grad_target(weight),
                    tape.grad_target(bias));
  });
}

/// Per-channel normalization with fixed statistics followed by a learned
/// scale and shift: gamma * (x - mean) / sqrt(var + eps) + beta.
/// The statistics are constants for differentiation.
inline Var batch_norm(const Var& x, const Tensor& mean, const Tensor& var, double eps, const Var& gamma,
                      const Var& beta) {
  Tape& t = detail::same_tape(x, gamma);
  const std::size_t d = x.value().dim(2);
  if (mean.size() != d || var.size() != d || gamma.value().size() != d || beta.value().size() != d)
    throw std::invalid_argument("batch_norm: per-channel parameter size mismatch");
  std::vector<double> inv(d);
  for (std::size_t c = 0; c < d; ++c) inv[c] = 1.0 / std::sqrt(var[c] + eps);
  Tensor xhat = x.value();
  for (std::size_t i = 0; i < xhat.size(); ++i) xhat[i] = (xhat[i] - mean[i % d]) * inv[i % d];
  Tensor out = xhat;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gamma.value()[i % d] * out[i] + beta.value()[i % d];
  return t.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, inv, xhat = std::move(xhat), d](Tape& tape, const Tensor& g) {
                    if (Tensor* gx = tape.grad_target(x))
                      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * gamma.value()[i % d] * inv[i % d];
                    if (Tensor* gg = tape.grad_target(gamma))
                      for (std::size_t i = 0; i < g.size(); ++i) (*gg)[i % d] += g[i] * xhat[i];
                    if (Tensor* gb = tape.grad_target(beta))
                      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % d] += g[i];
                  });
}

/// x(y, x, c) * mask(y, x) for every channel c.
inline Var mul_channels(const Var& x, const Var& mask) {
  Tape& t = detail::same_tape(x, mask);
  const Tensor& xv = x.value();
  const Tensor& mv = mask.value();
  if (xv.rank() != 3 || mv.rank() != 3 || mv.dim(2) != 1 || xv.dim(0) != mv.dim(0) || xv.dim(1) != mv.dim(1))
    throw std::invalid_argument("mul_channels: expected (h,w,d) and (h,w,1) with equal extent");
  const std::size_t d = xv.dim(2);
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mv[i / d];
  return t.record(std::move(out), {x, mask}, [x, mask, d](Tape& tape, const Tensor& g) {
    if (Tensor* gx = tape.grad_target(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * mask.value()[i / d];
    if (Tensor* gm = tape.grad_target(mask))
      for (std::size_t i = 0; i < g.size(); ++i) (*gm)[i / d] += g[i] * x.value()[i];
  });
}

namespace detail {

// VJP of v / max(||v||, eps) for contiguous groups of `len` values.
inline void normalize_groups_backward(const Tensor& in, const Tensor& out, const Tensor& g, Tensor& gin,
                                      std::size_t len, double eps) {
  for (std::size_t s = 0; s < in.size(); s += len) {
    double ss = 0.0;
    for (std::size_t i = s; i < s + len; ++i) ss += in[i] * in[i];
    const double norm = std::sqrt(ss);
    if (norm <= eps) {
      for (std::size_t i = s; i < s + len; ++i) gin[i] += g[i] / eps;
      continue;
    }
    double dot = 0.0;
    for (std::size_t i = s; i < s + len; ++i) dot += g[i] * out[i];
    for (std::size_t i = s; i < s + len; ++i) gin[i] += (g[i] - out[i] * dot) / norm;
  }
}

inline Tensor normalize_groups(const Tensor& in, std::size_t len, double eps) {
  Tensor out = in;
  for (std::size_t s = 0; s < in.size(); s += len) {
    const double scale = slice_norm_scale(in.data().subspan(s, len), eps);
    for (std::size_t i = s; i < s + len; ++i) out[i] *= scale;
  }
  return out;
}

}  // namespace detail

/// L2 normalization of each location's channel vector.
inline Var normalize_features(const Var& x, double eps = kDefaultEpsilon) {
  const std::size_t d = x.value().dim(2);
  Tensor out = detail::normalize_groups(x.value(), d, eps);
  return x.tape()->record(std::move(out), {x}, [x, d, eps](Tape& tape, const Tensor& g) {
    if (Tensor* gx = tape.grad_target(x)) {
      const Tensor out = detail::normalize_groups(x.value(), d, eps);
      detail::normalize_groups_backward(x.value(), out, g, *gx, d, eps);
    }
  });
}

/// c(p, q) = <source(p), target(q)> as a (hs, ws, ht, wt) tensor.
inline Var correlate(const Var& source, const Var& target) {
  Tape& t = detail::same_tape(source, target);
  const CorrelationTensor c = sfnet::correlate(FeatureGrid(source.value()), FeatureGrid(target.value()));
  return t.record(c.tensor(), {source, target}, [source, target](Tape& tape, const Tensor& g) {
    const Tensor& fs = source.value();
    const Tensor& ft = target.value();
    const std::size_t d = fs.dim(2);
    const std::size_t ns = fs.dim(0) * fs.dim(1), nt = ft.dim(0) * ft.dim(1);
    Tensor* gs = tape.grad_target(source);
    Tensor* gt = tape.grad_target(target);
    for (std::size_t p = 0; p < ns; ++p)
      for (std::size_t q = 0; q < nt; ++q) {
        const double gpq = g[p * nt + q];
        if (gpq == 0.0) continue;
        if (gs)
          for (std::size_t k = 0; k < d; ++k) (*gs)[p * d + k] += gpq * ft[q * d + k];
        if (gt)
          for (std::size_t k = 0; k < d; ++k) (*gt)[q * d + k] += gpq * fs[p * d + k];
      }
  });
}

inline Var resize_bilinear(const Var& x, std::size_t new_height, std::size_t new_width) {
  Tensor out = sfnet::resize_bilinear(x.value(), new_height, new_width);
  return x.tape()->record(std::move(out), {x}, [x](Tape& tape, const Tensor& g) {
    if (Tensor* gx = tape.grad_target(x)) *gx += resize_bilinear_adjoint(g, x.value().dim(0), x.value().dim(1));
  });
}

/// L2 normalization of every (q_y, q_x) slice of a correlation tensor.
inline Var normalize_slices(const Var& c, double eps = kDefaultEpsilon) {
  const std::size_t len = c.value().dim(2) * c.value().dim(3);
  Tensor out = detail::normalize_groups(c.value(), len, eps);
  return c.tape()->record(out, {c}, [c, len, eps, out](Tape& tape, const Tensor& g) {
    if (Tensor* gc = tape.grad_target(c)) detail::normalize_groups_backward(c.value(), out, g, *gc, len, eps);
  });
}

/// Softmax over each (q_y, q_x) slice.
inline Var softmax_slices(const Var& z) {
  const std::size_t len = z.value().dim(2) * z.value().dim(3);
  Tensor m(z.value().shape());
  const std::vector<double> ones(len, 1.0);
  for (std::size_t s = 0; s < m.size(); s += len)
    match_distribution_into(z.value().data().subspan(s, len), ones, 1.0, m.data().subspan(s, len));
  return z.tape()->record(m, {z}, [z, len, m](Tape& tape, const Tensor& g) {
    Tensor* gz = tape.grad_target(z);
    if (!gz) return;
    for (std::size_t s = 0; s < m.size(); s += len) {
      double dot = 0.0;
      for (std::size_t i = s; i < s + len; ++i) dot += g[i] * m[i];
      for (std::size_t i = s; i < s + len; ++i) (*gz)[i] += m[i] * (g[i] - dot);
    }
  });
}

/// Flow phi(p) - p from per-slice distributions over target coordinates.
inline Var expected_flow(const Var& m) {
  const Tensor& mv = m.value();
  const std::size_t hs = mv.dim(0), ws = mv.dim(1), wt = mv.dim(3), len = mv.dim(2) * wt;
  Tensor out(Shape{hs, ws, 2});
  for (std::size_t py = 0; py < hs; ++py)
    for (std::size_t px = 0; px < ws; ++px) {
      const GridCoord phi = expected_coordinate(mv.data().subspan((py * ws + px) * len, len), wt);
      out.at(py, px, 0) = phi.x - static_cast<double>(px);
      out.at(py, px, 1) = phi.y - static_cast<double>(py);
    }
  return m.tape()->record(std::move(out), {m}, [m, len, wt](Tape& tape, const Tensor& g) {
    Tensor* gm = tape.grad_target(m);
    if (!gm) return;
    for (std::size_t p = 0; p * len < gm->size(); ++p) {
      const double gx = g[2 * p], gy = g[2 * p + 1];
      for (std::size_t i = 0; i < len; ++i)
        (*gm)[p * len + i] += gx * static_cast<double>(i % wt) + gy * static_cast<double>(i / wt);
    }
  });
}

/// output(p) = field(p + flow(p)); gradients reach both the field and the flow.
inline Var warp(const Var& field, const Var& flow) {
  Tape& t = detail::same_tape(field, flow);
  const Tensor& fv = field.value();
  const Tensor& wv = flow.value();
  if (wv.rank() != 3 || wv.dim(2) != 2 || fv.rank() != 3 || fv.dim(0) != wv.dim(0) || fv.dim(1) != wv.dim(1))
    throw std::invalid_argument("warp: field and flow must share height and width");
  Tensor out = sfnet::warp(Grid(fv), FlowField(wv)).tensor();
  return t.record(std::move(out), {field, flow}, [field, flow](Tape& tape, const Tensor& g) {
    warp_backward(field.value(), flow.value(), g, tape.grad_target(field), tape.grad_target(flow));
  });
}

enum class Axis { X, Y };

/// Forward difference along one spatial axis, zero on the last column/row.
inline Var forward_diff(const Var& x, Axis axis) {
  const Tensor& v = x.value();
  const std::size_t h = v.dim(0), w = v.dim(1), d = v.dim(2);
  Tensor out(v.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t i = 0; i < w; ++i) {
      const bool last = axis == Axis::X ? i + 1 == w : y + 1 == h;
      if (last) continue;
      const std::size_t ny = axis == Axis::X ? y : y + 1, nx = axis == Axis::X ? i + 1 : i;
      for (std::size_t c = 0; c < d; ++c) out.at(y, i, c) = v.at(ny, nx, c) - v.at(y, i, c);
    }
  return x.tape()->record(std::move(out), {x}, [x, axis](Tape& tape, const Tensor& g) {
    Tensor* gx = tape.grad_target(x);
    if (!gx) return;
    const std::size_t h = g.dim(0), w = g.dim(1), d = g.dim(2);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t i = 0; i < w; ++i) {
        const bool last = axis == Axis::X ? i + 1 == w : y + 1 == h;
        if (last) continue;
        const std::size_t ny = axis == Axis::X ? y : y + 1, nx = axis == Axis::X ? i + 1 : i;
        for (std::size_t c = 0; c < d; ++c) {
          gx->at(ny, nx, c) += g.at(y, i, c);
          gx->at(y, i, c) -= g.at(y, i, c);
        }
      }
  });
}

struct SoftMatch {
  Var flow;          // (hs, ws, 2)
  Var distribution;  // (hs, ws, ht, wt)
};

/// Differentiable soft / kernel soft argmax. The kernel centers come from
/// the discrete argmax of a stop-gradient copy of the normalized slices,
/// so no gradient flows through the center selection.
inline SoftMatch soft_argmax(const Var& correlation, const MatchParams& params, bool use_kernel) {
  params.validate();
  Tape& t = *correlation.tape();
  Var n = normalize_slices(correlation, params.epsilon);
  Var logits;
  if (use_kernel) {
    const Var centers_from = stop_gradient(n);
    const Tensor& nv = centers_from.value();
    const std::size_t ht = nv.dim(2), wt = nv.dim(3), len = ht * wt;
    Tensor kernel(nv.shape());
    for (std::size_t s = 0; s < nv.size(); s += len) {
      const Tensor k = gaussian_kernel(hard_argmax(nv.data().subspan(s, len), wt), ht, wt, params.sigma);
      std::copy(k.data().begin(), k.data().end(), kernel.data().begin() + static_cast<std::ptrdiff_t>(s));
    }
    logits = scale(mul(n, t.constant(std::move(kernel))), params.beta);
  } else {
    logits = scale(n, params.beta);
  }
  Var m = softmax_slices(logits);
  return {expected_flow(m), m};
}

inline SoftMatch kernel_soft_argmax(const Var& correlation, const MatchParams& params) {
  return soft_argmax(correlation, params, true);
}

}  // namespace sfnet::ad
