// SPDX-License-Identifier: Apache-2.0
#pragma once

// Same-size, stride-1 2-D cross-correlation on (y, x, channel) grids.
// Weights are stored (ky, kx, in, out).

#include <cstddef>
#include <stdexcept>
#include <string>

#include "sfnet/tensor.hpp"

namespace sfnet {

enum class Padding { Zero, Replicate };

inline void check_conv_shapes(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() != 3 || weight.rank() != 4 || bias.rank() != 1)
    throw std::invalid_argument("conv2d: expected input (h,w,c), weight (k,k,in,out), bias (out)");
  if (weight.dim(0) != weight.dim(1) || weight.dim(0) % 2 == 0)
    throw std::invalid_argument("conv2d: kernel must be square with odd size");
  if (weight.dim(2) != input.dim(2))
    throw std::invalid_argument("conv2d: depth mismatch, input has " + std::to_string(input.dim(2)) +
                                " channels, kernel expects " + std::to_string(weight.dim(2)));
  if (bias.dim(0) != weight.dim(3)) throw std::invalid_argument("conv2d: bias size mismatch");
}

inline Tensor conv2d_forward(const Tensor& input, const Tensor& weight, const Tensor& bias,
                             Padding padding = Padding::Zero) {
  check_conv_shapes(input, weight, bias);
  const long h = static_cast<long>(input.dim(0)), w = static_cast<long>(input.dim(1));
  const std::size_t cin = input.dim(2), cout = weight.dim(3);
  const long k = static_cast<long>(weight.dim(0)), r = k / 2;
  Tensor out(Shape{input.dim(0), input.dim(1), cout});
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double* o = &out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), 0);
      for (std::size_t c = 0; c < cout; ++c) o[c] = bias[c];
      for (long ky = 0; ky < k; ++ky) {
        long sy = y + ky - r;
        if (sy < 0 || sy >= h) {
          if (padding == Padding::Zero) continue;
          sy = std::clamp(sy, 0L, h - 1);
        }
        for (long kx = 0; kx < k; ++kx) {
          long sx = x + kx - r;
          if (sx < 0 || sx >= w) {
            if (padding == Padding::Zero) continue;
            sx = std::clamp(sx, 0L, w - 1);
          }
          const double* in = &input.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), 0);
          const double* wt = &weight.at(static_cast<std::size_t>(ky), static_cast<std::size_t>(kx), 0, 0);
          for (std::size_t i = 0; i < cin; ++i) {
            const double v = in[i];
            const double* wrow = wt + i * cout;
            for (std::size_t c = 0; c < cout; ++c) o[c] += v * wrow[c];
          }
        }
      }
    }
  return out;
}

/// Accumulates gradients of a zero-padded conv2d. Any target may be null.
inline void conv2d_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out, Tensor* grad_input,
                            Tensor* grad_weight, Tensor* grad_bias) {
  const long h = static_cast<long>(input.dim(0)), w = static_cast<long>(input.dim(1));
  const std::size_t cin = input.dim(2), cout = weight.dim(3);
  const long k = static_cast<long>(weight.dim(0)), r = k / 2;
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      const double* go = &grad_out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), 0);
      if (grad_bias)
        for (std::size_t c = 0; c < cout; ++c) (*grad_bias)[c] += go[c];
      for (long ky = 0; ky < k; ++ky) {
        const long sy = y + ky - r;
        if (sy < 0 || sy >= h) continue;
        for (long kx = 0; kx < k; ++kx) {
          const long sx = x + kx - r;
          if (sx < 0 || sx >= w) continue;
          const auto uy = static_cast<std::size_t>(sy), ux = static_cast<std::size_t>(sx);
          const auto uky = static_cast<std::size_t>(ky), ukx = static_cast<std::size_t>(kx);
          const double* in = &input.at(uy, ux, 0);
          const double* wt = &weight.at(uky, ukx, 0, 0);
          for (std::size_t i = 0; i < cin; ++i) {
            const double* wrow = wt + i * cout;
            if (grad_input) {
              double s = 0.0;
              for (std::size_t c = 0; c < cout; ++c) s += wrow[c] * go[c];
              grad_input->at(uy, ux, i) += s;
            }
            if (grad_weight) {
              double* gw = &grad_weight->at(uky, ukx, i, 0);
              for (std::size_t c = 0; c < cout; ++c) gw[c] += in[i] * go[c];
            }
          }
        }
      }
    }
}

/// Non-overlapping average pooling by an integer factor.
inline Tensor avg_pool(const Tensor& input, std::size_t factor) {
  const std::size_t h = input.dim(0), w = input.dim(1), d = input.dim(2);
  if (factor == 0 || h % factor || w % factor)
    throw std::invalid_argument("avg_pool: extent not divisible by " + std::to_string(factor));
  Tensor out(Shape{h / factor, w / factor, d});
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < d; ++c) out.at(y / factor, x / factor, c) += input.at(y, x, c) * inv;
  return out;
}

}  // namespace sfnet
