// SPDX-License-Identifier: Apache-2.0
#pragma once

// Feature providers and the trainable residual adaptation blocks.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include "sfnet/conv.hpp"
#include "sfnet/io.hpp"
#include "sfnet/ops.hpp"

namespace sfnet {

struct ConvLayer {
  Tensor weight;  // (k, k, in, out)
  Tensor bias;    // (out)

  std::size_t kernel_size() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(2); }
  std::size_t out_channels() const { return weight.dim(3); }

  static ConvLayer zeros(std::size_t k, std::size_t in, std::size_t out) {
    if (k % 2 == 0) throw std::invalid_argument("conv kernel size must be odd");
    return {Tensor(Shape{k, k, in, out}), Tensor(Shape{out})};
  }

  /// He-normal weights scaled by `gain`, zero bias.
  static ConvLayer random(std::size_t k, std::size_t in, std::size_t out, std::mt19937_64& rng, double gain = 1.0) {
    ConvLayer l = zeros(k, in, out);
    std::normal_distribution<double> normal(0.0, gain * std::sqrt(2.0 / static_cast<double>(k * k * in)));
    for (double& v : l.weight.data()) v = normal(rng);
    return l;
  }
};

inline FeatureGrid conv2d(const FeatureGrid& input, const ConvLayer& layer, Padding padding = Padding::Zero) {
  return FeatureGrid(conv2d_forward(input.tensor(), layer.weight, layer.bias, padding));
}

struct NormStats {
  Tensor mean;  // (c)
  Tensor var;   // (c)
};

/// Residual block: x + relu(gamma * (conv(x) - mean) / sqrt(var + eps) + beta).
/// Zero gamma and beta make the block an exact identity.
struct AdaptationBlock {
  ConvLayer conv;
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  std::size_t channels() const { return gamma.size(); }

  /// Random conv weights, zero scale and shift (identity at initialization).
  static AdaptationBlock init(std::size_t channels, std::size_t k, std::mt19937_64& rng) {
    AdaptationBlock b;
    b.conv = ConvLayer::random(k, channels, channels, rng);
    b.gamma = Tensor(Shape{channels});
    b.beta = Tensor(Shape{channels});
    b.running_mean = Tensor(Shape{channels});
    b.running_var = Tensor(Shape{channels}, 1.0);
    return b;
  }

  NormStats running_stats() const { return {running_mean, running_var}; }

  void update_running(const NormStats& batch) {
    for (std::size_t c = 0; c < channels(); ++c) {
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * batch.mean[c];
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * batch.var[c];
    }
  }
};

/// Per-channel mean and (biased) variance of the conv branch over a batch.
inline NormStats batch_stats(const AdaptationBlock& block, const std::vector<const FeatureGrid*>& batch) {
  const std::size_t c = block.channels();
  NormStats s{Tensor(Shape{c}), Tensor(Shape{c})};
  std::size_t count = 0;
  std::vector<Tensor> outs;
  for (const FeatureGrid* g : batch) {
    outs.push_back(conv2d_forward(g->tensor(), block.conv.weight, block.conv.bias));
    for (std::size_t i = 0; i < outs.back().size(); ++i) s.mean[i % c] += outs.back()[i];
    count += g->cells();
  }
  if (count == 0) throw std::invalid_argument("batch_stats: empty batch");
  for (std::size_t k = 0; k < c; ++k) s.mean[k] /= static_cast<double>(count);
  for (const Tensor& o : outs)
    for (std::size_t i = 0; i < o.size(); ++i) {
      const double d = o[i] - s.mean[i % c];
      s.var[i % c] += d * d;
    }
  for (std::size_t k = 0; k < c; ++k) s.var[k] /= static_cast<double>(count);
  return s;
}

inline FeatureGrid adapt(const FeatureGrid& features, const AdaptationBlock& block, const NormStats& stats) {
  if (features.depth() != block.channels())
    throw std::invalid_argument("adapt: feature depth " + std::to_string(features.depth()) +
                                " does not match block channels " + std::to_string(block.channels()));
  const Tensor z = conv2d_forward(features.tensor(), block.conv.weight, block.conv.bias);
  FeatureGrid out = features;
  const std::size_t c = block.channels();
  for (std::size_t i = 0; i < z.size(); ++i) {
    const std::size_t k = i % c;
    const double pre = block.gamma[k] * (z[i] - stats.mean[k]) / std::sqrt(stats.var[k] + block.eps) + block.beta[k];
    out.tensor()[i] += std::max(pre, 0.0);
  }
  return out;
}

/// Evaluation-mode adaptation (running statistics).
inline FeatureGrid adapt(const FeatureGrid& features, const AdaptationBlock& block) {
  return adapt(features, block, block.running_stats());
}

namespace ad {

struct BlockVars {
  Var weight, bias, gamma, beta;

  static BlockVars leaves(Tape& t, const AdaptationBlock& b) {
    return {t.leaf(b.conv.weight), t.leaf(b.conv.bias), t.leaf(b.gamma), t.leaf(b.beta)};
  }
  static BlockVars constants(Tape& t, const AdaptationBlock& b) {
    return {t.constant(b.conv.weight), t.constant(b.conv.bias), t.constant(b.gamma), t.constant(b.beta)};
  }
};

inline Var adapt(const Var& features, const BlockVars& block, const NormStats& stats, double eps) {
  const Var z = conv2d(features, block.weight, block.bias);
  return add(features, relu(batch_norm(z, stats.mean, stats.var, eps, block.gamma, block.beta)));
}

}  // namespace ad

struct BackboneOutput {
  FeatureGrid fine;
  FeatureGrid coarse;
};

/// Source of per-image feature grids: a fine level and a coarse level at
/// half its resolution.
class FeatureProvider {
 public:
  virtual ~FeatureProvider() = default;
  virtual BackboneOutput extract(const Image& image) const = 0;
  virtual std::size_t fine_depth() const = 0;
  virtual std::size_t coarse_depth() const = 0;
  /// Image pixels per fine-grid cell along each axis.
  virtual std::size_t stride() const = 0;
};

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::size_t hidden = 8;
  std::size_t fine_channels = 16;
  std::size_t coarse_channels = 16;
  double bias = 0.1;
  double input_mean = 0.5;  // subtracted from [0, 1] intensities
  std::uint64_t seed = 7;
};

/// Small frozen conv/pool tower: conv-relu-pool, conv-relu-pool (fine, 1/4),
/// conv-relu-pool (coarse, 1/8). Replicate padding keeps responses to
/// constant images spatially constant.
class ToyBackbone : public FeatureProvider {
 public:
  explicit ToyBackbone(BackboneConfig config = {}) : config_(config) {
    std::mt19937_64 rng(config.seed);
    layers_.push_back(ConvLayer::random(3, config.in_channels, config.hidden, rng));
    layers_.push_back(ConvLayer::random(3, config.hidden, config.fine_channels, rng));
    layers_.push_back(ConvLayer::random(3, config.fine_channels, config.coarse_channels, rng));
    // A positive bias keeps features of black (out-of-frame) regions away
    // from the zero vector, where feature normalization is singular.
    for (auto& l : layers_) l.bias.fill(config.bias);
  }

  const BackboneConfig& config() const { return config_; }
  const std::vector<ConvLayer>& layers() const { return layers_; }

  std::size_t fine_depth() const override { return config_.fine_channels; }
  std::size_t coarse_depth() const override { return config_.coarse_channels; }
  std::size_t stride() const override { return 4; }

  BackboneOutput extract(const Image& image) const override {
    if (image.channels != config_.in_channels)
      throw std::invalid_argument("backbone expects " + std::to_string(config_.in_channels) + "-channel images, got " +
                                  std::to_string(image.channels));
    if (image.height == 0 || image.width == 0 || image.height % 8 || image.width % 8)
      throw std::invalid_argument("backbone: image extent must be a nonzero multiple of 8, got " +
                                  std::to_string(image.height) + "x" + std::to_string(image.width));
    Tensor x = image_to_grid(image).tensor();
    for (double& v : x.data()) v -= config_.input_mean;
    auto stage = [](const Tensor& in, const ConvLayer& l) {
      Tensor y = conv2d_forward(in, l.weight, l.bias, Padding::Replicate);
      for (double& v : y.data()) v = std::max(v, 0.0);
      return avg_pool(y, 2);
    };
    x = stage(x, layers_[0]);
    Tensor fine = stage(x, layers_[1]);
    Tensor coarse = stage(fine, layers_[2]);
    return {FeatureGrid(std::move(fine)), FeatureGrid(std::move(coarse))};
  }

 private:
  BackboneConfig config_;
  std::vector<ConvLayer> layers_;
};

inline FeatureGrid load_feature_grid(const std::filesystem::path& path) { return FeatureGrid(load_sfg(path)); }
inline void save_feature_grid(const std::filesystem::path& path, const FeatureGrid& g) { save_sfg(path, g); }

}  // namespace sfnet
