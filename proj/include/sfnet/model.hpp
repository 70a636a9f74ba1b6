// SPDX-License-Identifier: Apache-2.0
#pragma once

// The matching network: frozen toy backbone, residual adaptation blocks on
// the fine and coarse levels, multi-level correlation fusion.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "sfnet/features.hpp"
#include "sfnet/losses.hpp"

namespace sfnet {

struct ModelConfig {
  bool adaptation = true;   // residual adaptation blocks on
  bool multi_level = true;  // fuse fine and (upsampled) coarse correlations
  std::size_t fine_kernel = 5;
  std::size_t coarse_kernel = 3;
  std::uint64_t seed = 11;  // adaptation initialization
  BackboneConfig backbone;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"adaptation", c.adaptation},
          {"multi_level", c.multi_level},
          {"fine_kernel", c.fine_kernel},
          {"coarse_kernel", c.coarse_kernel},
          {"seed", c.seed},
          {"backbone",
           {{"in_channels", c.backbone.in_channels},
            {"hidden", c.backbone.hidden},
            {"fine_channels", c.backbone.fine_channels},
            {"coarse_channels", c.backbone.coarse_channels},
            {"bias", c.backbone.bias},
            {"input_mean", c.backbone.input_mean},
            {"seed", c.backbone.seed}}}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.adaptation = j.at("adaptation").get<bool>();
  c.multi_level = j.at("multi_level").get<bool>();
  c.fine_kernel = j.at("fine_kernel").get<std::size_t>();
  c.coarse_kernel = j.at("coarse_kernel").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  const auto& b = j.at("backbone");
  c.backbone.in_channels = b.at("in_channels").get<std::size_t>();
  c.backbone.hidden = b.at("hidden").get<std::size_t>();
  c.backbone.fine_channels = b.at("fine_channels").get<std::size_t>();
  c.backbone.coarse_channels = b.at("coarse_channels").get<std::size_t>();
  c.backbone.bias = b.at("bias").get<double>();
  c.backbone.input_mean = b.at("input_mean").get<double>();
  c.backbone.seed = b.at("seed").get<std::uint64_t>();
  return c;
}

/// Frozen backbone output for one pair plus masks at grid resolution.
struct PairFeatures {
  BackboneOutput source;
  BackboneOutput target;
  BinaryMask source_mask;
  BinaryMask target_mask;
};

struct LevelStats {
  NormStats fine;
  NormStats coarse;
};

class Model {
 public:
  explicit Model(ModelConfig config = {}) : config_(config), backbone_(config.backbone) {
    std::mt19937_64 rng(config.seed);
    fine_ = AdaptationBlock::init(config.backbone.fine_channels, config.fine_kernel, rng);
    coarse_ = AdaptationBlock::init(config.backbone.coarse_channels, config.coarse_kernel, rng);
  }

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  const ToyBackbone& backbone() const { return backbone_; }
  AdaptationBlock& fine() { return fine_; }
  AdaptationBlock& coarse() { return coarse_; }
  const AdaptationBlock& fine() const { return fine_; }
  const AdaptationBlock& coarse() const { return coarse_; }

  /// Trainable tensors in a fixed order.
  std::vector<std::pair<std::string, Tensor*>> parameters() {
    return {{"fine.conv.weight", &fine_.conv.weight}, {"fine.conv.bias", &fine_.conv.bias},
            {"fine.gamma", &fine_.gamma},             {"fine.beta", &fine_.beta},
            {"coarse.conv.weight", &coarse_.conv.weight}, {"coarse.conv.bias", &coarse_.conv.bias},
            {"coarse.gamma", &coarse_.gamma},             {"coarse.beta", &coarse_.beta}};
  }
  /// Non-trainable normalization buffers.
  std::vector<std::pair<std::string, Tensor*>> buffers() {
    return {{"fine.running_mean", &fine_.running_mean},
            {"fine.running_var", &fine_.running_var},
            {"coarse.running_mean", &coarse_.running_mean},
            {"coarse.running_var", &coarse_.running_var}};
  }

  std::vector<double> flat_parameters() const {
    std::vector<double> out;
    for (auto& [name, t] : const_cast<Model*>(this)->parameters()) out.insert(out.end(), t->data().begin(), t->data().end());
    return out;
  }
  void set_flat_parameters(std::span<const double> flat) {
    std::size_t k = 0;
    for (auto& [name, t] : parameters())
      for (double& v : t->data()) v = flat[k++];
    if (k != flat.size()) throw std::invalid_argument("parameter vector size mismatch");
  }
  std::size_t parameter_count() const { return flat_parameters().size(); }

  PairFeatures features(const Image& source, const Image& target, const BinaryMask& source_mask,
                        const BinaryMask& target_mask) const {
    PairFeatures pf{backbone_.extract(source), backbone_.extract(target), {}, {}};
    const std::size_t stride = backbone_.stride();
    if (!source_mask.empty()) pf.source_mask = downsample_mask(source_mask, stride);
    if (!target_mask.empty()) pf.target_mask = downsample_mask(target_mask, stride);
    return pf;
  }

  LevelStats running_stats() const { return {fine_.running_stats(), coarse_.running_stats()}; }

 private:
  ModelConfig config_;
  ToyBackbone backbone_;
  AdaptationBlock fine_;
  AdaptationBlock coarse_;
};

namespace ad {

struct ModelVars {
  BlockVars fine, coarse;

  static ModelVars leaves(Tape& t, const Model& m) {
    return {BlockVars::leaves(t, m.fine()), BlockVars::leaves(t, m.coarse())};
  }
  static ModelVars constants(Tape& t, const Model& m) {
    return {BlockVars::constants(t, m.fine()), BlockVars::constants(t, m.coarse())};
  }
  std::vector<Var> flat() const {
    return {fine.weight, fine.bias, fine.gamma, fine.beta, coarse.weight, coarse.bias, coarse.gamma, coarse.beta};
  }
};

struct Correlations {
  Var source_to_target;
  Var target_to_source;
};

/// Adapted, normalized features of both levels and their fused correlations
/// in both directions.
inline Correlations model_correlations(Tape& t, const Model& model, const ModelVars& vars, const PairFeatures& pf,
                                       const LevelStats& stats, double epsilon = kDefaultEpsilon) {
  const ModelConfig& cfg = model.config();
  auto level = [&](const FeatureGrid& g, const BlockVars& b, const NormStats& s, double eps) {
    Var x = t.constant(g.tensor());
    if (cfg.adaptation) x = adapt(x, b, s, eps);
    return x;
  };
  Var fs = normalize_features(level(pf.source.fine, vars.fine, stats.fine, model.fine().eps), epsilon);
  Var ft = normalize_features(level(pf.target.fine, vars.fine, stats.fine, model.fine().eps), epsilon);
  Var st = correlate(fs, ft);
  Var ts = correlate(ft, fs);
  if (cfg.multi_level) {
    const std::size_t h = pf.source.fine.height(), w = pf.source.fine.width();
    Var cs = level(pf.source.coarse, vars.coarse, stats.coarse, model.coarse().eps);
    Var ct = level(pf.target.coarse, vars.coarse, stats.coarse, model.coarse().eps);
    cs = normalize_features(resize_bilinear(cs, h, w), epsilon);
    ct = normalize_features(resize_bilinear(ct, h, w), epsilon);
    st = mul(st, correlate(cs, ct));
    ts = mul(ts, correlate(ct, cs));
  }
  return {st, ts};
}

}  // namespace ad

/// Source->target correlation in evaluation mode (running statistics).
inline CorrelationTensor evaluate_correlation(const Model& model, const PairFeatures& pf,
                                              double epsilon = kDefaultEpsilon) {
  ad::Tape t;
  const auto vars = ad::ModelVars::constants(t, model);
  const auto c = ad::model_correlations(t, model, vars, pf, model.running_stats(), epsilon);
  return CorrelationTensor(c.source_to_target.value());
}

inline FlowField predict_flow(const Model& model, const PairFeatures& pf, ArgmaxMode mode,
                              const MatchParams& params = {}) {
  return compute_flow(evaluate_correlation(model, pf, params.epsilon), mode, params);
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory with manifest.json, one SFG1 file per tensor
// (float32, rank-3 view recorded with its true shape) and state.f64 holding
// the exact double-precision parameters, buffers and optimizer moments.

struct OptimizerSnapshot {
  std::size_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
};

namespace detail {

inline Tensor as_rank3(const Tensor& t) {
  Shape s = t.shape();
  if (s.size() == 1) return Tensor(Shape{1, 1, s[0]}, t.values());
  if (s.size() == 2) return Tensor(Shape{1, s[0], s[1]}, t.values());
  if (s.size() == 3) return t;
  std::size_t tail = 1;
  for (std::size_t i = 2; i < s.size(); ++i) tail *= s[i];
  return Tensor(Shape{s[0], s[1], tail}, t.values());
}

inline void append_f64(std::vector<std::uint8_t>& out, std::span<const double> v) {
  for (double d : v) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
}

inline void read_f64(const std::vector<std::uint8_t>& in, std::size_t& pos, std::span<double> out) {
  if (pos + 8 * out.size() > in.size())
    throw ParseError("state.f64: expected " + std::to_string(8 * out.size()) + " more bytes, got " +
                         std::to_string(in.size() - pos),
                     in.size());
  for (double& d : out) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
    d = std::bit_cast<double>(bits);
    pos += 8;
  }
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, Model& model, const OptimizerSnapshot& opt,
                            const nlohmann::json& extra = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<std::uint8_t> state;
  auto dump = [&](const std::string& name, const Tensor& t, const char* kind) {
    const std::string file = name + ".sfg";
    save_sfg(dir / file, detail::as_rank3(t));
    tensors.push_back({{"name", name}, {"file", file}, {"shape", t.shape()}, {"kind", kind}});
    detail::append_f64(state, t.data());
  };
  for (auto& [name, t] : model.parameters()) dump(name, *t, "parameter");
  for (auto& [name, t] : model.buffers()) dump(name, *t, "buffer");
  detail::append_f64(state, opt.m);
  detail::append_f64(state, opt.v);
  detail::write_file(dir / "state.f64", state);
  nlohmann::json manifest{{"format", "sfnet-checkpoint/1"},
                          {"model", to_json(model.config())},
                          {"layer_order", nlohmann::json::array()},
                          {"tensors", tensors},
                          {"optimizer", {{"step", opt.step}, {"moments", opt.m.size()}}},
                          {"state_file", "state.f64"}};
  for (auto& [name, t] : model.parameters()) manifest["layer_order"].push_back(name);
  for (const auto& [k, v] : extra.items()) manifest[k] = v;
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
}

struct LoadedCheckpoint {
  Model model;
  OptimizerSnapshot optimizer;
  nlohmann::json manifest;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw std::runtime_error("checkpoint manifest not found: " + mpath.string());
  const auto manifest = nlohmann::json::parse(in);
  LoadedCheckpoint ck{Model(model_config_from_json(manifest.at("model"))), {}, manifest};
  std::vector<std::pair<std::string, Tensor*>> all = ck.model.parameters();
  for (auto& b : ck.model.buffers()) all.push_back(b);
  const std::size_t moments = manifest.at("optimizer").at("moments").get<std::size_t>();
  ck.optimizer.step = manifest.at("optimizer").at("step").get<std::size_t>();
  ck.optimizer.m.assign(moments, 0.0);
  ck.optimizer.v.assign(moments, 0.0);
  if (std::filesystem::exists(dir / "state.f64")) {
    const auto bytes = detail::read_file(dir / "state.f64");
    std::size_t pos = 0;
    for (auto& [name, t] : all) detail::read_f64(bytes, pos, t->data());
    detail::read_f64(bytes, pos, ck.optimizer.m);
    detail::read_f64(bytes, pos, ck.optimizer.v);
    if (pos != bytes.size()) throw ParseError("state.f64: trailing bytes", pos);
  } else {
    for (const auto& entry : manifest.at("tensors")) {
      const std::string name = entry.at("name");
      auto it = std::find_if(all.begin(), all.end(), [&](const auto& p) { return p.first == name; });
      if (it == all.end()) throw std::runtime_error("checkpoint: unknown tensor " + name);
      const Tensor t = load_sfg(dir / entry.at("file").get<std::string>());
      if (t.size() != it->second->size()) throw std::runtime_error("checkpoint: size mismatch for " + name);
      std::copy(t.data().begin(), t.data().end(), it->second->data().begin());
    }
  }
  return ck;
}

}  // namespace sfnet
