// SPDX-License-Identifier: Apache-2.0
#pragma once

// Adam, the training loop over adaptation parameters, and evaluation.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "sfnet/dataset.hpp"
#include "sfnet/metrics.hpp"
#include "sfnet/model.hpp"

namespace sfnet {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
  double lr = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamOutcome {
  bool applied = true;
  std::string incident;
};

/// Bias-corrected Adam. A non-finite gradient leaves parameters, moments
/// and step untouched and reports the incident.
inline AdamOutcome adam_step(std::span<double> params, std::span<const double> grads, AdamState& s) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_step: " + std::to_string(params.size()) + " parameters but " +
                                std::to_string(grads.size()) + " gradients");
  if (s.m.empty() && s.v.empty()) {
    s.m.assign(params.size(), 0.0);
    s.v.assign(params.size(), 0.0);
  }
  if (s.m.size() != params.size() || s.v.size() != params.size())
    throw std::invalid_argument("adam_step: moment buffers do not match parameters");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i]))
      return {false, "non-finite gradient at index " + std::to_string(i) + "; step " + std::to_string(s.step + 1) +
                         " rejected"};
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
    params[i] -= s.lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + s.eps);
  }
  return {};
}

// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t iterations = 200;
  double lr = 1e-2;
  std::size_t decay_epoch = 0;  // 0 disables the step decay
  double decay_factor = 5.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  ArgmaxMode train_argmax = ArgmaxMode::Kernel;
  MatchParams match;
  LossWeights weights;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  bool deterministic = false;
  std::size_t checkpoint_every = 0;  // 0: only at the end

  /// Full-scale schedule: batch 16, lr 3e-5 divided by 5 after 30 epochs.
  static TrainConfig full_scale(std::size_t dataset_size = 3500) {
    TrainConfig c;
    c.batch_size = 16;
    c.lr = 3e-5;
    c.decay_epoch = 30;
    c.decay_factor = 5.0;
    c.iterations = (40 * dataset_size + c.batch_size - 1) / c.batch_size;
    return c;
  }
  /// Desk-scale schedule for the toy backbone.
  static TrainConfig desk() { return {}; }

  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (iterations == 0) throw std::invalid_argument("iterations must be positive");
    if (!std::isfinite(lr) || lr < 0.0) throw std::invalid_argument("lr must be finite and >= 0");
    if (!(decay_factor > 0.0)) throw std::invalid_argument("decay_factor must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw std::invalid_argument("adam betas must lie in [0, 1)");
    if (train_argmax == ArgmaxMode::Hard) throw std::invalid_argument("train_argmax must be soft or kernel");
    match.validate();
    weights.validate();
  }

  std::size_t epochs(std::size_t dataset_size) const {
    return (iterations * batch_size + dataset_size - 1) / dataset_size;
  }
  void validate_schedule(std::size_t dataset_size) const {
    if (decay_epoch > epochs(dataset_size))
      throw std::invalid_argument("decay_epoch " + std::to_string(decay_epoch) + " exceeds the " +
                                  std::to_string(epochs(dataset_size)) + " scheduled epochs");
  }

  /// Learning rate for a zero-based iteration.
  double lr_at(std::size_t iteration, std::size_t dataset_size) const {
    const std::size_t epoch = iteration * batch_size / dataset_size;
    return (decay_epoch > 0 && epoch >= decay_epoch) ? lr / decay_factor : lr;
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"iterations", c.iterations},
          {"lr", c.lr},
          {"decay_epoch", c.decay_epoch},
          {"decay_factor", c.decay_factor},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"train_argmax", std::string(to_string(c.train_argmax))},
          {"beta", c.match.beta},
          {"sigma", c.match.sigma},
          {"lambda_mask", c.weights.mask},
          {"lambda_flow", c.weights.flow},
          {"lambda_smooth", c.weights.smooth},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every}};
}

/// Applies keys from `j` over `c`; unknown keys throw.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  for (const auto& [key, val] : j.items()) {
    if (key == "batch_size") c.batch_size = val.get<std::size_t>();
    else if (key == "iterations") c.iterations = val.get<std::size_t>();
    else if (key == "lr") c.lr = val.get<double>();
    else if (key == "decay_epoch") c.decay_epoch = val.get<std::size_t>();
    else if (key == "decay_factor") c.decay_factor = val.get<double>();
    else if (key == "beta1") c.beta1 = val.get<double>();
    else if (key == "beta2") c.beta2 = val.get<double>();
    else if (key == "train_argmax") c.train_argmax = parse_argmax_mode(val.get<std::string>());
    else if (key == "beta") c.match.beta = val.get<double>();
    else if (key == "sigma") c.match.sigma = val.get<double>();
    else if (key == "lambda_mask") c.weights.mask = val.get<double>();
    else if (key == "lambda_flow") c.weights.flow = val.get<double>();
    else if (key == "lambda_smooth") c.weights.smooth = val.get<double>();
    else if (key == "seed") c.seed = val.get<std::uint64_t>();
    else if (key == "checkpoint_every") c.checkpoint_every = val.get<std::size_t>();
    else throw std::invalid_argument("unknown train config key: " + key);
  }
  c.validate();
  return c;
}

inline std::size_t default_threads() {
  if (const char* env = std::getenv("SFNET_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

/// Runs f(0..n-1) on up to `threads` workers; results are written by index
/// so reductions stay in index order.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& f) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) f(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Samples for one iteration: positions [it*B, it*B+B) of the stream formed by
/// concatenating one seeded permutation per epoch.
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t n, std::size_t iteration,
                                              std::size_t batch) {
  std::vector<std::size_t> out;
  std::vector<std::size_t> perm;
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  for (std::size_t k = iteration * batch; k < (iteration + 1) * batch; ++k) {
    const std::size_t epoch = k / n;
    if (epoch != cached_epoch) {
      perm.resize(n);
      std::iota(perm.begin(), perm.end(), 0);
      auto rng = stream_rng(seed, 0xE0C0000000ull + epoch);
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[k % n]);
  }
  return out;
}

struct IterationLog {
  std::size_t iteration = 0;  // one-based
  std::size_t epoch = 0;
  double lr = 0.0;
  double mask = 0.0;
  double flow = 0.0;
  double smooth = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
  bool applied = true;
  std::size_t warnings = 0;
};

inline std::string loss_csv_header() { return "iteration,epoch,lr,mask,flow,smooth,total,grad_norm,applied,warnings"; }

inline std::string to_csv(const IterationLog& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.iteration << ',' << r.epoch << ',' << r.lr << ',' << r.mask << ',' << r.flow << ',' << r.smooth << ','
     << r.total << ',' << r.grad_norm << ',' << (r.applied ? 1 : 0) << ',' << r.warnings;
  return os.str();
}

/// Per-pair loss and parameter gradient for one training item.
struct ItemResult {
  LossReport report;
  std::vector<double> grad;
};

inline ItemResult item_loss_and_grad(const Model& model, const PairFeatures& pf, const LevelStats& stats,
                                     const TrainConfig& cfg, bool want_grad = true) {
  ad::Tape t;
  const auto vars = want_grad ? ad::ModelVars::leaves(t, model) : ad::ModelVars::constants(t, model);
  const auto c = ad::model_correlations(t, model, vars, pf, stats, cfg.match.epsilon);
  const ad::Var ms = t.constant(pf.source_mask.tensor());
  const ad::Var mt = t.constant(pf.target_mask.tensor());
  const auto terms = ad::losses_from_correlations(c.source_to_target, c.target_to_source, ms, mt, cfg.match,
                                                  cfg.weights, cfg.train_argmax == ArgmaxMode::Kernel);
  ItemResult r{ad::report(terms, pf.source_mask.tensor(), pf.target_mask.tensor()), {}};
  if (want_grad) {
    t.backward(terms.total);
    for (const ad::Var& v : vars.flat()) {
      const Tensor& g = v.grad();
      r.grad.insert(r.grad.end(), g.data().begin(), g.data().end());
    }
  }
  return r;
}

inline LevelStats batch_level_stats(const Model& model, const std::vector<PairFeatures>& feats,
                                    const std::vector<std::size_t>& batch) {
  std::vector<const FeatureGrid*> fine, coarse;
  for (std::size_t i : batch) {
    fine.push_back(&feats[i].source.fine);
    fine.push_back(&feats[i].target.fine);
    coarse.push_back(&feats[i].source.coarse);
    coarse.push_back(&feats[i].target.coarse);
  }
  return {batch_stats(model.fine(), fine), batch_stats(model.coarse(), coarse)};
}

inline std::vector<PairFeatures> extract_features(const Model& model, const std::vector<PairRecord>& pairs,
                                                  std::size_t threads = 1) {
  std::vector<PairFeatures> out(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    out[i] = model.features(pairs[i].source, pairs[i].target, pairs[i].source_mask, pairs[i].target_mask);
  });
  return out;
}

struct TrainState {
  Model model;
  AdamState adam;
};

using IterationCallback = std::function<void(const IterationLog&, TrainState&)>;

/// Runs iterations [state.adam.step, cfg.iterations). Only adaptation
/// parameters and normalization buffers change.
inline std::vector<IterationLog> train(TrainState& state, const std::vector<PairFeatures>& feats,
                                       const TrainConfig& cfg, const IterationCallback& on_iteration = {}) {
  cfg.validate();
  if (feats.empty()) throw std::invalid_argument("train: empty dataset");
  cfg.validate_schedule(feats.size());
  Model& model = state.model;
  state.adam.beta1 = cfg.beta1;
  state.adam.beta2 = cfg.beta2;
  const std::size_t threads = cfg.deterministic ? 1 : cfg.threads;
  std::vector<IterationLog> log;
  while (state.adam.step < cfg.iterations) {
    const std::size_t it = state.adam.step;
    const auto batch = batch_indices(cfg.seed, feats.size(), it, cfg.batch_size);
    // A single-item batch has too few samples for stable statistics; it
    // normalizes with the running statistics and leaves them untouched.
    const bool use_running = batch.size() == 1;
    const LevelStats stats = use_running ? model.running_stats() : batch_level_stats(model, feats, batch);
    std::vector<ItemResult> items(batch.size());
    parallel_for(batch.size(), threads,
                 [&](std::size_t b) { items[b] = item_loss_and_grad(model, feats[batch[b]], stats, cfg); });

    IterationLog row;
    row.iteration = it + 1;
    row.epoch = it * cfg.batch_size / feats.size();
    row.lr = cfg.lr_at(it, feats.size());
    std::vector<double> grad(items[0].grad.size(), 0.0);
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (const auto& r : items) {
      row.mask += r.report.mask * inv;
      row.flow += r.report.flow * inv;
      row.smooth += r.report.smooth * inv;
      row.total += r.report.total * inv;
      row.warnings += r.report.warnings.size();
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += r.grad[k] * inv;
    }
    row.grad_norm = std::sqrt(std::inner_product(grad.begin(), grad.end(), grad.begin(), 0.0));

    if (model.config().adaptation) {
      std::vector<double> params = model.flat_parameters();
      state.adam.lr = row.lr;
      const AdamOutcome out = adam_step(params, grad, state.adam);
      row.applied = out.applied;
      if (out.applied) {
        model.set_flat_parameters(params);
        if (!use_running) {
          model.fine().update_running(stats.fine);
          model.coarse().update_running(stats.coarse);
        }
      } else {
        ++state.adam.step;  // keep the batch schedule moving past the rejected batch
      }
    } else {
      ++state.adam.step;
    }
    log.push_back(row);
    if (on_iteration) on_iteration(row, state);
  }
  return log;
}

inline OptimizerSnapshot snapshot(const AdamState& a, std::size_t n) {
  OptimizerSnapshot s{a.step, a.m, a.v};
  if (s.m.empty()) s.m.assign(n, 0.0);
  if (s.v.empty()) s.v.assign(n, 0.0);
  return s;
}

inline AdamState restore(const OptimizerSnapshot& s) {
  AdamState a;
  a.step = s.step;
  a.m = s.m;
  a.v = s.v;
  return a;
}

/// Mean dataset loss under running statistics (no parameter update).
inline LossReport dataset_loss(const Model& model, const std::vector<PairFeatures>& feats, const TrainConfig& cfg,
                               std::size_t threads = 1) {
  std::vector<ItemResult> items(feats.size());
  const LevelStats stats = model.running_stats();
  parallel_for(feats.size(), threads, [&](std::size_t i) { items[i] = item_loss_and_grad(model, feats[i], stats, cfg, false); });
  LossReport r;
  for (const auto& it : items) {
    r.mask += it.report.mask / feats.size();
    r.flow += it.report.flow / feats.size();
    r.smooth += it.report.smooth / feats.size();
    r.total += it.report.total / feats.size();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

struct PairMetrics {
  std::string name;
  double pck = 0.0;
  double lt_acc = 0.0;
  double iou = 0.0;
  std::size_t keypoints = 0;
};

struct EvalReport {
  std::vector<PairMetrics> pairs;
  double mean_pck = 0.0;
  double mean_lt_acc = 0.0;
  double mean_iou = 0.0;
  double alpha = 0.1;
  std::string mode;
};

inline PairMetrics evaluate_flow(const std::string& name, const FlowField& flow, const PairRecord& pair, double alpha) {
  PairMetrics m;
  m.name = name;
  if (!pair.keypoints.source.empty()) {
    m.pck = pck(flow, pair.keypoints, alpha, pair.source.height, pair.source.width);
    m.keypoints = pair.keypoints.source.size();
  }
  const MaskTransfer t = mask_transfer_metrics(flow, pair.source_mask, pair.target_mask);
  m.lt_acc = t.lt_acc;
  m.iou = t.iou;
  return m;
}

inline EvalReport summarize(std::vector<PairMetrics> pairs, double alpha, std::string mode) {
  EvalReport r;
  r.alpha = alpha;
  r.mode = std::move(mode);
  r.pairs = std::move(pairs);
  for (const auto& p : r.pairs) {
    r.mean_pck += p.pck;
    r.mean_lt_acc += p.lt_acc;
    r.mean_iou += p.iou;
  }
  if (!r.pairs.empty()) {
    const double n = static_cast<double>(r.pairs.size());
    r.mean_pck /= n;
    r.mean_lt_acc /= n;
    r.mean_iou /= n;
  }
  return r;
}

inline EvalReport evaluate_model(const Model& model, const std::vector<PairRecord>& pairs,
                                 const std::vector<PairFeatures>& feats, ArgmaxMode mode, double alpha,
                                 const MatchParams& params = {}, std::size_t threads = 1) {
  std::vector<PairMetrics> out(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    out[i] = evaluate_flow(pairs[i].name, predict_flow(model, feats[i], mode, params), pairs[i], alpha);
  });
  return summarize(std::move(out), alpha, std::string(to_string(mode)));
}

/// Report JSON; `metric` selects which per-pair value is listed ("all" keeps every field).
inline nlohmann::json to_json(const EvalReport& r, const std::string& metric = "all") {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : r.pairs) {
    nlohmann::json j{{"pair", p.name}};
    if (metric == "all" || metric == "pck") j["pck"] = p.pck, j["keypoints"] = p.keypoints;
    if (metric == "all" || metric == "ltacc") j["ltacc"] = p.lt_acc;
    if (metric == "all" || metric == "iou") j["iou"] = p.iou;
    pairs.push_back(j);
  }
  nlohmann::json mean;
  if (metric == "all" || metric == "pck") mean["pck"] = r.mean_pck;
  if (metric == "all" || metric == "ltacc") mean["ltacc"] = r.mean_lt_acc;
  if (metric == "all" || metric == "iou") mean["iou"] = r.mean_iou;
  return {{"alpha", r.alpha},
          {"argmax", r.mode},
          {"box_convention", "target mask bounding box"},
          {"count", r.pairs.size()},
          {"pairs", pairs},
          {"mean", mean}};
}

}  // namespace sfnet
