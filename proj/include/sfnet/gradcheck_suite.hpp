// SPDX-License-Identifier: Apache-2.0
#pragma once

// Random fixtures for checking reverse-mode gradients of the matching and
// loss graph against central differences.

#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "sfnet/features.hpp"
#include "sfnet/losses.hpp"

namespace sfnet {

struct GradCheckFixture {
  std::size_t size = 6;      // grid height and width
  std::size_t channels = 8;
  std::uint64_t seed = 1;
};

struct GradCheckCase {
  std::string name;
  ad::GradCheckReport report;
};

namespace detail {

inline Tensor random_normal(const Shape& s, std::mt19937_64& rng, double sd = 1.0) {
  Tensor t(s);
  std::normal_distribution<double> n(0.0, sd);
  for (double& v : t.data()) v = n(rng);
  return t;
}

inline Tensor random_uniform(const Shape& s, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(s);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) v = u(rng);
  return t;
}

/// Binary mask with roughly 60% foreground, never empty.
inline Tensor random_mask(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  Tensor m(Shape{h, w, 1});
  std::bernoulli_distribution b(0.6);
  for (double& v : m.data()) v = b(rng) ? 1.0 : 0.0;
  m[0] = 1.0;
  return m;
}

inline ad::Var project(ad::Tape& t, const ad::Var& x, const Tensor& weights) {
  return ad::sum(ad::mul(x, t.constant(weights)));
}

}  // namespace detail

/// Runs the suite: kernel soft argmax coordinates (w.r.t. correlation
/// entries and features), each loss term and the weighted total w.r.t.
/// features, and the weighted total through the parameters of an
/// adaptation block with non-trivial scale and shift.
inline std::vector<GradCheckCase> run_gradcheck_suite(const GradCheckFixture& fx,
                                                      const ad::GradCheckOptions& options = {},
                                                      const MatchParams& params = {},
                                                      const LossWeights& weights = {}) {
  if (fx.size < 2 || fx.channels == 0) throw std::invalid_argument("gradcheck fixture must be at least 2x2x1");
  std::mt19937_64 rng(fx.seed);
  const std::size_t n = fx.size, c = fx.channels;
  const Tensor feat_s = detail::random_normal({n, n, c}, rng);
  const Tensor feat_t = detail::random_normal({n, n, c}, rng);
  const Tensor corr = detail::random_uniform({n, n, n, n}, rng, -1.0, 1.0);
  const Tensor proj = detail::random_normal({n, n, 2}, rng);
  const Tensor mask_s = detail::random_mask(n, n, rng);
  const Tensor mask_t = detail::random_mask(n, n, rng);

  std::vector<GradCheckCase> out;
  using ad::Tape;
  using ad::Var;

  out.push_back({"kernel_soft_argmax/correlation",
                 ad::grad_check(
                     [&](Tape& t, std::span<const Var> in) {
                       return detail::project(t, ad::kernel_soft_argmax(in[0], params).flow, proj);
                     },
                     {{"correlation", corr}}, options)});

  out.push_back({"kernel_soft_argmax/features",
                 ad::grad_check(
                     [&](Tape& t, std::span<const Var> in) {
                       const Var c_st = ad::correlate(ad::normalize_features(in[0], params.epsilon),
                                                      ad::normalize_features(in[1], params.epsilon));
                       return detail::project(t, ad::kernel_soft_argmax(c_st, params).flow, proj);
                     },
                     {{"source_features", feat_s}, {"target_features", feat_t}}, options)});

  auto loss_case = [&](const std::string& name, auto term) {
    out.push_back({name, ad::grad_check(
                             [&](Tape& t, std::span<const Var> in) {
                               return term(ad::total_loss(in[0], in[1], t.constant(mask_s), t.constant(mask_t),
                                                          params, weights));
                             },
                             {{"source_features", feat_s}, {"target_features", feat_t}}, options)});
  };
  loss_case("loss/mask", [](const ad::LossTerms& l) { return l.mask; });
  loss_case("loss/flow", [](const ad::LossTerms& l) { return l.flow; });
  loss_case("loss/smooth", [](const ad::LossTerms& l) { return l.smooth; });
  loss_case("loss/total", [](const ad::LossTerms& l) { return l.total; });

  // Adaptation block away from its identity initialization so every relu
  // is active or inactive by a margin; normalization statistics are fixed.
  AdaptationBlock block = AdaptationBlock::init(c, 3, rng);
  block.conv.bias = detail::random_normal({c}, rng, 0.1);
  block.gamma = detail::random_uniform({c}, rng, 0.5, 1.5);
  block.beta = detail::random_uniform({c}, rng, -0.3, 0.3);
  const FeatureGrid gs(feat_s), gt(feat_t);
  const NormStats stats = batch_stats(block, {&gs, &gt});
  out.push_back({"total/adaptation",
                 ad::grad_check(
                     [&](Tape& t, std::span<const Var> in) {
                       const ad::BlockVars b{in[0], in[1], in[2], in[3]};
                       const Var as = ad::adapt(t.constant(feat_s), b, stats, block.eps);
                       const Var at = ad::adapt(t.constant(feat_t), b, stats, block.eps);
                       return ad::total_loss(as, at, t.constant(mask_s), t.constant(mask_t), params, weights).total;
                     },
                     {{"conv.weight", block.conv.weight},
                      {"conv.bias", block.conv.bias},
                      {"gamma", block.gamma},
                      {"beta", block.beta}},
                     options)});
  return out;
}

inline bool all_passed(const std::vector<GradCheckCase>& cases) {
  for (const auto& c : cases)
    if (!c.report.passed()) return false;
  return true;
}

inline nlohmann::json to_json(const std::vector<GradCheckCase>& cases) {
  nlohmann::json list = nlohmann::json::array();
  double worst = 0.0;
  for (const auto& c : cases) {
    auto j = ad::to_json(c.report);
    j["case"] = c.name;
    list.push_back(j);
    worst = std::max(worst, c.report.max_rel_error());
  }
  return {{"passed", all_passed(cases)}, {"max_rel_error", worst}, {"cases", list}};
}

}  // namespace sfnet
