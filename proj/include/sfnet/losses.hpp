// SPDX-License-Identifier: Apache-2.0
#pragma once

// Mask consistency, flow consistency and smoothness terms and their
// weighted sum. Every term sums over both matching directions.

#include <string>
#include <vector>

#include "json.hpp"
#include "sfnet/ops.hpp"

namespace sfnet {

struct LossWeights {
  double mask = 3.0;
  double flow = 16.0;
  double smooth = 0.5;

  void validate() const {
    for (double v : {mask, flow, smooth})
      if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument("loss weights must be finite and >= 0");
  }
};

struct LossReport {
  double mask = 0.0;
  double flow = 0.0;
  double smooth = 0.0;
  double total = 0.0;
  std::size_t nf_source = 0;
  std::size_t nf_target = 0;
  std::vector<std::string> warnings;
};

inline nlohmann::json to_json(const LossReport& r) {
  return {{"mask", r.mask},           {"flow", r.flow},           {"smooth", r.smooth}, {"total", r.total},
          {"nf_source", r.nf_source}, {"nf_target", r.nf_target}, {"warnings", r.warnings}};
}

/// Cells with value >= 0.5.
inline std::size_t foreground_count(const Tensor& mask) {
  std::size_t n = 0;
  for (double v : mask.data()) n += v >= 0.5 ? 1 : 0;
  return n;
}

namespace ad {

/// sum_i (1/|N^i|) sum_p (M^i(p) - W(M^j; F^i)(p))^2 with |N^i| the total
/// cell count.
inline Var mask_consistency(const Var& ms, const Var& mt, const Var& fs, const Var& ft) {
  const Var est_s = warp(mt, fs);
  const Var est_t = warp(ms, ft);
  const double ns = static_cast<double>(ms.value().size());
  const double nt = static_cast<double>(mt.value().size());
  return add(scale(sum(square(sub(ms, est_s))), 1.0 / ns), scale(sum(square(sub(mt, est_t))), 1.0 / nt));
}

namespace detail {

inline double foreground_inverse(const Var& mask, const char* which, std::vector<std::string>* warnings) {
  const std::size_t n = foreground_count(mask.value());
  if (n == 0) {
    if (warnings) warnings->push_back(std::string("degenerate mask: ") + which + " has no foreground cells");
    return 0.0;
  }
  return 1.0 / static_cast<double>(n);
}

}  // namespace detail

/// sum_i (1/|N^i_F|) sum_p ||(F^i(p) + W(F^j; F^i)(p)) * M^i(p)||_2^2.
inline Var flow_consistency(const Var& fs, const Var& ft, const Var& ms, const Var& mt,
                            std::vector<std::string>* warnings = nullptr) {
  const double ws = detail::foreground_inverse(ms, "source", warnings);
  const double wt = detail::foreground_inverse(mt, "target", warnings);
  const Var cycle_s = mul_channels(add(fs, warp(ft, fs)), ms);
  const Var cycle_t = mul_channels(add(ft, warp(fs, ft)), mt);
  return add(scale(sum(square(cycle_s)), ws), scale(sum(square(cycle_t)), wt));
}

/// sum_i (1/|N^i_F|) sum_p ||grad F^i(p) * M^i(p)||_1 with forward differences.
inline Var smoothness(const Var& fs, const Var& ft, const Var& ms, const Var& mt,
                      std::vector<std::string>* warnings = nullptr) {
  const double ws = detail::foreground_inverse(ms, "source", warnings);
  const double wt = detail::foreground_inverse(mt, "target", warnings);
  auto term = [](const Var& f, const Var& m) {
    return add(sum(abs(mul_channels(forward_diff(f, Axis::X), m))),
               sum(abs(mul_channels(forward_diff(f, Axis::Y), m))));
  };
  return add(scale(term(fs, ms), ws), scale(term(ft, mt), wt));
}

struct LossTerms {
  Var mask, flow, smooth, total;
  Var flow_source, flow_target;
  std::vector<std::string> warnings;
};

inline LossTerms combine_losses(const Var& fs, const Var& ft, const Var& ms, const Var& mt,
                                const LossWeights& weights) {
  weights.validate();
  LossTerms out;
  out.flow_source = fs;
  out.flow_target = ft;
  out.mask = mask_consistency(ms, mt, fs, ft);
  out.flow = flow_consistency(fs, ft, ms, mt, &out.warnings);
  out.smooth = smoothness(fs, ft, ms, mt, nullptr);
  const Var terms[] = {out.mask, out.flow, out.smooth};
  const double w[] = {weights.mask, weights.flow, weights.smooth};
  out.total = weighted_sum(terms, w);
  return out;
}

/// Runs both matching directions through the (kernel) soft argmax and
/// evaluates the weighted loss. `corr_st` is source->target, `corr_ts`
/// target->source.
inline LossTerms losses_from_correlations(const Var& corr_st, const Var& corr_ts, const Var& ms, const Var& mt,
                                          const MatchParams& params, const LossWeights& weights,
                                          bool use_kernel = true) {
  const SoftMatch st = soft_argmax(corr_st, params, use_kernel);
  const SoftMatch ts = soft_argmax(corr_ts, params, use_kernel);
  return combine_losses(st.flow, ts.flow, ms, mt, weights);
}

/// Single-level loss from raw (unnormalized) feature grids.
inline LossTerms total_loss(const Var& feat_s, const Var& feat_t, const Var& ms, const Var& mt,
                            const MatchParams& params, const LossWeights& weights, bool use_kernel = true) {
  const Var ns = normalize_features(feat_s, params.epsilon);
  const Var nt = normalize_features(feat_t, params.epsilon);
  return losses_from_correlations(correlate(ns, nt), correlate(nt, ns), ms, mt, params, weights, use_kernel);
}

inline LossReport report(const LossTerms& terms, const Tensor& ms, const Tensor& mt) {
  LossReport r;
  r.mask = terms.mask.item();
  r.flow = terms.flow.item();
  r.smooth = terms.smooth.item();
  r.total = terms.total.item();
  r.nf_source = foreground_count(ms);
  r.nf_target = foreground_count(mt);
  r.warnings = terms.warnings;
  return r;
}

}  // namespace ad

// Plain evaluation wrappers.

inline double mask_consistency(const BinaryMask& ms, const BinaryMask& mt, const FlowField& fs, const FlowField& ft) {
  require_same_extent(ms, mt, "mask_consistency");
  require_same_extent(ms, fs, "mask_consistency");
  require_same_extent(ms, ft, "mask_consistency");
  ad::Tape t;
  return ad::mask_consistency(t.constant(ms.tensor()), t.constant(mt.tensor()), t.constant(fs.tensor()),
                              t.constant(ft.tensor()))
      .item();
}

inline double flow_consistency(const FlowField& fs, const FlowField& ft, const BinaryMask& ms, const BinaryMask& mt,
                               std::vector<std::string>* warnings = nullptr) {
  require_same_extent(ms, mt, "flow_consistency");
  require_same_extent(ms, fs, "flow_consistency");
  require_same_extent(ms, ft, "flow_consistency");
  ad::Tape t;
  return ad::flow_consistency(t.constant(fs.tensor()), t.constant(ft.tensor()), t.constant(ms.tensor()),
                              t.constant(mt.tensor()), warnings)
      .item();
}

inline double smoothness(const FlowField& fs, const FlowField& ft, const BinaryMask& ms, const BinaryMask& mt,
                         std::vector<std::string>* warnings = nullptr) {
  require_same_extent(ms, mt, "smoothness");
  require_same_extent(ms, fs, "smoothness");
  require_same_extent(ms, ft, "smoothness");
  ad::Tape t;
  return ad::smoothness(t.constant(fs.tensor()), t.constant(ft.tensor()), t.constant(ms.tensor()),
                        t.constant(mt.tensor()), warnings)
      .item();
}

struct PairInputs {
  FeatureGrid source;
  FeatureGrid target;
  BinaryMask source_mask;
  BinaryMask target_mask;
};

/// Weighted loss for one pair of (unnormalized) single-level feature grids.
inline LossReport total_loss(const PairInputs& in, const MatchParams& params = {}, const LossWeights& weights = {}) {
  require_same_extent(in.source, in.source_mask, "total_loss");
  require_same_extent(in.target, in.target_mask, "total_loss");
  require_same_extent(in.source, in.target, "total_loss");
  ad::Tape t;
  const auto terms = ad::total_loss(t.constant(in.source.tensor()), t.constant(in.target.tensor()),
                                    t.constant(in.source_mask.tensor()), t.constant(in.target_mask.tensor()), params,
                                    weights);
  return ad::report(terms, in.source_mask.tensor(), in.target_mask.tensor());
}

}  // namespace sfnet
