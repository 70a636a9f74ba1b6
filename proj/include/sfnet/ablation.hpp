// SPDX-License-Identifier: Apache-2.0
#pragma once

// Loss-term and component ablation grids on a synthetic pair set.

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sfnet/train.hpp"

namespace sfnet {

struct AblationOptions {
  TrainConfig train;          // shared schedule; loss weights are overridden per loss row
  ModelConfig model;          // base model; adaptation / multi_level overridden per component row
  double alpha = 0.1;
  std::size_t holdout_every = 4;  // pair i is held out when i % holdout_every == holdout_every - 1
};

struct LossRow {
  bool mask = false, flow = false, smooth = false;
  double pck = 0.0;
  double final_loss = 0.0;
};

struct ComponentRow {
  bool adaptation = false;
  bool multi_level = false;
  std::string train;  // "-" when untrained
  std::string test;
  double pck = 0.0;
};

struct AblationReport {
  std::vector<LossRow> losses;
  std::vector<ComponentRow> components;
  std::size_t train_pairs = 0;
  std::size_t eval_pairs = 0;
  AblationOptions options;
};

inline std::string short_name(ArgmaxMode m) {
  switch (m) {
    case ArgmaxMode::Hard: return "H";
    case ArgmaxMode::Soft: return "S";
    case ArgmaxMode::Kernel: return "KS";
  }
  return "?";
}

inline AblationReport run_ablation(const std::vector<PairRecord>& pairs, const AblationOptions& opt) {
  if (opt.holdout_every < 2) throw std::invalid_argument("holdout_every must be at least 2");
  std::vector<PairRecord> train_set, eval_set;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    (i % opt.holdout_every == opt.holdout_every - 1 ? eval_set : train_set).push_back(pairs[i]);
  if (train_set.empty() || eval_set.empty()) throw std::invalid_argument("ablation needs at least " +
                                                                         std::to_string(opt.holdout_every) + " pairs");
  AblationReport rep;
  rep.options = opt;
  rep.train_pairs = train_set.size();
  rep.eval_pairs = eval_set.size();
  const std::size_t threads = opt.train.deterministic ? 1 : opt.train.threads;

  // The backbone is shared by every row, so features are extracted once.
  const Model probe(opt.model);
  const auto train_feats = extract_features(probe, train_set, threads);
  const auto eval_feats = extract_features(probe, eval_set, threads);

  auto trained = [&](bool multi_level, ArgmaxMode train_mode, const LossWeights& w, double* final_loss) {
    ModelConfig mc = opt.model;
    mc.adaptation = true;
    mc.multi_level = multi_level;
    TrainConfig tc = opt.train;
    tc.train_argmax = train_mode;
    tc.weights = w;
    TrainState st{Model(mc), {}};
    const auto log = train(st, train_feats, tc);
    if (final_loss) *final_loss = log.back().total;
    return st.model;
  };
  auto score = [&](const Model& m, ArgmaxMode mode) {
    return evaluate_model(m, eval_set, eval_feats, mode, opt.alpha, opt.train.match, threads).mean_pck;
  };

  const LossWeights full = opt.train.weights;
  const LossWeights grid[] = {{full.mask, 0.0, 0.0}, {0.0, full.flow, 0.0}, {full.mask, full.flow, 0.0}, full};
  const bool on[][3] = {{true, false, false}, {false, true, false}, {true, true, false}, {true, true, true}};
  std::optional<Model> full_model;
  for (std::size_t r = 0; r < 4; ++r) {
    LossRow row{on[r][0], on[r][1], on[r][2], 0.0, 0.0};
    Model m = trained(opt.model.multi_level, ArgmaxMode::Kernel, grid[r], &row.final_loss);
    row.pck = score(m, ArgmaxMode::Kernel);
    rep.losses.push_back(row);
    if (r == 3) full_model = std::move(m);
  }

  {
    ModelConfig mc = opt.model;
    mc.adaptation = false;
    mc.multi_level = true;
    const Model base(mc);
    for (ArgmaxMode mode : {ArgmaxMode::Hard, ArgmaxMode::Soft, ArgmaxMode::Kernel})
      rep.components.push_back({false, true, "-", short_name(mode), score(base, mode)});
  }
  for (bool multi : {false, true}) {
    const Model soft = trained(multi, ArgmaxMode::Soft, full, nullptr);
    rep.components.push_back({true, multi, "S", "H", score(soft, ArgmaxMode::Hard)});
    rep.components.push_back({true, multi, "S", "S", score(soft, ArgmaxMode::Soft)});
    // The multi-level kernel row is the full loss row above.
    const Model kernel = (multi && opt.model.multi_level) ? *full_model : trained(multi, ArgmaxMode::Kernel, full, nullptr);
    rep.components.push_back({true, multi, "KS", "KS", score(kernel, ArgmaxMode::Kernel)});
  }
  return rep;
}

inline nlohmann::json to_json(const AblationReport& r) {
  nlohmann::json losses = nlohmann::json::array();
  for (const auto& l : r.losses)
    losses.push_back({{"mask", l.mask}, {"flow", l.flow}, {"smooth", l.smooth}, {"pck", l.pck}, {"final_loss", l.final_loss}});
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : r.components)
    comps.push_back({{"adaptation", c.adaptation},
                     {"multi_level", c.multi_level},
                     {"train_argmax", c.train},
                     {"test_argmax", c.test},
                     {"pck", c.pck}});
  return {{"format", "sfnet-ablation/1"},
          {"note", "desk-scale synthetic values"},
          {"alpha", r.options.alpha},
          {"box_convention", "target mask bounding box"},
          {"train_pairs", r.train_pairs},
          {"eval_pairs", r.eval_pairs},
          {"train_config", to_json(r.options.train)},
          {"model", to_json(r.options.model)},
          {"loss_terms", {{"columns", {"mask", "flow", "smooth", "pck"}}, {"rows", losses}}},
          {"components",
           {{"columns", {"adaptation", "multi_level", "train_argmax", "test_argmax", "pck"}}, {"rows", comps}}}};
}

inline std::string format_table(const AblationReport& r) {
  std::string out = "loss terms (PCK@" + std::to_string(r.options.alpha).substr(0, 4) + ")\n";
  out += "  mask  flow  smooth  pck\n";
  char buf[128];
  auto mark = [](bool b) { return b ? "x" : "-"; };
  for (const auto& l : r.losses) {
    std::snprintf(buf, sizeof buf, "  %-5s %-5s %-7s %.3f\n", mark(l.mask), mark(l.flow), mark(l.smooth), l.pck);
    out += buf;
  }
  out += "components\n  adapt  multi  train  test  pck\n";
  for (const auto& c : r.components) {
    std::snprintf(buf, sizeof buf, "  %-6s %-6s %-6s %-5s %.3f\n", mark(c.adaptation), mark(c.multi_level), c.train.c_str(),
                  c.test.c_str(), c.pck);
    out += buf;
  }
  return out;
}

}  // namespace sfnet
