// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command-line front end. run_cli() is the whole program; tools/sfnet_cli.cpp
// only forwards argv to it.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sfnet/ablation.hpp"
#include "sfnet/gradcheck_suite.hpp"
#include "sfnet/train.hpp"
#include "sfnet/visualize.hpp"

namespace sfnet::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kCheck = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;
using nlohmann::json;

inline json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  try {
    json j = json::parse(in);
    if (!j.is_object()) throw UsageError("config file " + path + " must hold a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw UsageError("config file " + path + ": " + e.what());
  }
}

/// Runs a loader and reports any failure as a data error.
template <class F>
auto load_data(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
}

inline ModelConfig model_config_overrides(const json& j, ModelConfig c = {}) {
  for (const auto& [key, val] : j.items()) {
    if (key == "adaptation") c.adaptation = val.get<bool>();
    else if (key == "multi_level") c.multi_level = val.get<bool>();
    else if (key == "fine_kernel") c.fine_kernel = val.get<std::size_t>();
    else if (key == "coarse_kernel") c.coarse_kernel = val.get<std::size_t>();
    else if (key == "seed") c.seed = val.get<std::uint64_t>();
    else if (key == "backbone_seed") c.backbone.seed = val.get<std::uint64_t>();
    else throw UsageError("unknown model config key: " + key);
  }
  if (c.fine_kernel % 2 == 0 || c.coarse_kernel % 2 == 0) throw UsageError("kernel sizes must be odd");
  return c;
}

/// Splits a run config into its "model" section and the training keys.
inline std::pair<ModelConfig, TrainConfig> parse_run_config(json j) {
  ModelConfig mc;
  if (j.contains("model")) {
    mc = model_config_overrides(j.at("model"));
    j.erase("model");
  }
  try {
    return {mc, train_config_from_json(j)};
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

inline json run_config_json(const ModelConfig& mc, const TrainConfig& tc) {
  json j = to_json(tc);
  j["model"] = {{"adaptation", mc.adaptation},
                {"multi_level", mc.multi_level},
                {"fine_kernel", mc.fine_kernel},
                {"coarse_kernel", mc.coarse_kernel},
                {"seed", mc.seed},
                {"backbone_seed", mc.backbone.seed}};
  return j;
}

inline void echo_config(const fs::path& dir, const json& effective) {
  fs::create_directories(dir);
  write_json(dir / "config.json", effective);
}

inline std::size_t resolve_threads(std::size_t flag, bool deterministic) {
  if (deterministic) return 1;
  return flag ? flag : default_threads();
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string images, masks, out, ranges;
  std::size_t count = 64, keypoints = 20, procedural = 0;
  std::uint64_t seed = 1;
};

inline int cmd_gen(const GenArgs& a, std::ostream& log) {
  if (a.out.empty()) throw UsageError("--out is required");
  if (a.procedural == 0 && (a.images.empty() || a.masks.empty()))
    throw UsageError("--images and --masks are required (or --procedural N)");
  GenerateOptions opt;
  opt.count = a.count;
  opt.seed = a.seed;
  opt.keypoints_per_pair = a.keypoints;
  if (!a.ranges.empty()) {
    try {
      opt.ranges = affine_ranges_from_json(load_config_file(a.ranges));
    } catch (const UsageError&) {
      throw;
    } catch (const std::exception& e) {
      throw UsageError(a.ranges + ": " + e.what());
    }
  }
  const auto scenes = load_data([&] {
    return a.procedural ? procedural_scenes(a.procedural, a.seed) : load_scenes(a.images, a.masks);
  });
  const auto pairs = load_data([&] { return generate_pairs(scenes, opt); });
  write_dataset(a.out, pairs, opt);
  json effective{{"command", "gen"},    {"count", a.count},         {"seed", a.seed},
                 {"keypoints", a.keypoints}, {"ranges", to_json(opt.ranges)}};
  if (a.procedural) effective["procedural"] = a.procedural;
  else effective["images"] = a.images, effective["masks"] = a.masks;
  echo_config(a.out, effective);
  log << "wrote " << pairs.size() << " pairs to " << a.out << '\n';
  return kOk;
}

struct ScenesArgs {
  std::string out;
  std::size_t count = 16, size = 64;
  std::uint64_t seed = 1;
};

inline int cmd_scenes(const ScenesArgs& a, std::ostream& log) {
  if (a.out.empty()) throw UsageError("--out is required");
  if (a.size == 0 || a.size % 8) throw UsageError("--size must be a positive multiple of 8");
  write_scenes(a.out, procedural_scenes(a.count, a.seed, a.size));
  echo_config(a.out, {{"command", "scenes"}, {"count", a.count}, {"seed", a.seed}, {"size", a.size}});
  log << "wrote " << a.count << " scenes to " << a.out << '\n';
  return kOk;
}

struct TrainArgs {
  std::string data, config, out, resume;
  std::optional<std::size_t> iterations;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 0;
  bool deterministic = false;
  bool quiet = false;
};

inline int cmd_train(const TrainArgs& a, std::ostream& log) {
  if (a.data.empty() || a.out.empty()) throw UsageError("--data and --out are required");
  auto [mc, tc] = parse_run_config(load_config_file(a.config));
  if (a.iterations) tc.iterations = *a.iterations;
  if (a.lr) tc.lr = *a.lr;
  if (a.seed) tc.seed = *a.seed;
  tc.deterministic = a.deterministic;
  tc.threads = resolve_threads(a.threads, a.deterministic);
  try {
    tc.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }

  std::optional<LoadedCheckpoint> resumed;
  if (!a.resume.empty()) {
    resumed = load_data([&] { return load_checkpoint(a.resume); });
    mc = resumed->model.config();
  }
  const Dataset ds = load_data([&] { return load_dataset(a.data); });
  try {
    tc.validate_schedule(ds.pairs.size());
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }

  TrainState st{resumed ? resumed->model : Model(mc), resumed ? restore(resumed->optimizer) : AdamState{}};
  if (st.adam.step >= tc.iterations)
    throw UsageError("checkpoint is already at step " + std::to_string(st.adam.step) + " of " +
                     std::to_string(tc.iterations));
  const auto feats = load_data([&] { return extract_features(st.model, ds.pairs, tc.threads); });

  fs::create_directories(a.out);
  json effective = run_config_json(mc, tc);
  effective["command"] = "train";
  effective["data"] = a.data;
  if (!a.resume.empty()) effective["resume"] = a.resume;
  echo_config(a.out, effective);

  const fs::path csv = fs::path(a.out) / "loss.csv";
  const bool append = resumed && fs::exists(csv);
  std::ofstream loss(csv, append ? std::ios::app : std::ios::trunc);
  if (!append) loss << loss_csv_header() << '\n';
  const fs::path incidents = fs::path(a.out) / "incidents.log";
  const json extra{{"match", {{"beta", tc.match.beta}, {"sigma", tc.match.sigma}, {"epsilon", tc.match.epsilon}}},
                   {"train_config", to_json(tc)}};
  auto save = [&](TrainState& s, const fs::path& dir) {
    save_checkpoint(dir, s.model, snapshot(s.adam, s.model.parameter_count()), extra);
  };

  train(st, feats, tc, [&](const IterationLog& row, TrainState& s) {
    loss << to_csv(row) << '\n';
    if (!row.applied) {
      std::ofstream inc(incidents, std::ios::app);
      inc << "iteration " << row.iteration << ": non-finite gradient, step rejected\n";
    }
    if (!a.quiet && (row.iteration == 1 || row.iteration % 10 == 0 || row.iteration == tc.iterations))
      log << "iter " << row.iteration << " total " << row.total << " mask " << row.mask << " flow " << row.flow
          << " smooth " << row.smooth << '\n';
    if (tc.checkpoint_every && row.iteration % tc.checkpoint_every == 0 && row.iteration != tc.iterations)
      save(s, fs::path(a.out) / ("checkpoint_" + std::to_string(row.iteration)));
  });
  save(st, fs::path(a.out) / "checkpoint");
  log << "checkpoint written to " << (fs::path(a.out) / "checkpoint").string() << '\n';
  return kOk;
}

inline MatchParams checkpoint_match_params(const LoadedCheckpoint& ck) {
  MatchParams p;
  if (ck.manifest.contains("match")) {
    const auto& m = ck.manifest.at("match");
    p.beta = m.at("beta").get<double>();
    p.sigma = m.at("sigma").get<double>();
    p.epsilon = m.at("epsilon").get<double>();
  }
  return p;
}

struct MatchArgs {
  std::string checkpoint, source, target, out, argmax = "kernel";
};

inline int cmd_match(const MatchArgs& a, std::ostream& log) {
  if (a.checkpoint.empty() || a.source.empty() || a.target.empty() || a.out.empty())
    throw UsageError("--checkpoint, --source, --target and --out are required");
  ArgmaxMode mode;
  try {
    mode = parse_argmax_mode(a.argmax);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const LoadedCheckpoint ck = load_data([&] { return load_checkpoint(a.checkpoint); });
  const Image src = load_data([&] { return load_pnm(a.source); });
  const Image tgt = load_data([&] { return load_pnm(a.target); });
  if (src.height != tgt.height || src.width != tgt.width)
    throw DataError("source and target extents differ: " + std::to_string(src.height) + "x" +
                    std::to_string(src.width) + " vs " + std::to_string(tgt.height) + "x" + std::to_string(tgt.width));
  const MatchParams params = checkpoint_match_params(ck);
  const PairFeatures pf = load_data([&] { return ck.model.features(src, tgt, {}, {}); });
  const CorrelationTensor c = evaluate_correlation(ck.model, pf, params.epsilon);
  const FlowField flow = compute_flow(c, mode, params);
  const MatchResult dist = mode == ArgmaxMode::Soft ? detail::soft_match(c, params, false) : kernel_soft_argmax(c, params);

  const fs::path out(a.out);
  fs::create_directories(out);
  save_sfg(out / "flow.sfg", flow);
  save_pnm(out / "flow_color.ppm", flow_to_color(flow));
  save_pnm(out / "warped_target.ppm", warp_image(tgt, flow));
  json summary{{"argmax", std::string(to_string(mode))},
               {"distribution", std::string(mode == ArgmaxMode::Soft ? "soft" : "kernel")},
               {"flow", flow_summary(flow)},
               {"match", match_summary(dist.distribution)},
               {"stride", ck.model.backbone().stride()}};
  write_json(out / "match_summary.json", summary);
  echo_config(out, {{"command", "match"},
                    {"checkpoint", a.checkpoint},
                    {"source", a.source},
                    {"target", a.target},
                    {"argmax", std::string(to_string(mode))},
                    {"beta", params.beta},
                    {"sigma", params.sigma}});
  log << "flow written to " << (out / "flow.sfg").string() << '\n';
  return kOk;
}

struct EvalArgs {
  std::string flow, checkpoint, pairs, metric = "pck", argmax = "kernel", out;
  double alpha = 0.1;
  std::size_t threads = 0;
  bool deterministic = false;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& log) {
  if (a.pairs.empty()) throw UsageError("--pairs is required");
  if (a.flow.empty() == a.checkpoint.empty()) throw UsageError("exactly one of --flow and --checkpoint is required");
  if (a.metric != "pck" && a.metric != "ltacc" && a.metric != "iou" && a.metric != "all")
    throw UsageError("--metric must be pck, ltacc, iou or all");
  if (!(a.alpha > 0.0)) throw UsageError("--alpha must be positive");
  ArgmaxMode mode;
  try {
    mode = parse_argmax_mode(a.argmax);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const std::size_t threads = resolve_threads(a.threads, a.deterministic);
  const Dataset ds = load_data([&] { return load_dataset(a.pairs); });
  if (a.metric == "pck" || a.metric == "all")
    for (const auto& p : ds.pairs)
      if (p.keypoints.source.empty()) throw DataError(p.name + ": no keypoints for PCK");

  EvalReport rep;
  if (!a.flow.empty()) {
    std::vector<PairMetrics> rows;
    for (const auto& p : ds.pairs) {
      const FlowField f = load_data([&] { return load_flow(ds.root / p.name / a.flow); });
      rows.push_back(load_data([&] { return evaluate_flow(p.name, f, p, a.alpha); }));
    }
    rep = summarize(std::move(rows), a.alpha, "file:" + a.flow);
  } else {
    const LoadedCheckpoint ck = load_data([&] { return load_checkpoint(a.checkpoint); });
    const auto feats = load_data([&] { return extract_features(ck.model, ds.pairs, threads); });
    rep = evaluate_model(ck.model, ds.pairs, feats, mode, a.alpha, checkpoint_match_params(ck), threads);
  }
  const json report = to_json(rep, a.metric);
  if (a.out.empty()) {
    log << report.dump(2) << '\n';
  } else {
    const fs::path out(a.out);
    write_json(out, report);
    log << "report written to " << out.string() << '\n';
  }
  return kOk;
}

struct GradCheckArgs {
  std::size_t fixture = 6, channels = 8;
  std::uint64_t seed = 1;
  double tolerance = 1e-4, step = 1e-5;
  std::string out;
};

inline int cmd_gradcheck(const GradCheckArgs& a, std::ostream& log) {
  if (a.fixture < 2) throw UsageError("--fixture must be at least 2");
  if (!(a.tolerance > 0.0) || !(a.step > 0.0)) throw UsageError("--tolerance and --step must be positive");
  ad::GradCheckOptions opt;
  opt.tolerance = a.tolerance;
  opt.step = a.step;
  const auto cases = run_gradcheck_suite({a.fixture, a.channels, a.seed}, opt);
  json report = to_json(cases);
  report["fixture"] = {a.fixture, a.fixture, a.channels};
  report["seed"] = a.seed;
  for (const auto& c : cases) {
    const auto* w = c.report.worst();
    log << (c.report.passed() ? "ok   " : "FAIL ") << c.name << "  max_rel_error " << c.report.max_rel_error();
    if (w) log << "  worst " << w->param << "[" << w->index << "]";
    log << '\n';
  }
  if (!a.out.empty()) write_json(a.out, report);
  return all_passed(cases) ? kOk : kCheck;
}

struct AblateArgs {
  std::string data, out, config;
  std::optional<std::size_t> iterations;
  std::size_t threads = 0;
  bool deterministic = false;
};

inline int cmd_ablate(const AblateArgs& a, std::ostream& log) {
  if (a.data.empty() || a.out.empty()) throw UsageError("--data and --out are required");
  auto [mc, tc] = parse_run_config(load_config_file(a.config));
  if (a.iterations) tc.iterations = *a.iterations;
  tc.deterministic = a.deterministic;
  tc.threads = resolve_threads(a.threads, a.deterministic);
  const Dataset ds = load_data([&] { return load_dataset(a.data); });
  AblationOptions opt;
  opt.train = tc;
  opt.model = mc;
  AblationReport rep;
  try {
    rep = run_ablation(ds.pairs, opt);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const fs::path out(a.out);
  fs::create_directories(out);
  write_json(out / "ablation.json", to_json(rep));
  {
    std::ofstream t(out / "ablation.txt");
    t << format_table(rep);
  }
  json effective = run_config_json(mc, tc);
  effective["command"] = "ablate";
  effective["data"] = a.data;
  echo_config(out, effective);
  log << format_table(rep);
  return kOk;
}

// ---------------------------------------------------------------------------

/// Parses and runs one command. `args` excludes the program name.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Dense semantic correspondence with kernel soft argmax matching", "sfnet"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate synthetic affine training pairs");
  g->add_option("--images", gen.images, "directory of base PPM/PGM images");
  g->add_option("--masks", gen.masks, "directory of PGM masks matched by file stem");
  g->add_option("--procedural", gen.procedural, "use N procedural scenes instead of --images/--masks");
  g->add_option("--out", gen.out, "output dataset directory")->required();
  g->add_option("--count", gen.count, "number of pairs");
  g->add_option("--seed", gen.seed, "generation seed");
  g->add_option("--ranges", gen.ranges, "JSON file with affine ranges");
  g->add_option("--keypoints", gen.keypoints, "keypoints per pair");

  ScenesArgs sc;
  auto* s = app.add_subcommand("scenes", "write procedural base images and masks");
  s->add_option("--out", sc.out, "output directory")->required();
  s->add_option("--count", sc.count, "number of scenes");
  s->add_option("--seed", sc.seed, "seed");
  s->add_option("--size", sc.size, "image side in pixels (multiple of 8)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train the adaptation layers");
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--config", tr.config, "JSON run config");
  t->add_option("--out", tr.out, "output directory")->required();
  t->add_option("--resume", tr.resume, "checkpoint directory to resume from");
  t->add_option("--iterations", tr.iterations, "override iterations");
  t->add_option("--lr", tr.lr, "override learning rate");
  t->add_option("--seed", tr.seed, "override batch-order seed");
  t->add_option("--threads", tr.threads, "worker threads (default: SFNET_THREADS or 1)");
  t->add_flag("--deterministic", tr.deterministic, "single-threaded, fixed reduction order");
  t->add_flag("--quiet", tr.quiet, "no per-iteration progress");

  MatchArgs ma;
  auto* m = app.add_subcommand("match", "match a source image to a target image");
  m->add_option("--checkpoint", ma.checkpoint, "checkpoint directory")->required();
  m->add_option("--source", ma.source, "source PPM")->required();
  m->add_option("--target", ma.target, "target PPM")->required();
  m->add_option("--out", ma.out, "output directory")->required();
  m->add_option("--argmax", ma.argmax, "hard|soft|kernel");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate flows on a pair set");
  e->add_option("--flow", ev.flow, "flow file name inside each pair directory");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint directory");
  e->add_option("--pairs", ev.pairs, "dataset directory")->required();
  e->add_option("--metric", ev.metric, "pck|ltacc|iou|all");
  e->add_option("--alpha", ev.alpha, "PCK threshold factor");
  e->add_option("--argmax", ev.argmax, "hard|soft|kernel (with --checkpoint)");
  e->add_option("--out", ev.out, "report file (default: stdout)");
  e->add_option("--threads", ev.threads, "worker threads");
  e->add_flag("--deterministic", ev.deterministic, "single-threaded");

  GradCheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "compare reverse-mode gradients with central differences");
  c->add_option("--fixture", gc.fixture, "grid side of the random fixture");
  c->add_option("--channels", gc.channels, "feature channels");
  c->add_option("--seed", gc.seed, "fixture seed");
  c->add_option("--tolerance", gc.tolerance, "maximum relative error");
  c->add_option("--step", gc.step, "finite-difference step");
  c->add_option("--out", gc.out, "JSON report file");

  AblateArgs ab;
  auto* b = app.add_subcommand("ablate", "loss-term and component ablation grids");
  b->add_option("--data", ab.data, "dataset directory")->required();
  b->add_option("--out", ab.out, "output directory")->required();
  b->add_option("--config", ab.config, "JSON run config");
  b->add_option("--iterations", ab.iterations, "override iterations per trained row");
  b->add_option("--threads", ab.threads, "worker threads");
  b->add_flag("--deterministic", ab.deterministic, "single-threaded");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << '\n';
    return kUsage;
  }

  try {
    if (g->parsed()) return cmd_gen(gen, out);
    if (s->parsed()) return cmd_scenes(sc, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (m->parsed()) return cmd_match(ma, out);
    if (e->parsed()) return cmd_eval(ev, out);
    if (c->parsed()) return cmd_gradcheck(gc, out);
    if (b->parsed()) return cmd_ablate(ab, out);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << '\n';
    return kUsage;
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << '\n';
    return kData;
  } catch (const nlohmann::json::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kData;
  }
  return kUsage;
}

}  // namespace sfnet::cli
