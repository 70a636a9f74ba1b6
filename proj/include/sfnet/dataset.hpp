// SPDX-License-Identifier: Apache-2.0
#pragma once

// On-disk synthetic pair datasets.
//
//   <dir>/manifest.json
//   <dir>/pair_NNNN/{source.ppm, source_mask.pgm, target.ppm, target_mask.pgm,
//                    gt_flow.sfg, affine.json, keypoints.csv, box.json}

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "sfnet/synthdata.hpp"

namespace sfnet {

namespace fs = std::filesystem;

struct PairRecord {
  std::string name;
  Image source;
  BinaryMask source_mask;
  Image target;
  BinaryMask target_mask;
  FlowField gt_flow;
  AffineParams affine;
  KeypointSet keypoints;
};

struct Dataset {
  fs::path root;
  nlohmann::json manifest;
  std::vector<PairRecord> pairs;
};

struct GenerateOptions {
  std::size_t count = 64;
  std::uint64_t seed = 1;
  AffineRanges ranges;
  std::size_t grid_stride = 4;
  std::size_t keypoints_per_pair = 20;
};

inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

inline std::string pair_dir_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%04zu", i);
  return buf;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

inline void write_pair(const fs::path& dir, const TrainingPair& pair, const KeypointSet& kps) {
  fs::create_directories(dir);
  save_pnm(dir / "source.ppm", pair.source);
  save_pnm(dir / "source_mask.pgm", mask_to_image(pair.source_mask));
  save_pnm(dir / "target.ppm", pair.target);
  save_pnm(dir / "target_mask.pgm", mask_to_image(pair.target_mask));
  save_sfg(dir / "gt_flow.sfg", pair.gt_flow);
  auto aj = to_json(pair.affine);
  aj["flipped"] = pair.flipped;
  write_json(dir / "affine.json", aj);
  save_keypoints(dir / "keypoints.csv", dir / "box.json", kps);
}

inline PairRecord read_pair(const fs::path& dir) {
  PairRecord r;
  r.name = dir.filename().string();
  r.source = load_pnm(dir / "source.ppm");
  r.source_mask = image_to_mask(load_pnm(dir / "source_mask.pgm"));
  r.target = load_pnm(dir / "target.ppm");
  r.target_mask = image_to_mask(load_pnm(dir / "target_mask.pgm"));
  if (fs::exists(dir / "gt_flow.sfg")) r.gt_flow = load_flow(dir / "gt_flow.sfg");
  if (fs::exists(dir / "affine.json")) {
    const auto j = read_json(dir / "affine.json");
    const auto& m = j.at("matrix");
    r.affine.m = {m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]};
  }
  if (fs::exists(dir / "keypoints.csv")) r.keypoints = load_keypoints(dir / "keypoints.csv", dir / "box.json");
  return r;
}

/// Base images and masks matched by file stem (images/*.ppm|pgm with masks/<stem>.pgm).
inline std::vector<Scene> load_scenes(const fs::path& images, const fs::path& masks) {
  if (!fs::is_directory(images)) throw std::runtime_error("image directory not found: " + images.string());
  if (!fs::is_directory(masks)) throw std::runtime_error("mask directory not found: " + masks.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images))
    if (e.is_regular_file() && (e.path().extension() == ".ppm" || e.path().extension() == ".pgm")) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no PPM/PGM images in " + images.string());
  std::vector<Scene> scenes;
  for (const auto& f : files) {
    const fs::path m = masks / (f.stem().string() + ".pgm");
    if (!fs::exists(m)) throw std::runtime_error("missing mask for " + f.filename().string() + ": expected " + m.string());
    scenes.push_back({load_pnm(f), image_to_mask(load_pnm(m))});
  }
  return scenes;
}

/// Writes base scenes as images/<name>.ppm and masks/<name>.pgm.
inline void write_scenes(const fs::path& out, const std::vector<Scene>& scenes) {
  fs::create_directories(out / "images");
  fs::create_directories(out / "masks");
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%04zu", i);
    save_pnm(out / "images" / (std::string(name) + ".ppm"), scenes[i].image);
    save_pnm(out / "masks" / (std::string(name) + ".pgm"), mask_to_image(scenes[i].mask));
  }
}

inline std::vector<Scene> procedural_scenes(std::size_t count, std::uint64_t seed, std::size_t size = 64) {
  std::vector<Scene> out;
  for (std::size_t i = 0; i < count; ++i) {
    auto rng = stream_rng(seed, 0x5CE0000 + i);
    out.push_back(procedural_scene(rng, size));
  }
  return out;
}

/// Pair i uses scene i mod n, a per-pair rng stream, a coin flip for the
/// horizontal flip and one affine draw.
inline std::vector<std::pair<TrainingPair, KeypointSet>> generate_pairs(const std::vector<Scene>& scenes,
                                                                        const GenerateOptions& opt) {
  if (scenes.empty()) throw std::invalid_argument("generate_pairs: no scenes");
  std::vector<std::pair<TrainingPair, KeypointSet>> out;
  for (std::size_t i = 0; i < opt.count; ++i) {
    auto rng = stream_rng(opt.seed, i);
    const Scene& s = scenes[i % scenes.size()];
    const bool flip = std::bernoulli_distribution(0.5)(rng);
    SampledAffine a = sample_affine(rng, opt.ranges);
    while (a.params.degenerate()) a = sample_affine(rng, opt.ranges);
    TrainingPair p = make_pair(s.image, s.mask, a.params, {opt.grid_stride, flip});
    KeypointSet k = make_keypoints(p, opt.keypoints_per_pair, rng);
    out.emplace_back(std::move(p), std::move(k));
  }
  return out;
}

/// In-memory records for generated pairs, named like their directories.
inline std::vector<PairRecord> to_records(const std::vector<std::pair<TrainingPair, KeypointSet>>& pairs) {
  std::vector<PairRecord> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& [p, k] = pairs[i];
    out.push_back({pair_dir_name(i), p.source, p.source_mask, p.target, p.target_mask, p.gt_flow, p.affine, k});
  }
  return out;
}

inline nlohmann::json write_dataset(const fs::path& out, const std::vector<std::pair<TrainingPair, KeypointSet>>& pairs,
                                    const GenerateOptions& opt) {
  fs::create_directories(out);
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::string name = pair_dir_name(i);
    write_pair(out / name, pairs[i].first, pairs[i].second);
    list.push_back({{"dir", name},
                    {"flipped", pairs[i].first.flipped},
                    {"interior", interior_contained(pairs[i].first)},
                    {"keypoints", pairs[i].second.source.size()}});
  }
  nlohmann::json manifest{{"format", "sfnet-pairs/1"},
                          {"seed", opt.seed},
                          {"count", pairs.size()},
                          {"grid_stride", opt.grid_stride},
                          {"keypoints_per_pair", opt.keypoints_per_pair},
                          {"ranges", to_json(opt.ranges)},
                          {"ranges_note", "affine ranges are substitute defaults chosen for this tool"},
                          {"box_convention", "target mask bounding box"},
                          {"pairs", list}};
  write_json(out / "manifest.json", manifest);
  return manifest;
}

inline Dataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw std::runtime_error("dataset manifest not found: " + mpath.string());
  Dataset d;
  d.root = dir;
  d.manifest = read_json(mpath);
  for (const auto& p : d.manifest.at("pairs")) d.pairs.push_back(read_pair(dir / p.at("dir").get<std::string>()));
  if (d.pairs.empty()) throw std::runtime_error("dataset is empty: " + dir.string());
  return d;
}

}  // namespace sfnet
