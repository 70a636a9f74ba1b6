// SPDX-License-Identifier: Apache-2.0
#pragma once

// Correspondence metrics: PCK on transferred keypoints, label-transfer
// accuracy and IoU of flow-warped masks.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sfnet/grid.hpp"

namespace sfnet {

/// Inclusive pixel box.
struct BoundingBox {
  double x_min = 0.0, y_min = 0.0, x_max = 0.0, y_max = 0.0;
  double width() const { return x_max - x_min + 1.0; }
  double height() const { return y_max - y_min + 1.0; }
};

/// Corresponding keypoints in image pixels plus the box that sets the PCK
/// threshold.
struct KeypointSet {
  std::vector<GridCoord> source;
  std::vector<GridCoord> target;
  BoundingBox box;
};

inline std::optional<BoundingBox> mask_bounding_box(const BinaryMask& m) {
  bool any = false;
  BoundingBox b{1e300, 1e300, -1e300, -1e300};
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x)
      if (m.at(y, x) >= 0.5) {
        any = true;
        b.x_min = std::min(b.x_min, static_cast<double>(x));
        b.x_max = std::max(b.x_max, static_cast<double>(x));
        b.y_min = std::min(b.y_min, static_cast<double>(y));
        b.y_max = std::max(b.y_max, static_cast<double>(y));
      }
  if (!any) return std::nullopt;
  return b;
}

struct PckResult {
  double pck = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  double threshold = 0.0;
  std::vector<double> errors;
};

/// Transfers each source keypoint by the flow (upsampled bilinearly to the
/// image size and sampled bilinearly at the keypoint) and counts it correct
/// when its distance to the target keypoint is <= alpha * max(box h, box w).
inline PckResult pck_detail(const FlowField& flow, const KeypointSet& kps, double alpha, std::size_t image_height,
                            std::size_t image_width) {
  if (kps.source.empty()) throw std::invalid_argument("pck: no keypoints");
  if (kps.source.size() != kps.target.size()) throw std::invalid_argument("pck: keypoint count mismatch");
  if (!(kps.box.width() > 0.0) || !(kps.box.height() > 0.0)) throw std::invalid_argument("pck: box must have positive extent");
  const FlowField dense = (flow.height() == image_height && flow.width() == image_width)
                              ? flow
                              : upsample_bilinear(flow, image_height, image_width);
  PckResult r;
  r.threshold = alpha * std::max(kps.box.height(), kps.box.width());
  r.total = kps.source.size();
  for (std::size_t i = 0; i < kps.source.size(); ++i) {
    const GridCoord& s = kps.source[i];
    if (!std::isfinite(s.x) || !std::isfinite(s.y) || !std::isfinite(kps.target[i].x) || !std::isfinite(kps.target[i].y))
      throw std::invalid_argument("pck: non-finite keypoint");
    const GridCoord d = bilinear_sample(dense, s);
    const double ex = s.x + d.x - kps.target[i].x;
    const double ey = s.y + d.y - kps.target[i].y;
    const double err = std::sqrt(ex * ex + ey * ey);
    r.errors.push_back(err);
    if (err <= r.threshold) ++r.correct;
  }
  r.pck = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

inline double pck(const FlowField& flow, const KeypointSet& kps, double alpha, std::size_t image_height,
                  std::size_t image_width) {
  return pck_detail(flow, kps, alpha, image_height, image_width).pck;
}

struct MaskTransfer {
  double lt_acc = 0.0;
  double iou = 0.0;
};

/// Warps the target mask into the source frame, thresholds at 0.5 and
/// compares with the source mask. IoU of two empty masks is 1.
inline MaskTransfer mask_transfer_metrics(const FlowField& flow, const BinaryMask& source_mask,
                                          const BinaryMask& target_mask) {
  require_same_extent(source_mask, target_mask, "mask_transfer_metrics");
  const FlowField dense = flow.same_extent(source_mask)
                              ? flow
                              : upsample_bilinear(flow, source_mask.height(), source_mask.width());
  const BinaryMask est = threshold_mask(warp(target_mask, dense));
  std::size_t agree = 0, inter = 0, uni = 0;
  for (std::size_t i = 0; i < est.tensor().size(); ++i) {
    const bool a = est.tensor()[i] >= 0.5;
    const bool b = source_mask.tensor()[i] >= 0.5;
    agree += a == b;
    inter += a && b;
    uni += a || b;
  }
  MaskTransfer m;
  m.lt_acc = static_cast<double>(agree) / static_cast<double>(est.tensor().size());
  m.iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  return m;
}

inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  require_same_extent(a, b, "mask_iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.tensor().size(); ++i) {
    const bool x = a.tensor()[i] >= 0.5, y = b.tensor()[i] >= 0.5;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Keypoint files: CSV rows x_src,y_src,x_tgt,y_tgt (optional header) and a
// JSON box record {x_min, y_min, x_max, y_max}.

inline void save_keypoints(const std::filesystem::path& csv, const std::filesystem::path& box_json,
                           const KeypointSet& kps) {
  std::ofstream out(csv);
  if (!out) throw std::runtime_error("cannot write " + csv.string());
  out.precision(17);
  out << "x_src,y_src,x_tgt,y_tgt\n";
  for (std::size_t i = 0; i < kps.source.size(); ++i)
    out << kps.source[i].x << ',' << kps.source[i].y << ',' << kps.target[i].x << ',' << kps.target[i].y << '\n';
  std::ofstream bj(box_json);
  if (!bj) throw std::runtime_error("cannot write " + box_json.string());
  bj << nlohmann::json{{"x_min", kps.box.x_min}, {"y_min", kps.box.y_min}, {"x_max", kps.box.x_max},
                       {"y_max", kps.box.y_max}}
            .dump(2)
     << '\n';
}

inline KeypointSet load_keypoints(const std::filesystem::path& csv, const std::filesystem::path& box_json) {
  std::ifstream in(csv);
  if (!in) throw std::runtime_error("cannot open " + csv.string());
  KeypointSet kps;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line[0] == 'x') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    double v[4];
    if (!(ss >> v[0] >> v[1] >> v[2] >> v[3]))
      throw std::runtime_error(csv.string() + ": malformed keypoint row " + std::to_string(row));
    kps.source.push_back({v[0], v[1]});
    kps.target.push_back({v[2], v[3]});
  }
  std::ifstream bj(box_json);
  if (!bj) throw std::runtime_error("cannot open " + box_json.string());
  const auto j = nlohmann::json::parse(bj);
  kps.box = {j.at("x_min").get<double>(), j.at("y_min").get<double>(), j.at("x_max").get<double>(),
             j.at("y_max").get<double>()};
  return kps;
}

}  // namespace sfnet
