#pragma once

// Detection evaluation: greedy rotated-BEV NMS, the consistency ratio R
// (fraction of positive candidate boxes whose confidence clears a
// threshold), AP at 40 interpolated recall positions, and the JSON-lines
// detections interchange format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pointfuse/error.hpp"
#include "pointfuse/geometry.hpp"

namespace pf {

struct Detection {
  int scene_id = 0;
  Box3D box;
  double confidence = 0.0;  // in [0, 1]
  int class_id = 0;
};

struct GroundTruth {
  int scene_id = 0;
  Box3D box;
  int class_id = 0;
};

struct ConsistencyConfig {
  double tau = 0.7;  // IoU threshold defining positive candidates
  std::vector<double> upsilon_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};

  void validate() const {
    if (tau <= 0.0 || tau >= 1.0) throw ContractError("ConsistencyConfig: tau outside (0, 1)");
    double prev = 0.0;
    for (double u : upsilon_grid) {
      if (u <= prev || u >= 1.0)
        throw ContractError("ConsistencyConfig: upsilon grid must be strictly increasing in (0, 1)");
      prev = u;
    }
  }
};

namespace detail {

/// Indices sorted by descending confidence; ties keep input order.
inline std::vector<std::size_t> confidence_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });
  return order;
}

}  // namespace detail

/// Greedy descending-confidence suppression with rotated BEV IoU. A box is
/// suppressed only when its overlap with a kept box is strictly greater
/// than the threshold. Keeps at most max_keep survivors, confidence-sorted.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold,
                                  std::size_t max_keep) {
  std::vector<Detection> kept;
  for (std::size_t idx : detail::confidence_order(dets)) {
    if (kept.size() >= max_keep) break;
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.scene_id == dets[idx].scene_id && iou_bev(k.box, dets[idx].box) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(dets[idx]);
  }
  return kept;
}

/// Highest iou_3d of a detection against the ground truths of its scene
/// (class-aware when more than one class is present).
inline double best_gt_iou(const Detection& det, const std::vector<GroundTruth>& gts,
                          bool class_aware) {
  double best = 0.0;
  for (const auto& gt : gts) {
    if (gt.scene_id != det.scene_id) continue;
    if (class_aware && gt.class_id != det.class_id) continue;
    best = std::max(best, iou_3d(det.box, gt.box));
  }
  return best;
}

inline bool multi_class(const std::vector<GroundTruth>& gts) {
  for (const auto& gt : gts)
    if (gt.class_id != gts.front().class_id) return true;
  return false;
}

/// R = N(b in B and c_b > upsilon) / N(B), where B holds detections whose
/// best IoU against ground truth exceeds tau. Pools boxes across scenes.
/// Returns nullopt when B is empty (the consumer skips that point).
inline std::optional<double> consistency_ratio(const std::vector<Detection>& dets,
                                               const std::vector<GroundTruth>& gts, double tau,
                                               double upsilon) {
  const bool class_aware = !gts.empty() && multi_class(gts);
  std::size_t candidates = 0, kept = 0;
  for (const auto& det : dets) {
    if (best_gt_iou(det, gts, class_aware) <= tau) continue;
    ++candidates;
    if (det.confidence > upsilon) ++kept;
  }
  if (candidates == 0) return std::nullopt;
  return static_cast<double>(kept) / static_cast<double>(candidates);
}

struct ConsistencyPoint {
  double upsilon = 0.0;
  std::optional<double> ratio;
  std::size_t n_candidates = 0;
};

/// R over the upsilon grid, pooled over the full detection set.
inline std::vector<ConsistencyPoint> sweep_consistency(const std::vector<Detection>& dets,
                                                       const std::vector<GroundTruth>& gts,
                                                       const ConsistencyConfig& cfg) {
  cfg.validate();
  const bool class_aware = !gts.empty() && multi_class(gts);
  std::vector<double> positive_confidences;
  for (const auto& det : dets)
    if (best_gt_iou(det, gts, class_aware) > cfg.tau)
      positive_confidences.push_back(det.confidence);

  std::vector<ConsistencyPoint> out;
  out.reserve(cfg.upsilon_grid.size());
  for (double u : cfg.upsilon_grid) {
    ConsistencyPoint pt;
    pt.upsilon = u;
    pt.n_candidates = positive_confidences.size();
    if (!positive_confidences.empty()) {
      std::size_t kept = 0;
      for (double c : positive_confidences)
        if (c > u) ++kept;
      pt.ratio = static_cast<double>(kept) / static_cast<double>(positive_confidences.size());
    }
    out.push_back(pt);
  }
  return out;
}

/// Average precision over interpolated recall positions. Detections are
/// matched greedily in descending confidence, one-to-one per ground truth,
/// at iou_3d >= iou_threshold within the same scene. Returns nullopt when
/// there are no ground truths.
inline std::optional<double> average_precision(const std::vector<Detection>& dets,
                                               const std::vector<GroundTruth>& gts,
                                               double iou_threshold, int recall_positions) {
  if (gts.empty()) return std::nullopt;
  const bool class_aware = multi_class(gts);
  std::vector<bool> gt_used(gts.size(), false);
  const auto order = detail::confidence_order(dets);

  std::vector<int> is_tp;
  is_tp.reserve(dets.size());
  for (std::size_t idx : order) {
    const auto& det = dets[idx];
    double best = 0.0;
    std::ptrdiff_t best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[g] || gts[g].scene_id != det.scene_id) continue;
      if (class_aware && gts[g].class_id != det.class_id) continue;
      const double overlap = iou_3d(det.box, gts[g].box);
      if (overlap >= iou_threshold && overlap > best) {
        best = overlap;
        best_gt = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (best_gt >= 0) {
      gt_used[static_cast<std::size_t>(best_gt)] = true;
      is_tp.push_back(1);
    } else {
      is_tp.push_back(0);
    }
  }

  // Precision/recall after each prefix of the ranked list.
  const double total_gt = static_cast<double>(gts.size());
  std::vector<double> precision(is_tp.size()), recall(is_tp.size());
  int tp = 0;
  for (std::size_t i = 0; i < is_tp.size(); ++i) {
    tp += is_tp[i];
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / total_gt;
  }

  double ap = 0.0;
  for (int k = 1; k <= recall_positions; ++k) {
    const double r = (recall_positions == 11)
                         ? static_cast<double>(k - 1) / 10.0  // legacy grid includes 0
                         : static_cast<double>(k) / static_cast<double>(recall_positions);
    double best = 0.0;
    for (std::size_t i = 0; i < recall.size(); ++i)
      if (recall[i] >= r) best = std::max(best, precision[i]);
    ap += best;
  }
  return ap / static_cast<double>(recall_positions);
}

inline std::optional<double> ap_40(const std::vector<Detection>& dets,
                                   const std::vector<GroundTruth>& gts, double iou_threshold) {
  return average_precision(dets, gts, iou_threshold, 40);
}

// ---------------------------------------------------------------------------
// JSON interchange
// ---------------------------------------------------------------------------

inline nlohmann::json detection_to_json(const Detection& d) {
  return nlohmann::json{{"scene_id", d.scene_id}, {"x", d.box.x},     {"y", d.box.y},
                        {"z", d.box.z},           {"h", d.box.h},     {"w", d.box.w},
                        {"l", d.box.l},           {"yaw", d.box.yaw}, {"score", d.confidence}};
}

inline std::string serialize_detections(const std::vector<Detection>& dets) {
  std::string out;
  for (const auto& d : dets) {
    out += detection_to_json(d).dump();
    out += "\n";
  }
  return out;
}

/// Parses JSON-lines detections; parse failures carry the line number.
inline std::vector<Detection> parse_detections(const std::string& text) {
  std::vector<Detection> dets;
  std::istringstream stream(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      Detection d;
      d.scene_id = j.at("scene_id").get<int>();
      d.box = Box3D(j.at("x").get<double>(), j.at("y").get<double>(), j.at("z").get<double>(),
                    j.at("h").get<double>(), j.at("w").get<double>(), j.at("l").get<double>(),
                    j.at("yaw").get<double>());
      d.confidence = j.at("score").get<double>();
      dets.push_back(d);
    } catch (const std::exception& e) {
      throw ParseError("detections line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return dets;
}

inline nlohmann::json consistency_sweep_to_json(const std::vector<ConsistencyPoint>& sweep) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& pt : sweep) {
    nlohmann::json j{{"upsilon", pt.upsilon}, {"n_candidates", pt.n_candidates}};
    if (pt.ratio)
      j["ratio"] = *pt.ratio;
    else
      j["ratio"] = nullptr;
    arr.push_back(j);
  }
  return arr;
}

}  // namespace pf
