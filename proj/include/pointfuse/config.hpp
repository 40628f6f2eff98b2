#pragma once

// Flat key=value configuration files for the CLI: '#' comments, blank
// lines, whitespace around '=' tolerated. Unknown keys are rejected so a
// typo cannot silently fall back to a default.

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "pointfuse/error.hpp"
#include "pointfuse/experiments.hpp"

namespace pf {

class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text) {
    ConfigFile cfg;
    std::istringstream stream(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(stream, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ParseError("config line " + std::to_string(line_no) + ": expected key=value");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty())
        throw ParseError("config line " + std::to_string(line_no) + ": empty key");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(it->second);
      return v;
    } catch (const std::exception&) {
      throw ParseError("config key '" + key + "': bad number '" + it->second + "'");
    }
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    const double v = get_double(key, static_cast<double>(fallback));
    if (v < 0 || v != std::floor(v))
      throw ParseError("config key '" + key + "': expected a non-negative integer");
    return static_cast<std::uint64_t>(v);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ParseError("config key '" + key + "': expected true/false");
  }

  void require_known(const std::set<std::string>& known) const {
    for (const auto& [key, value] : values_)
      if (!known.count(key)) throw ParseError("config: unknown key '" + key + "'");
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
  }

  std::map<std::string, std::string> values_;
};

/// The full key set the CLI accepts in --config files.
inline const std::set<std::string>& experiment_config_keys() {
  static const std::set<std::string> keys{
      "seed",          "train_scenes",      "eval_scenes",   "steps",
      "batch",         "targets_min",       "targets_max",   "decoys_min",
      "decoys_max",    "points_per_object", "ground_points", "point_jitter",
      "yaw_min",       "yaw_max",           "image_size",    "fusion",
      "lambda",        "learning_rate",     "weight_decay",  "momentum",
      "focal_alpha",   "focal_gamma",       "bin_search_range", "bin_size",
      "heading_bins",  "pre_nms_top",       "proposal_nms_iou", "post_nms_top",
      "final_nms_iou", "final_top",         "rcnn_pos_iou",  "refine_point_budget",
      "tau",           "ap_iou",            "input_points",
  };
  return keys;
}

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "none") return FusionMode::None;
  if (s == "ungated") return FusionMode::Ungated;
  if (s == "full") return FusionMode::Full;
  throw ParseError("config: fusion must be none|ungated|full, got '" + s + "'");
}

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "ce") return LossMode::CE;
  if (s == "iou" || s == "iou_only") return LossMode::IouOnly;
  if (s == "none") return LossMode::None;
  throw ParseError("config: loss mode must be ce|iou|none, got '" + s + "'");
}

/// Applies a parsed config onto the experiment defaults.
inline void apply_config(const ConfigFile& file, ExperimentConfig& cfg) {
  file.require_known(experiment_config_keys());
  cfg.seed = file.get_u64("seed", cfg.seed);
  cfg.train_scenes = file.get_u64("train_scenes", cfg.train_scenes);
  cfg.eval_scenes = file.get_u64("eval_scenes", cfg.eval_scenes);
  cfg.steps = file.get_u64("steps", cfg.steps);
  cfg.batch = file.get_u64("batch", cfg.batch);

  auto& sc = cfg.scenes;
  sc.targets_min = static_cast<int>(file.get_u64("targets_min", static_cast<std::uint64_t>(sc.targets_min)));
  sc.targets_max = static_cast<int>(file.get_u64("targets_max", static_cast<std::uint64_t>(sc.targets_max)));
  sc.decoys_min = static_cast<int>(file.get_u64("decoys_min", static_cast<std::uint64_t>(sc.decoys_min)));
  sc.decoys_max = static_cast<int>(file.get_u64("decoys_max", static_cast<std::uint64_t>(sc.decoys_max)));
  sc.points_per_object =
      static_cast<int>(file.get_u64("points_per_object", static_cast<std::uint64_t>(sc.points_per_object)));
  sc.ground_points = static_cast<int>(file.get_u64("ground_points", static_cast<std::uint64_t>(sc.ground_points)));
  sc.point_jitter = file.get_double("point_jitter", sc.point_jitter);
  sc.yaw_min = file.get_double("yaw_min", sc.yaw_min);
  sc.yaw_max = file.get_double("yaw_max", sc.yaw_max);
  const std::uint64_t img = file.get_u64("image_size", cfg.net.image_h);
  sc.image_h = sc.image_w = img;

  auto& net = cfg.net;
  net.image_h = net.image_w = img;
  net.fusion = parse_fusion_mode(file.get_string("fusion", to_string(net.fusion)));
  net.weights.lambda = file.get_double("lambda", net.weights.lambda);
  net.weights.focal_alpha = file.get_double("focal_alpha", net.weights.focal_alpha);
  net.weights.focal_gamma = file.get_double("focal_gamma", net.weights.focal_gamma);
  net.learning_rate = file.get_double("learning_rate", net.learning_rate);
  net.weight_decay = file.get_double("weight_decay", net.weight_decay);
  net.beta1 = file.get_double("momentum", net.beta1);
  net.center_bins.search_range = file.get_double("bin_search_range", net.center_bins.search_range);
  net.center_bins.bin_size = file.get_double("bin_size", net.center_bins.bin_size);
  net.heading_bins = file.get_u64("heading_bins", net.heading_bins);
  net.pre_nms_top = file.get_u64("pre_nms_top", net.pre_nms_top);
  net.proposal_nms_iou = file.get_double("proposal_nms_iou", net.proposal_nms_iou);
  net.post_nms_top = file.get_u64("post_nms_top", net.post_nms_top);
  net.final_nms_iou = file.get_double("final_nms_iou", net.final_nms_iou);
  net.final_top = file.get_u64("final_top", net.final_top);
  net.rcnn_pos_iou = file.get_double("rcnn_pos_iou", net.rcnn_pos_iou);
  net.refine_point_budget = file.get_u64("refine_point_budget", net.refine_point_budget);
  net.point_stage_sizes[0] = file.get_u64("input_points", net.point_stage_sizes[0]);
  net.seed = cfg.seed;

  cfg.consistency.tau = file.get_double("tau", cfg.consistency.tau);
  net.validate();
}

inline std::string resolved_config_string(const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << "seed=" << cfg.seed << " train_scenes=" << cfg.train_scenes
      << " eval_scenes=" << cfg.eval_scenes << " steps=" << cfg.steps << " batch=" << cfg.batch
      << " fusion=" << to_string(cfg.net.fusion) << " lambda=" << cfg.net.weights.lambda
      << " lr=" << cfg.net.learning_rate << " wd=" << cfg.net.weight_decay
      << " image=" << cfg.net.image_h << "x" << cfg.net.image_w
      << " input_points=" << cfg.net.point_stage_sizes[0]
      << " targets=[" << cfg.scenes.targets_min << "," << cfg.scenes.targets_max << "]"
      << " decoys=[" << cfg.scenes.decoys_min << "," << cfg.scenes.decoys_max << "]"
      << " yaw=[" << cfg.scenes.yaw_min << "," << cfg.scenes.yaw_max << "]"
      << " tau=" << cfg.consistency.tau;
  return out.str();
}

/// Defaults tuned for the two stock experiments (desk scale, CPU minutes).
inline ExperimentConfig consistency_experiment_defaults() {
  ExperimentConfig cfg;
  cfg.train_scenes = 12;
  cfg.eval_scenes = 10;
  cfg.steps = 450;
  cfg.batch = 2;
  cfg.scenes.yaw_min = -0.35;
  cfg.scenes.yaw_max = 0.35;
  cfg.scenes.decoys_min = 1;
  cfg.scenes.decoys_max = 2;
  cfg.scenes.points_per_object = 220;
  return cfg;
}

inline ExperimentConfig fusion_experiment_defaults() {
  ExperimentConfig cfg;
  cfg.train_scenes = 12;
  cfg.eval_scenes = 8;
  cfg.steps = 250;
  cfg.batch = 2;
  cfg.scenes.yaw_min = -0.35;
  cfg.scenes.yaw_max = 0.35;
  cfg.scenes.points_per_object = 220;
  return cfg;
}

}  // namespace pf
