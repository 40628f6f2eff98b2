#pragma once

// The two directional experiments: (1) consistency of classification and
// localization confidence under the CE loss versus the plain IoU loss,
// measured by the kept-ratio sweep over confidence thresholds; (2) the
// fusion ablation on color-disambiguated scenes (no fusion / ungated /
// gated), optionally under illumination corruption.

#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pointfuse/error.hpp"
#include "pointfuse/eval.hpp"
#include "pointfuse/model.hpp"
#include "pointfuse/synth.hpp"
#include "pointfuse/train.hpp"

namespace pf {

struct ExperimentConfig {
  TwoStreamConfig net;
  SyntheticSceneConfig scenes;
  std::size_t train_scenes = 16;
  std::size_t eval_scenes = 8;
  std::size_t steps = 160;
  std::size_t batch = 2;
  ConsistencyConfig consistency;
  std::uint64_t seed = 0;
};

// Illumination regimes: always-overexposed, always-underexposed, or the
// study setting where each image is randomly lightened or darkened, so the
// image stream faces wildly varying exposure across scenes.
enum class Illumination { Clean, Lighten, Darken, Mixed };

inline const char* to_string(Illumination il) {
  switch (il) {
    case Illumination::Clean: return "clean";
    case Illumination::Lighten: return "lighten";
    case Illumination::Darken: return "darken";
    case Illumination::Mixed: return "mixed";
  }
  return "?";
}

/// y = a*x + b with the coefficients reported for over/underexposure; the
/// mixed regime flips a seeded coin per image.
inline Tensor apply_illumination(const Tensor& image, Illumination il, std::uint64_t scene_seed) {
  switch (il) {
    case Illumination::Lighten: return perturb_illumination(image, 3.0, 5.0);
    case Illumination::Darken: return perturb_illumination(image, 0.3, 5.0);
    case Illumination::Mixed: {
      Rng coin(mix_seed(scene_seed, 0x111d, 0));
      return coin.uniform_index(2) ? perturb_illumination(image, 3.0, 5.0)
                                   : perturb_illumination(image, 0.3, 5.0);
    }
    default: return image;
  }
}

/// Deterministic synthetic datasets; train and eval draw from disjoint
/// seed streams. Scene ids are dense and unique across the split.
inline std::vector<Scene> make_dataset(const ExperimentConfig& cfg, bool eval_split,
                                       Illumination il = Illumination::Clean) {
  const std::size_t n = eval_split ? cfg.eval_scenes : cfg.train_scenes;
  const std::uint64_t stream = eval_split ? 0x45564131ULL : 0x54524131ULL;
  std::vector<Scene> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    SyntheticSceneConfig scfg = cfg.scenes;
    scfg.seed = mix_seed(cfg.seed, stream, i);
    Scene scene = generate_synthetic_scene(scfg).scene;
    scene.id = static_cast<int>(eval_split ? 100000 + i : i);
    scene.image = apply_illumination(scene.image, il, scfg.seed);
    out.push_back(preprocess_scene(scene, cfg.net));
  }
  return out;
}

struct TrainLogEntry {
  std::uint64_t step = 0;
  LossBreakdown loss;
};

inline nlohmann::json to_json(const StageLoss& s) {
  return {{"cls", s.cls}, {"reg_bin", s.reg_bin}, {"reg_res", s.reg_res},
          {"ce", s.ce},   {"total", s.total}};
}

inline nlohmann::json to_json(const LossBreakdown& b) {
  return {{"rpn", to_json(b.rpn)}, {"rcnn", to_json(b.rcnn)}, {"total", b.total}};
}

/// Trains until state.step reaches total_steps. Batch rotation and the lr
/// schedule are functions of the absolute step counter, so a resumed run
/// retraces an uninterrupted one exactly.
inline std::vector<TrainLogEntry> train_model(TrainState& state, const std::vector<Scene>& scenes,
                                              std::size_t total_steps, std::size_t batch,
                                              LossMode mode, std::size_t log_every = 0) {
  if (scenes.empty()) throw ContractError("train_model: no scenes");
  std::vector<TrainLogEntry> log;
  while (state.step < total_steps) {
    const std::size_t s = state.step;
    std::vector<Scene> b;
    b.reserve(batch);
    for (std::size_t j = 0; j < batch; ++j)
      b.push_back(scenes[(s * batch + j) % scenes.size()]);
    const LossBreakdown loss = train_step(state, b, mode, lr_schedule(s, total_steps));
    if (log_every && (s % log_every == 0 || s + 1 == total_steps))
      log.push_back({state.step, loss});
  }
  return log;
}

inline std::vector<Detection> collect_detections(const TwoStreamModel& model,
                                                 const std::vector<Scene>& scenes,
                                                 bool final_nms) {
  std::vector<Detection> dets;
  for (const auto& scene : scenes) {
    auto scene_dets = detect_scene(model, scene, final_nms);
    dets.insert(dets.end(), scene_dets.begin(), scene_dets.end());
  }
  return dets;
}

inline std::vector<GroundTruth> collect_ground_truth(const std::vector<Scene>& scenes) {
  std::vector<GroundTruth> gts;
  for (const auto& scene : scenes)
    for (const auto& gt : scene.gt_boxes) gts.push_back({scene.id, gt.box, gt.class_id});
  return gts;
}

// ---------------------------------------------------------------------------
// consistency experiment
// ---------------------------------------------------------------------------

struct ConsistencyArm {
  LossMode mode = LossMode::CE;
  std::vector<ConsistencyPoint> sweep;
  std::size_t candidates = 0;
};

struct ConsistencyReport {
  ConsistencyArm ce;
  ConsistencyArm iou;
  // Directional comparison at every upsilon where both arms are defined.
  std::size_t compared_points = 0;
  std::size_t ce_wins_or_ties = 0;
};

/// Trains the CE arm and the IoU arm on identical data and seeds, then
/// sweeps the kept-ratio over the confidence grid on the eval split using
/// the refined candidates with no final NMS.
inline ConsistencyReport run_consistency_experiment(const ExperimentConfig& cfg) {
  const auto train_set = make_dataset(cfg, false);
  const auto eval_set = make_dataset(cfg, true);
  const auto gts = collect_ground_truth(eval_set);

  auto run_arm = [&](LossMode mode) {
    TwoStreamConfig net = cfg.net;
    net.seed = cfg.seed;
    TrainState state(net);
    train_model(state, train_set, cfg.steps, cfg.batch, mode);
    ConsistencyArm arm;
    arm.mode = mode;
    const auto dets = collect_detections(state.model, eval_set, /*final_nms=*/false);
    arm.sweep = sweep_consistency(dets, gts, cfg.consistency);
    for (const auto& pt : arm.sweep) arm.candidates = pt.n_candidates;
    return arm;
  };

  ConsistencyReport report;
  report.ce = run_arm(LossMode::CE);
  report.iou = run_arm(LossMode::IouOnly);
  for (std::size_t i = 0; i < report.ce.sweep.size(); ++i) {
    const auto& a = report.ce.sweep[i];
    const auto& b = report.iou.sweep[i];
    if (!a.ratio || !b.ratio) continue;
    ++report.compared_points;
    if (*a.ratio >= *b.ratio) ++report.ce_wins_or_ties;
  }
  return report;
}

inline nlohmann::json to_json(const ConsistencyReport& r) {
  nlohmann::json points = nlohmann::json::array();
  for (std::size_t i = 0; i < r.ce.sweep.size(); ++i) {
    nlohmann::json j{{"upsilon", r.ce.sweep[i].upsilon}};
    j["r_ce"] = r.ce.sweep[i].ratio ? nlohmann::json(*r.ce.sweep[i].ratio) : nullptr;
    j["r_iou"] = r.iou.sweep[i].ratio ? nlohmann::json(*r.iou.sweep[i].ratio) : nullptr;
    points.push_back(j);
  }
  return {{"points", points},
          {"n_candidates_ce", r.ce.candidates},
          {"n_candidates_iou", r.iou.candidates},
          {"compared_points", r.compared_points},
          {"ce_wins_or_ties", r.ce_wins_or_ties}};
}

// ---------------------------------------------------------------------------
// fusion ablation
// ---------------------------------------------------------------------------

struct FusionArmResult {
  FusionMode mode = FusionMode::Full;
  std::optional<double> ap = 0.0;
};

struct FusionAblationReport {
  Illumination illumination = Illumination::Clean;
  std::vector<FusionArmResult> arms;

  std::optional<double> ap_of(FusionMode mode) const {
    for (const auto& a : arms)
      if (a.mode == mode) return a.ap;
    return std::nullopt;
  }
};

/// Trains one arm per fusion mode on the same scenes/seed and evaluates
/// AP@40 on the held-out split. The scene colors are the only cue that
/// separates targets from decoys, so the no-fusion arm has to misfire.
inline FusionAblationReport run_fusion_ablation(const ExperimentConfig& cfg,
                                                const std::vector<FusionMode>& modes,
                                                Illumination il, double ap_iou_threshold = 0.25) {
  FusionAblationReport report;
  report.illumination = il;
  const auto train_set = make_dataset(cfg, false, il);
  const auto eval_set = make_dataset(cfg, true, il);
  const auto gts = collect_ground_truth(eval_set);

  for (FusionMode mode : modes) {
    TwoStreamConfig net = cfg.net;
    net.fusion = mode;
    net.seed = cfg.seed;
    TrainState state(net);
    train_model(state, train_set, cfg.steps, cfg.batch, LossMode::CE);
    const auto dets = collect_detections(state.model, eval_set, /*final_nms=*/true);
    report.arms.push_back({mode, ap_40(dets, gts, ap_iou_threshold)});
  }
  return report;
}

inline nlohmann::json to_json(const FusionAblationReport& r) {
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& a : r.arms) {
    nlohmann::json j{{"fusion", to_string(a.mode)}};
    j["ap40"] = a.ap ? nlohmann::json(*a.ap) : nullptr;
    arms.push_back(j);
  }
  return {{"illumination", to_string(r.illumination)}, {"arms", arms}};
}

/// Runs jobs on up to `threads` workers; replicate experiments are
/// independent graphs, which is the one place parallelism is allowed.
inline void run_parallel(std::vector<std::function<void()>> jobs, unsigned threads) {
  if (threads <= 1 || jobs.size() <= 1) {
    for (auto& job : jobs) job();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const unsigned n = std::min<unsigned>(threads, static_cast<unsigned>(jobs.size()));
  for (unsigned t = 0; t < n; ++t)
    pool.emplace_back([&]() {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        jobs[i]();
      }
    });
  for (auto& th : pool) th.join();
}

}  // namespace pf
