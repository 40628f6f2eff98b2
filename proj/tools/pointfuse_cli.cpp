// pointfuse command line: verification suites (gradcheck, iou-oracle),
// synthetic dataset generation and KITTI-format round-trip checks, training,
// the two stock experiments, standalone evaluation of detection files, and
// the fusion weight-map inspector.
//
// Exit codes: 0 success, 1 verification failure, 2 usage or parse error.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pointfuse/config.hpp"
#include "pointfuse/eval.hpp"
#include "pointfuse/experiments.hpp"
#include "pointfuse/gradcheck.hpp"
#include "pointfuse/kitti.hpp"
#include "pointfuse/synth.hpp"
#include "pointfuse/train.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kOk = 0;
constexpr int kVerifyFail = 1;
constexpr int kUsage = 2;

std::string read_text_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw pf::ParseError("cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_text_file(const fs::path& p, const std::string& text) {
  if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw pf::InputError("cannot write " + p.string());
  out << text;
}

pf::ExperimentConfig load_experiment_config(const std::string& config_path,
                                            pf::ExperimentConfig defaults,
                                            std::uint64_t seed_flag, bool seed_set) {
  pf::ExperimentConfig cfg = defaults;
  if (!config_path.empty())
    pf::apply_config(pf::ConfigFile::parse(read_text_file(config_path)), cfg);
  if (seed_set) {
    cfg.seed = seed_flag;
    cfg.net.seed = seed_flag;
  }
  std::cerr << "resolved config: " << pf::resolved_config_string(cfg) << "\n";
  return cfg;
}

std::vector<pf::GroundTruth> load_ground_truth_dir(const fs::path& dir) {
  std::vector<pf::GroundTruth> gts;
  const fs::path labels = dir / "label_2";
  if (!fs::exists(labels)) throw pf::ParseError("no label_2/ under " + dir.string());
  for (const auto& entry : fs::directory_iterator(labels)) {
    if (entry.path().extension() != ".txt") continue;
    const int scene_id = std::stoi(entry.path().stem().string());
    for (const auto& label : pf::parse_labels(read_text_file(entry.path())))
      if (!label.dont_care())
        gts.push_back({scene_id, label.box(), pf::class_id_for(label.type)});
  }
  return gts;
}

int cmd_gradcheck(std::uint64_t seed, int seeds_per_op, bool as_json, const std::string& out_path,
                  bool negative_control) {
  const double tolerance = 1e-4;
  if (negative_control) {
    const auto rep = pf::run_corrupted_control(seed);
    std::cout << "corrupted_square max_rel_err=" << rep.max_rel_err << "\n";
    // the harness PASSES this command by FLAGGING the corruption
    return rep.max_rel_err > 1e-2 ? kOk : kVerifyFail;
  }
  const auto reports = pf::run_gradcheck_suite(seed, seeds_per_op);
  json arr = json::array();
  bool all_ok = true;
  for (const auto& rep : reports) {
    const bool ok = rep.max_rel_err <= tolerance;
    all_ok = all_ok && ok;
    arr.push_back(pf::to_json(rep));
    if (!as_json)
      std::cout << (ok ? "PASS " : "FAIL ") << rep.op_name
                << " max_rel_err=" << rep.max_rel_err << "\n";
  }
  if (as_json) std::cout << arr.dump(2) << "\n";
  if (!out_path.empty()) write_text_file(out_path, arr.dump(2) + "\n");
  return all_ok ? kOk : kVerifyFail;
}

int cmd_iou_oracle(int pairs, std::size_t samples, std::uint64_t seed, bool as_json) {
  pf::Rng rng(seed);
  json arr = json::array();
  bool all_ok = true;
  for (int i = 0; i < pairs; ++i) {
    const pf::Box3D a(rng.uniform(-2, 2), rng.uniform(-0.5, 0.5), rng.uniform(-2, 2),
                      rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 3.0),
                      rng.uniform(-pf::kPi, pf::kPi));
    const pf::Box3D b(a.x + rng.uniform(-1.5, 1.5), a.y + rng.uniform(-0.5, 0.5),
                      a.z + rng.uniform(-1.5, 1.5), rng.uniform(0.5, 2.0),
                      rng.uniform(0.5, 2.0), rng.uniform(0.5, 3.0),
                      rng.uniform(-pf::kPi, pf::kPi));
    const double exact = pf::iou_3d(a, b);
    const auto mc = pf::mc_iou_oracle(a, b, samples, rng.next_u64());
    const double tol = std::max(3.0 * mc.std_err, 1e-2);
    const bool ok = std::abs(exact - mc.iou) <= tol;
    all_ok = all_ok && ok;
    arr.push_back({{"pair", i},
                   {"iou_3d", exact},
                   {"mc", mc.iou},
                   {"std_err", mc.std_err},
                   {"ok", ok}});
    if (!ok && !as_json)
      std::cout << "FAIL pair " << i << ": exact=" << exact << " mc=" << mc.iou
                << " tol=" << tol << "\n";
  }
  if (as_json)
    std::cout << arr.dump(2) << "\n";
  else
    std::cout << (all_ok ? "PASS " : "FAIL ") << pairs << " pairs at " << samples
              << " samples\n";
  return all_ok ? kOk : kVerifyFail;
}

int cmd_synth(const std::string& out_dir, const pf::ExperimentConfig& cfg, std::size_t count) {
  std::size_t total_points = 0, total_boxes = 0;
  for (std::size_t i = 0; i < count; ++i) {
    pf::SyntheticSceneConfig scfg = cfg.scenes;
    scfg.seed = pf::mix_seed(cfg.seed, 0x5c31e5ULL, i);
    auto synthetic = pf::generate_synthetic_scene(scfg);
    synthetic.scene.id = static_cast<int>(i);
    pf::write_scene_dir(out_dir, synthetic.scene, pf::synthetic_labels(synthetic));
    total_points += synthetic.scene.points.size();
    total_boxes += synthetic.scene.gt_boxes.size();
  }
  const json summary{{"scenes", count}, {"points", total_points}, {"boxes", total_boxes}};
  std::cout << summary.dump(2) << "\n";
  return kOk;
}

int cmd_parse_kitti(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::exists(root / "calib")) throw pf::ParseError("no calib/ under " + dir);
  std::size_t scenes = 0, points = 0, boxes = 0;
  for (const auto& entry : fs::directory_iterator(root / "calib")) {
    if (entry.path().extension() != ".txt") continue;
    const int id = std::stoi(entry.path().stem().string());
    const pf::Scene scene = pf::read_scene_dir(root, id);

    // round-trip check: re-serialize what was read and compare bit-exactly
    const auto calib_text = read_text_file(root / "calib" / entry.path().filename());
    if (pf::serialize_calib(pf::parse_calib(calib_text)) != calib_text)
      throw pf::ParseError("calib round-trip mismatch for frame " + std::to_string(id));
    ++scenes;
    points += scene.points.size();
    boxes += scene.gt_boxes.size();
  }
  const json summary{{"scenes", scenes}, {"points", points}, {"boxes", boxes}};
  std::cout << summary.dump(2) << "\n";
  return kOk;
}

int cmd_train(const pf::ExperimentConfig& cfg, pf::LossMode mode, const std::string& out_dir,
              const std::string& resume) {
  const auto scenes = pf::make_dataset(cfg, false);
  pf::TwoStreamConfig net = cfg.net;
  net.seed = cfg.seed;
  pf::TrainState state(net);
  if (!resume.empty()) pf::load_checkpoint_file(state, resume);

  const fs::path out(out_dir.empty() ? "." : out_dir);
  fs::create_directories(out);
  std::ofstream log(out / "train_log.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  while (state.step < cfg.steps) {
    const std::size_t s = state.step;
    std::vector<pf::Scene> batch;
    for (std::size_t j = 0; j < cfg.batch; ++j)
      batch.push_back(scenes[(s * cfg.batch + j) % scenes.size()]);
    const auto breakdown = pf::train_step(state, batch, mode, pf::lr_schedule(s, cfg.steps));
    json line = pf::to_json(breakdown);
    line["step"] = state.step;
    log << line.dump() << "\n";
    if (s % 50 == 0 || s + 1 == cfg.steps)
      std::cerr << "step " << state.step << " total=" << breakdown.total << "\n";
  }
  pf::save_checkpoint_file(state, out / "checkpoint.bin");

  const auto eval_set = pf::make_dataset(cfg, true);
  const auto dets = pf::collect_detections(state.model, eval_set, true);
  write_text_file(out / "detections.jsonl", pf::serialize_detections(dets));
  const auto gts = pf::collect_ground_truth(eval_set);
  const auto ap = pf::ap_40(dets, gts, 0.25);
  const json summary{{"steps", state.step},
                     {"mode", pf::to_string(mode)},
                     {"eval_ap40", ap ? json(*ap) : json(nullptr)}};
  write_text_file(out / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return kOk;
}

int cmd_experiment_consistency(const pf::ExperimentConfig& cfg, const std::string& out_dir,
                               bool as_json) {
  const auto report = pf::run_consistency_experiment(cfg);
  const json j = pf::to_json(report);
  if (as_json) std::cout << j.dump(2) << "\n";
  if (!out_dir.empty()) write_text_file(fs::path(out_dir) / "consistency.json", j.dump(2) + "\n");
  if (!as_json)
    std::cout << "consistency: CE >= IoU at " << report.ce_wins_or_ties << "/"
              << report.compared_points << " defined thresholds\n";
  return kOk;
}

int cmd_experiment_fusion(const pf::ExperimentConfig& cfg, pf::Illumination il,
                          const std::string& out_dir, bool as_json) {
  const std::vector<pf::FusionMode> arms =
      il == pf::Illumination::Clean
          ? std::vector<pf::FusionMode>{pf::FusionMode::None, pf::FusionMode::Ungated,
                                        pf::FusionMode::Full}
          : std::vector<pf::FusionMode>{pf::FusionMode::Ungated, pf::FusionMode::Full};
  const auto report = pf::run_fusion_ablation(cfg, arms, il);
  const json j = pf::to_json(report);
  if (as_json) std::cout << j.dump(2) << "\n";
  if (!out_dir.empty()) write_text_file(fs::path(out_dir) / "fusion.json", j.dump(2) + "\n");
  if (!as_json)
    for (const auto& arm : report.arms)
      std::cout << pf::to_string(arm.mode) << " ap40="
                << (arm.ap ? std::to_string(*arm.ap) : "undefined") << "\n";
  return kOk;
}

int cmd_eval_ap(const std::string& dets_path, const std::string& gt_dir, double iou_threshold) {
  const auto dets = pf::parse_detections(read_text_file(dets_path));
  const auto gts = load_ground_truth_dir(gt_dir);
  const auto ap = pf::ap_40(dets, gts, iou_threshold);
  const json j{{"ap40", ap ? json(*ap) : json(nullptr)},
               {"iou_threshold", iou_threshold},
               {"detections", dets.size()},
               {"ground_truths", gts.size()}};
  std::cout << j.dump(2) << "\n";
  return kOk;
}

int cmd_eval_consistency(const std::string& dets_path, const std::string& gt_dir, double tau) {
  const auto dets = pf::parse_detections(read_text_file(dets_path));
  const auto gts = load_ground_truth_dir(gt_dir);
  pf::ConsistencyConfig cfg;
  cfg.tau = tau;
  const auto sweep = pf::sweep_consistency(dets, gts, cfg);
  std::cout << pf::consistency_sweep_to_json(sweep).dump(2) << "\n";
  return kOk;
}

int cmd_fuse_inspect(const pf::ExperimentConfig& cfg, const std::string& ckpt,
                     std::size_t scene_count) {
  pf::TwoStreamConfig net = cfg.net;
  net.seed = cfg.seed;
  if (net.fusion == pf::FusionMode::None)
    throw pf::ContractError("fuse-inspect: fusion mode none has no weight maps");
  pf::TrainState state(net);
  if (!ckpt.empty()) pf::load_checkpoint_file(state, ckpt);

  pf::ExperimentConfig eval_cfg = cfg;
  eval_cfg.eval_scenes = scene_count;
  const auto scenes = pf::make_dataset(eval_cfg, true);
  json arr = json::array();
  for (const auto& scene : scenes) {
    const auto trace = state.model.two_stream_forward(scene.points, scene.image, scene.proj);
    json sites = json::array();
    for (std::size_t i = 0; i < trace.weight_maps.size(); ++i) {
      const auto stats = pf::weight_map_stats(trace.weight_maps[i]);
      sites.push_back({{"site", i},
                       {"min", stats.min},
                       {"mean", stats.mean},
                       {"max", stats.max},
                       {"points", stats.count}});
    }
    arr.push_back({{"scene_id", scene.id}, {"sites", sites}});
  }
  std::cout << arr.dump(2) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pointfuse: desk-scale LiDAR/image fusion detection toolkit"};
  app.require_subcommand(1);
  // global flags (--seed/--config/--out/--json) may follow the subcommand
  app.fallthrough();

  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string config_path, out_dir;
  bool as_json = false;
  app.add_option("--seed", seed, "global seed")->each([&](const std::string&) { seed_set = true; });
  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--out", out_dir, "output directory/file");
  app.add_flag("--json", as_json, "emit JSON on stdout");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every operator");
  int seeds_per_op = 20;
  bool negative_control = false;
  grad->add_option("--seeds", seeds_per_op, "seeds per operator");
  grad->add_flag("--negative-control", negative_control,
                 "verify the harness flags a corrupted backward");

  auto* oracle = app.add_subcommand("iou-oracle", "compare iou_3d against Monte-Carlo");
  int pairs = 200;
  std::size_t samples = 1000000;
  oracle->add_option("--pairs", pairs, "random box pairs");
  oracle->add_option("--samples", samples, "Monte-Carlo samples per pair");

  auto* synth = app.add_subcommand("synth", "write synthetic scenes in KITTI layout");
  std::size_t synth_count = 4;
  synth->add_option("--scenes", synth_count, "number of scenes");

  auto* parse = app.add_subcommand("parse-kitti", "load and round-trip a KITTI-layout dir");
  std::string parse_dir;
  parse->add_option("--dir", parse_dir, "dataset directory")->required();

  auto* train = app.add_subcommand("train", "train the two-stream detector");
  std::string mode_name = "ce", resume;
  train->add_option("--mode", mode_name, "loss mode: ce|iou|none");
  train->add_option("--resume", resume, "checkpoint to resume from");
  std::uint64_t steps_flag = 0;
  train->add_option("--steps", steps_flag, "override step count");

  auto* experiment = app.add_subcommand("experiment", "stock experiments");
  auto* consistency = experiment->add_subcommand("consistency", "CE vs IoU loss sweep");
  auto* fusion = experiment->add_subcommand("fusion", "fusion ablation AP comparison");
  std::string illumination_name = "clean";
  fusion->add_option("--illumination", illumination_name, "clean|lighten|darken|mixed");
  experiment->require_subcommand(1);

  auto* eval = app.add_subcommand("eval", "evaluate a detections file");
  auto* eval_ap = eval->add_subcommand("ap", "average precision at 40 recall positions");
  auto* eval_cons = eval->add_subcommand("consistency", "kept-ratio sweep");
  std::string dets_path, gt_dir;
  double eval_iou = 0.25, eval_tau = 0.7;
  eval->add_option("--dets", dets_path, "detections JSONL");
  eval->add_option("--gt", gt_dir, "KITTI-layout dir with label_2/");
  eval_ap->add_option("--iou", eval_iou, "matching IoU threshold");
  eval_cons->add_option("--tau", eval_tau, "positive-candidate IoU threshold");
  eval->require_subcommand(1);

  auto* inspect = app.add_subcommand("fuse-inspect", "weight-map statistics per scene");
  std::string inspect_ckpt;
  std::size_t inspect_scenes = 4;
  inspect->add_option("--ckpt", inspect_ckpt, "checkpoint to load");
  inspect->add_option("--scenes", inspect_scenes, "scenes to inspect");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (grad->parsed()) return cmd_gradcheck(seed, seeds_per_op, as_json, out_dir, negative_control);
    if (oracle->parsed()) return cmd_iou_oracle(pairs, samples, seed, as_json);

    auto cfg = load_experiment_config(
        config_path,
        consistency->parsed() ? pf::consistency_experiment_defaults()
        : fusion->parsed()    ? pf::fusion_experiment_defaults()
                              : pf::ExperimentConfig{},
        seed, seed_set);
    if (synth->parsed()) {
      if (out_dir.empty()) throw pf::ContractError("synth: --out directory required");
      return cmd_synth(out_dir, cfg, synth_count);
    }
    if (parse->parsed()) return cmd_parse_kitti(parse_dir);
    if (train->parsed()) {
      if (steps_flag) cfg.steps = steps_flag;
      return cmd_train(cfg, pf::parse_loss_mode(mode_name), out_dir, resume);
    }
    if (consistency->parsed()) return cmd_experiment_consistency(cfg, out_dir, as_json);
    if (fusion->parsed()) {
      pf::Illumination il = pf::Illumination::Clean;
      if (illumination_name == "lighten") il = pf::Illumination::Lighten;
      else if (illumination_name == "darken") il = pf::Illumination::Darken;
      else if (illumination_name == "mixed") il = pf::Illumination::Mixed;
      else if (illumination_name != "clean")
        throw pf::ParseError("fusion: illumination must be clean|lighten|darken|mixed");
      return cmd_experiment_fusion(cfg, il, out_dir, as_json);
    }
    if (eval_ap->parsed()) return cmd_eval_ap(dets_path, gt_dir, eval_iou);
    if (eval_cons->parsed()) return cmd_eval_consistency(dets_path, gt_dir, eval_tau);
    if (inspect->parsed()) return cmd_fuse_inspect(cfg, inspect_ckpt, inspect_scenes);
  } catch (const pf::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kVerifyFail;
  }
  return kUsage;
}
