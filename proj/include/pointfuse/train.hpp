#pragma once

// Training loop machinery: foreground/box target assignment, the per-scene
// loss graph for the three loss modes (consistency-enforcing, plain IoU,
// none), the adaptive-moment parameter update, and self-describing binary
// checkpoints that make an interrupted run bit-identical to a straight one.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pointfuse/error.hpp"
#include "pointfuse/kitti.hpp"
#include "pointfuse/losses.hpp"
#include "pointfuse/model.hpp"
#include "pointfuse/rng.hpp"

namespace pf {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  std::uint64_t x = a * 0x9e3779b97f4a7c15ULL + b * 0xbf58476d1ce4e5b9ULL +
                    c * 0x94d049bb133111ebULL + 0x2545f4914f6cdd1dULL;
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdULL;
  x ^= x >> 29;
  return x;
}

/// Crops to the configured range and subsamples to the backbone's fixed
/// input size; deterministic per (scene id, seed).
inline Scene preprocess_scene(const Scene& scene, const TwoStreamConfig& cfg,
                              const RangeBox& range = RangeBox{}) {
  Scene out = scene;
  out.points = crop_to_range(scene.points, range);
  out.points = subsample_points(out.points, cfg.point_stage_sizes[0],
                                mix_seed(cfg.seed, static_cast<std::uint64_t>(scene.id), 17));
  out.reflectance.clear();
  return out;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<std::vector<double>> m, v;

  void init(const ParamStore& params) {
    m.clear();
    v.clear();
    for (const auto& [name, t] : params.items) {
      m.emplace_back(t.numel(), 0.0);
      v.emplace_back(t.numel(), 0.0);
    }
  }
};

/// One adaptive-moment update, classic L2 decay folded into the gradient
/// (initial lr / decay / momentum defaults 0.002 / 0.001 / 0.9). lr_scale
/// lets the loop anneal the initial rate.
inline void adam_step(ParamStore& params, AdamState& opt, const TwoStreamConfig& cfg,
                      std::uint64_t step_index, double lr_scale = 1.0) {
  if (opt.m.size() != params.items.size()) throw ContractError("adam_step: optimizer not sized");
  const double t = static_cast<double>(step_index + 1);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double lr = cfg.learning_rate * lr_scale;
  for (std::size_t pi = 0; pi < params.items.size(); ++pi) {
    Tensor& param = params.items[pi].second;
    auto& data = param.data();
    const auto& grad = param.grad();
    auto& m = opt.m[pi];
    auto& v = opt.v[pi];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i] + cfg.weight_decay * data[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      data[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
    }
  }
}

// ---------------------------------------------------------------------------
// target assignment
// ---------------------------------------------------------------------------

struct PointTargets {
  std::vector<int> fg;                    // 0/1 per point
  std::vector<std::size_t> positive_idx;  // indices with fg == 1
  std::vector<std::size_t> matched_gt;    // per positive, gt index
};

/// Foreground iff the point lies inside a ground-truth box (enlarged by
/// fg_margin); ties go to the box whose center is nearest.
inline PointTargets assign_point_targets(const std::vector<std::array<double, 3>>& points,
                                         const std::vector<SceneBox>& gts, double fg_margin) {
  PointTargets t;
  t.fg.assign(points.size(), 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    double best_d2 = std::numeric_limits<double>::infinity();
    std::ptrdiff_t best = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const auto& b = gts[g].box;
      if (!b.contains(points[i][0], points[i][1], points[i][2], fg_margin)) continue;
      const double dx = points[i][0] - b.x, dy = points[i][1] - b.y, dz = points[i][2] - b.z;
      const double d2 = dx * dx + dy * dy + dz * dz;
      if (d2 < best_d2) {
        best_d2 = d2;
        best = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (best >= 0) {
      t.fg[i] = 1;
      t.positive_idx.push_back(i);
      t.matched_gt.push_back(static_cast<std::size_t>(best));
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// per-scene loss graph
// ---------------------------------------------------------------------------

namespace detail {

/// Keeps sigmoid outputs strictly inside (0, 1) so the focal/CE domains
/// hold even when a logit saturates in double precision.
inline Tensor clamp_unit(const Tensor& p) {
  const double eps = 1e-12;
  return minimum(maximum(p, Tensor::full(p.shape(), eps)),
                 Tensor::full(p.shape(), 1.0 - eps));
}

inline Tensor ce_term_rows(const Tensor& confidence, const Tensor& iou, LossMode mode) {
  if (mode == LossMode::CE) return ce_loss(clamp_unit(confidence), iou);
  // plain IoU loss: -log(IoU), no confidence factor
  return neg(log(maximum(iou, Tensor::full(iou.shape(), 1e-6))));
}

}  // namespace detail

struct SceneLossOutput {
  Tensor total;  // scalar graph node
  LossBreakdown breakdown;
  std::size_t rpn_positives = 0;
  std::size_t rcnn_positives = 0;
};

/// Builds the full loss graph for one preprocessed scene: both stages use
/// cls + reg + lambda * consistency-term, with the consistency term chosen
/// by the loss mode and applied to positives only.
inline SceneLossOutput scene_loss(const TwoStreamModel& model, const Scene& scene, LossMode mode,
                                  std::uint64_t scene_seed) {
  const TwoStreamConfig& cfg = model.config();
  const auto& wts = cfg.weights;
  SceneLossOutput out;

  const ForwardTrace trace = model.two_stream_forward(scene.points, scene.image, scene.proj);
  const auto heads = model.rpn_heads(trace.point_features);

  // ---- RPN ----
  const PointTargets targets = assign_point_targets(trace.points, scene.gt_boxes, cfg.fg_margin);
  out.rpn_positives = targets.positive_idx.size();

  const Tensor fg_prob = detail::clamp_unit(heads.fg_prob);
  const Tensor rpn_cls = focal_loss(fg_prob, targets.fg, wts.focal_alpha, wts.focal_gamma);

  Tensor rpn_bin = Tensor::scalar(0.0);
  Tensor rpn_res = Tensor::scalar(0.0);
  Tensor rpn_ce = Tensor::scalar(0.0);
  if (!targets.positive_idx.empty()) {
    const std::size_t nb = cfg.center_bin_cols(), hb = cfg.heading_logit_cols();
    const Tensor pos_reg = gather_rows(heads.reg, targets.positive_idx);
    std::vector<RegTarget> reg_targets;
    std::vector<TwoStreamModel::AnchorFrame> anchors;
    std::vector<Box3D> matched;
    reg_targets.reserve(targets.positive_idx.size());
    for (std::size_t i = 0; i < targets.positive_idx.size(); ++i) {
      const auto frame =
          TwoStreamModel::AnchorFrame::at_point(trace.points[targets.positive_idx[i]]);
      const Box3D& gt = scene.gt_boxes[targets.matched_gt[i]].box;
      reg_targets.push_back(model.encode_box(frame, gt));
      anchors.push_back(frame);
      matched.push_back(gt);
    }
    const auto reg = reg_loss(slice_cols(pos_reg, 0, nb), slice_cols(pos_reg, nb, 2 * nb),
                              slice_cols(pos_reg, 2 * nb, 2 * nb + hb),
                              slice_cols(pos_reg, 2 * nb + hb, 2 * nb + hb + 7), reg_targets,
                              wts.smooth_l1_beta);
    rpn_bin = reg.bin_term;
    rpn_res = reg.res_term;
    if (mode != LossMode::None) {
      const BoxColumns pred = model.decode_rows_diff(heads.reg, targets.positive_idx, anchors);
      const Tensor iou = iou_3d_axis_aligned_diff(pred, box_columns_from(matched));
      const Tensor conf = gather_rows(fg_prob, targets.positive_idx);
      rpn_ce = mean(detail::ce_term_rows(conf, iou, mode));
    }
  }
  const Tensor rpn_total = stage_loss(rpn_cls, rpn_bin, rpn_res, rpn_ce, wts.lambda,
                                      &out.breakdown.rpn);

  // ---- refinement ----
  const auto proposals = model.generate_proposals(trace, heads);
  const auto refined = model.refine(proposals, trace, scene_seed);

  Tensor rcnn_total = Tensor::scalar(0.0);
  if (!proposals.empty()) {
    std::vector<int> labels(proposals.size(), 0);
    std::vector<std::size_t> pos_rows;
    std::vector<TwoStreamModel::AnchorFrame> pos_anchors;
    std::vector<Box3D> pos_gt;
    std::vector<RegTarget> reg_targets;
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      double best = 0.0;
      std::ptrdiff_t best_gt = -1;
      for (std::size_t g = 0; g < scene.gt_boxes.size(); ++g) {
        const double overlap = iou_3d(proposals[i].box, scene.gt_boxes[g].box);
        if (overlap > best) {
          best = overlap;
          best_gt = static_cast<std::ptrdiff_t>(g);
        }
      }
      if (best_gt >= 0 && best > cfg.rcnn_pos_iou) {
        labels[i] = 1;
        pos_rows.push_back(i);
        const auto frame = model.refine_frame(proposals[i].box);
        pos_anchors.push_back(frame);
        pos_gt.push_back(scene.gt_boxes[static_cast<std::size_t>(best_gt)].box);
        reg_targets.push_back(
            model.encode_box(frame, scene.gt_boxes[static_cast<std::size_t>(best_gt)].box));
      }
    }
    out.rcnn_positives = pos_rows.size();

    const Tensor rcnn_prob = detail::clamp_unit(refined.confidence);
    const Tensor rcnn_cls = focal_loss(rcnn_prob, labels, wts.focal_alpha, wts.focal_gamma);
    Tensor rcnn_bin = Tensor::scalar(0.0);
    Tensor rcnn_res = Tensor::scalar(0.0);
    Tensor rcnn_ce = Tensor::scalar(0.0);
    if (!pos_rows.empty()) {
      const std::size_t nb = cfg.center_bin_cols(), hb = cfg.heading_logit_cols();
      const Tensor pos_reg = gather_rows(refined.reg, pos_rows);
      const auto reg = reg_loss(slice_cols(pos_reg, 0, nb), slice_cols(pos_reg, nb, 2 * nb),
                                slice_cols(pos_reg, 2 * nb, 2 * nb + hb),
                                slice_cols(pos_reg, 2 * nb + hb, 2 * nb + hb + 7), reg_targets,
                                wts.smooth_l1_beta);
      rcnn_bin = reg.bin_term;
      rcnn_res = reg.res_term;
      if (mode != LossMode::None) {
        const BoxColumns pred = model.decode_rows_diff(refined.reg, pos_rows, pos_anchors);
        const Tensor iou = iou_3d_axis_aligned_diff(pred, box_columns_from(pos_gt));
        const Tensor conf = gather_rows(rcnn_prob, pos_rows);
        rcnn_ce = mean(detail::ce_term_rows(conf, iou, mode));
      }
    }
    rcnn_total = stage_loss(rcnn_cls, rcnn_bin, rcnn_res, rcnn_ce, wts.lambda,
                            &out.breakdown.rcnn);
  }

  out.total = add(rpn_total, rcnn_total);
  out.breakdown.total = out.total.value();
  return out;
}

// ---------------------------------------------------------------------------
// train state and step
// ---------------------------------------------------------------------------

struct TrainState {
  TwoStreamModel model;
  AdamState opt;
  std::uint64_t step = 0;
  Rng rng;  // reserved for stochastic augmentation; serialized

  explicit TrainState(const TwoStreamConfig& cfg) : model(cfg), rng(cfg.seed ^ 0x7261696eULL) {
    opt.init(model.params());
  }
};

/// One optimization step over a batch of preprocessed scenes. The batch
/// loss is the mean of per-scene totals; gradients flow through every
/// parameter group. Non-finite losses abort before touching parameters.
inline LossBreakdown train_step(TrainState& state, const std::vector<Scene>& batch, LossMode mode,
                                double lr_scale = 1.0) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  state.model.params().zero_grads();

  LossBreakdown avg;
  Tensor total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::uint64_t scene_seed =
        mix_seed(state.model.config().seed, static_cast<std::uint64_t>(batch[i].id), state.step);
    SceneLossOutput scene = scene_loss(state.model, batch[i], mode, scene_seed);
    if (!std::isfinite(scene.total.value()))
      throw InputError("train_step: non-finite loss at step " + std::to_string(state.step) +
                       ", scene " + std::to_string(batch[i].id));
    total = i == 0 ? scene.total : add(total, scene.total);
    auto acc = [](StageLoss& dst, const StageLoss& src, double f) {
      dst.cls += f * src.cls;
      dst.reg_bin += f * src.reg_bin;
      dst.reg_res += f * src.reg_res;
      dst.ce += f * src.ce;
      dst.total += f * src.total;
    };
    const double f = 1.0 / static_cast<double>(batch.size());
    acc(avg.rpn, scene.breakdown.rpn, f);
    acc(avg.rcnn, scene.breakdown.rcnn, f);
    avg.total += f * scene.breakdown.total;
  }
  total = mul_scalar(total, 1.0 / static_cast<double>(batch.size()));
  backward(total);
  adam_step(state.model.params(), state.opt, state.model.config(), state.step, lr_scale);
  ++state.step;
  return avg;
}

/// Step-decay annealing of the initial learning rate: x0.3 past 60% of the
/// run, x0.1 past 85%.
inline double lr_schedule(std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return 1.0;
  const double f = static_cast<double>(step) / static_cast<double>(total_steps);
  if (f >= 0.85) return 0.1;
  if (f >= 0.6) return 0.3;
  return 1.0;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kCkptMagic[8] = {'P', 'F', 'C', 'K', 'P', 'T', '0', '1'};

template <class T>
void put_raw(std::vector<std::uint8_t>& out, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get_raw(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ParseError("checkpoint: truncated file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline void put_doubles(std::vector<std::uint8_t>& out, const std::vector<double>& v) {
  put_raw<std::uint64_t>(out, v.size());
  const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
  out.insert(out.end(), p, p + v.size() * sizeof(double));
}

inline std::vector<double> get_doubles(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  const auto n = get_raw<std::uint64_t>(in, pos);
  if (pos + n * sizeof(double) > in.size()) throw ParseError("checkpoint: truncated data block");
  std::vector<double> v(n);
  std::memcpy(v.data(), in.data() + pos, n * sizeof(double));
  pos += n * sizeof(double);
  return v;
}

}  // namespace detail

/// Self-describing binary checkpoint: magic, version, step, RNG state,
/// then per parameter its name, shape, values and both optimizer moments.
/// Little-endian, 64-bit floats.
inline std::vector<std::uint8_t> serialize_checkpoint(const TrainState& state) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), detail::kCkptMagic, detail::kCkptMagic + 8);
  detail::put_raw<std::uint32_t>(out, 1);  // version
  detail::put_raw<std::uint64_t>(out, state.step);
  const auto rng_state = state.rng.state();
  detail::put_raw<std::uint64_t>(out, rng_state.size());
  for (std::uint64_t w : rng_state) detail::put_raw<std::uint64_t>(out, w);

  const auto& params = state.model.params();
  detail::put_raw<std::uint64_t>(out, params.items.size());
  for (std::size_t i = 0; i < params.items.size(); ++i) {
    const auto& [name, tensor] = params.items[i];
    detail::put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.ndim()));
    for (std::size_t d : tensor.shape()) detail::put_raw<std::uint64_t>(out, d);
    detail::put_doubles(out, tensor.data());
    detail::put_doubles(out, state.opt.m[i]);
    detail::put_doubles(out, state.opt.v[i]);
  }
  return out;
}

inline void load_checkpoint(TrainState& state, const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  if (bytes.size() < 8 || std::memcmp(bytes.data(), detail::kCkptMagic, 8) != 0)
    throw ParseError("checkpoint: bad magic");
  pos = 8;
  const auto version = detail::get_raw<std::uint32_t>(bytes, pos);
  if (version != 1) throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  state.step = detail::get_raw<std::uint64_t>(bytes, pos);
  const auto rng_words = detail::get_raw<std::uint64_t>(bytes, pos);
  std::vector<std::uint64_t> rng_state(rng_words);
  for (auto& w : rng_state) w = detail::get_raw<std::uint64_t>(bytes, pos);
  state.rng.restore(rng_state);

  auto& params = state.model.params();
  const auto count = detail::get_raw<std::uint64_t>(bytes, pos);
  if (count != params.items.size())
    throw ParseError("checkpoint: parameter count mismatch (file " + std::to_string(count) +
                     ", model " + std::to_string(params.items.size()) + ")");
  for (std::size_t i = 0; i < count; ++i) {
    const auto name_len = detail::get_raw<std::uint32_t>(bytes, pos);
    if (pos + name_len > bytes.size()) throw ParseError("checkpoint: truncated name");
    const std::string name(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                           bytes.begin() + static_cast<std::ptrdiff_t>(pos + name_len));
    pos += name_len;
    auto& [expect_name, tensor] = params.items[i];
    if (name != expect_name)
      throw ParseError("checkpoint: parameter '" + name + "' where '" + expect_name +
                       "' expected");
    const auto ndim = detail::get_raw<std::uint32_t>(bytes, pos);
    Shape shape(ndim);
    for (auto& d : shape) d = detail::get_raw<std::uint64_t>(bytes, pos);
    if (shape != tensor.shape())
      throw ParseError("checkpoint: shape mismatch for parameter '" + name + "'");
    auto data = detail::get_doubles(bytes, pos);
    if (data.size() != tensor.numel())
      throw ParseError("checkpoint: value count mismatch for parameter '" + name + "'");
    tensor.data() = std::move(data);
    tensor.zero_grad();
    state.opt.m[i] = detail::get_doubles(bytes, pos);
    state.opt.v[i] = detail::get_doubles(bytes, pos);
    if (state.opt.m[i].size() != tensor.numel() || state.opt.v[i].size() != tensor.numel())
      throw ParseError("checkpoint: moment size mismatch for parameter '" + name + "'");
  }
}

inline void save_checkpoint_file(const TrainState& state, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(state);
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

inline void load_checkpoint_file(TrainState& state, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  load_checkpoint(state, bytes);
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

/// Runs the full pipeline on one preprocessed scene. With final NMS the
/// result is the detector output; without it, the raw refined candidates
/// (what the consistency diagnostics consume).
inline std::vector<Detection> detect_scene(const TwoStreamModel& model, const Scene& scene,
                                           bool final_nms) {
  const ForwardTrace trace = model.two_stream_forward(scene.points, scene.image, scene.proj);
  const auto heads = model.rpn_heads(trace.point_features);
  const auto proposals = model.generate_proposals(trace, heads);
  const auto refined = model.refine(
      proposals, trace,
      mix_seed(model.config().seed, static_cast<std::uint64_t>(scene.id), 0xe7a1));
  std::vector<Detection> dets;
  dets.reserve(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    Detection d;
    d.scene_id = scene.id;
    d.box = model.decode_box(model.refine_frame(proposals[i].box),
                             refined.reg.data().data() + i * model.config().reg_cols());
    d.confidence = refined.confidence.data()[i];
    dets.push_back(d);
  }
  if (final_nms)
    return nms(dets, model.config().final_nms_iou, model.config().final_top);
  return dets;
}

}  // namespace pf
