#pragma once

// Desk-scale two-stream detector: a four-block image stream, a four-stage
// point stream (set-abstraction analog + feature propagation), LI-Fusion
// sites after every SA stage and once more on the full-resolution features
// with the multi-scale map F_U, then foreground/box heads, proposal
// generation and a single-stage refinement.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "pointfuse/autodiff.hpp"
#include "pointfuse/error.hpp"
#include "pointfuse/eval.hpp"
#include "pointfuse/fusion.hpp"
#include "pointfuse/geometry.hpp"
#include "pointfuse/kitti.hpp"
#include "pointfuse/losses.hpp"
#include "pointfuse/rng.hpp"

namespace pf {

enum class FusionMode { None, Ungated, Full };

enum class LossMode { CE, IouOnly, None };

inline const char* to_string(FusionMode m) {
  switch (m) {
    case FusionMode::None: return "none";
    case FusionMode::Ungated: return "ungated";
    case FusionMode::Full: return "full";
  }
  return "?";
}

inline const char* to_string(LossMode m) {
  switch (m) {
    case LossMode::CE: return "ce";
    case LossMode::IouOnly: return "iou_only";
    case LossMode::None: return "none";
  }
  return "?";
}

struct MeanSize {
  double h = 1.1, w = 1.2, l = 2.4;
};

struct TwoStreamConfig {
  std::size_t image_h = 64, image_w = 64;
  std::array<std::size_t, 4> image_channels{8, 16, 24, 32};
  std::size_t fu_proj_channels = 8;  // per-scale contribution to F_U

  std::array<std::size_t, 4> point_stage_sizes{1024, 256, 64, 32};
  std::array<std::size_t, 4> point_stage_channels{16, 32, 48, 64};
  std::array<double, 4> sa_radius{0.6, 1.2, 2.4, 4.8};
  std::size_t sa_group_size = 8;
  std::array<std::size_t, 4> fp_channels{64, 48, 32, 32};

  FusionMode fusion = FusionMode::Full;
  std::size_t fusion_hidden = 0;  // 0 -> min(Cp, Ci)

  BinConfig center_bins{3.0, 0.5};
  std::size_t heading_bins = 12;
  MeanSize mean_size;
  LossWeights weights;

  // optimizer (adaptive moments)
  double learning_rate = 0.002;
  double weight_decay = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  // proposals and refinement
  std::size_t pre_nms_top = 256;
  double proposal_nms_iou = 0.8;
  std::size_t post_nms_top = 64;
  double final_nms_iou = 0.1;
  std::size_t final_top = 32;
  double rcnn_pos_iou = 0.55;
  std::size_t refine_point_budget = 64;
  double refine_pool_margin = 0.2;  // box enlargement when pooling points
  double fg_margin = 0.1;           // box enlargement for foreground labels

  std::uint64_t seed = 0;

  std::size_t heading_logit_cols() const { return heading_bins; }
  std::size_t center_bin_cols() const { return center_bins.num_bins(); }
  std::size_t reg_cols() const { return 2 * center_bin_cols() + heading_logit_cols() + 7; }

  void validate() const {
    if (image_h % 16 != 0 || image_w % 16 != 0)
      throw ContractError("TwoStreamConfig: image dims must be divisible by 16");
    for (std::size_t i = 1; i < 4; ++i)
      if (point_stage_sizes[i] > point_stage_sizes[i - 1])
        throw ContractError("TwoStreamConfig: point stage sizes must be non-increasing");
    if (sa_group_size < 1) throw ContractError("TwoStreamConfig: sa_group_size must be >= 1");
    weights.validate();
    (void)center_bins.num_bins();
    if (heading_bins < 2) throw ContractError("TwoStreamConfig: need >= 2 heading bins");
  }
};

// ---------------------------------------------------------------------------
// deterministic point sampling and grouping
// ---------------------------------------------------------------------------

/// Farthest-point subsampling over a canonical (lexicographic) ordering of
/// the cloud, so the selection depends on the point set, not input order.
/// The seed picks the starting point within the canonical order.
inline std::vector<std::size_t> farthest_point_indices(
    const std::vector<std::array<double, 3>>& pts, std::size_t count, std::uint64_t seed) {
  const std::size_t n = pts.size();
  if (count > n) throw ContractError("farthest_point_indices: count exceeds cloud size");
  std::vector<std::size_t> canon(n);
  std::iota(canon.begin(), canon.end(), 0);
  std::sort(canon.begin(), canon.end(), [&](std::size_t a, std::size_t b) {
    return pts[a] < pts[b];
  });

  std::vector<std::size_t> rank(n);  // canonical rank per original index
  for (std::size_t i = 0; i < n; ++i) rank[canon[i]] = i;

  std::vector<std::size_t> chosen;
  chosen.reserve(count);
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::size_t cur = canon[seed % n];
  for (std::size_t it = 0; it < count; ++it) {
    chosen.push_back(cur);
    double best = -1.0;
    std::size_t next = cur;
    for (std::size_t i = 0; i < n; ++i) {
      const double dx = pts[i][0] - pts[cur][0];
      const double dy = pts[i][1] - pts[cur][1];
      const double dz = pts[i][2] - pts[cur][2];
      dist[i] = std::min(dist[i], dx * dx + dy * dy + dz * dz);
      if (dist[i] > best || (dist[i] == best && rank[i] < rank[next])) {
        best = dist[i];
        next = i;
      }
    }
    cur = next;
  }
  return chosen;
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

/// Named, ordered parameter registry; the order defines checkpoint layout
/// and the optimizer's traversal.
struct ParamStore {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor add(const std::string& name, Shape shape, Rng& rng, bool zero_init = false) {
    const std::size_t numel = detail::shape_numel(shape);
    std::vector<double> data(numel, 0.0);
    if (!zero_init) {
      // fan-based uniform init: rows are fan-in for 2D, kernels use C*9
      double fan_in = 1.0, fan_out = 1.0;
      if (shape.size() == 2) {
        fan_in = static_cast<double>(shape[0]);
        fan_out = static_cast<double>(shape[1]);
      } else if (shape.size() == 4) {
        fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
        fan_out = static_cast<double>(shape[0] * shape[2] * shape[3]);
      }
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      for (double& v : data) v = rng.uniform(-bound, bound);
    }
    Tensor t(std::move(shape), std::move(data));
    t.set_requires_grad(true);
    items.emplace_back(name, t);
    return t;
  }

  Tensor find(const std::string& name) const {
    for (const auto& [k, v] : items)
      if (k == name) return v;
    throw InputError("ParamStore: no parameter named " + name);
  }

  void zero_grads() {
    for (auto& [k, v] : items) v.zero_grad();
  }
};

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

struct ImageBlock {
  Tensor k1, b1;  // stride-1 conv
  Tensor k2, b2;  // stride-2 conv
};

struct SaStage {
  Tensor w, b;
};

struct FpStage {
  Tensor w, b;
};

struct FusionSite {
  LiFusionLayer layer;
};

struct ImageStreamOut {
  std::array<Tensor, 4> maps;  // F_1..F_4 at strides 2, 4, 8, 16
  Tensor fused_map;            // F_U at full resolution
};

struct PointStageOut {
  std::vector<std::array<double, 3>> pts;
  Tensor feats;
};

struct ForwardTrace {
  std::vector<std::array<double, 3>> points;  // the cloud the net consumed
  Tensor point_features;                      // N x C_final
  std::vector<Tensor> weight_maps;            // one per active fusion site
};

class TwoStreamModel {
 public:
  explicit TwoStreamModel(const TwoStreamConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed ^ 0xb10c5eedULL);
    std::size_t in_ch = 3;
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t out_ch = cfg_.image_channels[i];
      blocks_[i].k1 = params_.add("image.block" + std::to_string(i) + ".k1",
                                  {out_ch, in_ch, 3, 3}, rng);
      blocks_[i].b1 = params_.add("image.block" + std::to_string(i) + ".b1", {out_ch}, rng, true);
      blocks_[i].k2 = params_.add("image.block" + std::to_string(i) + ".k2",
                                  {out_ch, out_ch, 3, 3}, rng);
      blocks_[i].b2 = params_.add("image.block" + std::to_string(i) + ".b2", {out_ch}, rng, true);
      fu_proj_[i] = params_.add("image.fu_proj" + std::to_string(i),
                                {cfg_.fu_proj_channels, out_ch}, rng);
      in_ch = out_ch;
    }

    std::size_t pc = 3;  // initial point features: raw coordinates
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t out_ch = cfg_.point_stage_channels[i];
      sa_[i].w = params_.add("point.sa" + std::to_string(i) + ".w", {pc + 3, out_ch}, rng);
      sa_[i].b = params_.add("point.sa" + std::to_string(i) + ".b", {out_ch}, rng, true);
      pc = out_ch;
      if (cfg_.fusion != FusionMode::None) {
        sa_fusion_[i] = make_fusion_site("fusion.sa" + std::to_string(i), pc,
                                         cfg_.image_channels[i], rng);
        pc += cfg_.image_channels[i];
      }
      stage_out_ch_[i] = pc;
    }

    // FP chain: coarse stage 3 -> 2 -> 1 -> 0 -> original cloud.
    std::size_t carried = stage_out_ch_[3];
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t skip = i < 3 ? stage_out_ch_[2 - i] : 3;
      const std::size_t out_ch = cfg_.fp_channels[i];
      fp_[i].w = params_.add("point.fp" + std::to_string(i) + ".w", {carried + skip, out_ch}, rng);
      fp_[i].b = params_.add("point.fp" + std::to_string(i) + ".b", {out_ch}, rng, true);
      carried = out_ch;
    }
    std::size_t final_ch = carried;
    if (cfg_.fusion != FusionMode::None) {
      const std::size_t fu_ch = 4 * cfg_.fu_proj_channels;
      fu_fusion_ = make_fusion_site("fusion.fu", final_ch, fu_ch, rng);
      final_ch += fu_ch;
    }
    final_ch_ = final_ch;

    fg_w_ = params_.add("head.fg.w", {final_ch, 1}, rng);
    fg_b_ = params_.add("head.fg.b", {1}, rng, true);
    reg_w_ = params_.add("head.reg.w", {final_ch, cfg_.reg_cols()}, rng);
    reg_b_ = params_.add("head.reg.b", {cfg_.reg_cols()}, rng, true);

    const std::size_t rc = 64;
    refine_mlp_w_ = params_.add("refine.mlp.w", {final_ch + 3, rc}, rng);
    refine_mlp_b_ = params_.add("refine.mlp.b", {rc}, rng, true);
    refine_hidden_w_ = params_.add("refine.hidden.w", {rc, rc}, rng);
    refine_hidden_b_ = params_.add("refine.hidden.b", {rc}, rng, true);
    refine_cls_w_ = params_.add("refine.cls.w", {rc, 1}, rng);
    refine_cls_b_ = params_.add("refine.cls.b", {1}, rng, true);
    refine_reg_w_ = params_.add("refine.reg.w", {rc, cfg_.reg_cols()}, rng);
    refine_reg_b_ = params_.add("refine.reg.b", {cfg_.reg_cols()}, rng, true);
  }

  const TwoStreamConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::size_t final_channels() const { return final_ch_; }

  /// Per-image standardization: y = (x - mean) / sqrt(var + eps), fully on
  /// the graph. Keeps the image features on a stable scale whatever the
  /// exposure; a zero image stays exactly zero.
  static Tensor standardize_image(const Tensor& image) {
    const Tensor m = mean(image);
    const Tensor centered = add_broadcast(image, neg(m));
    const Tensor var = mean(mul(centered, centered));
    return mul_broadcast(centered, pow_scalar(add_scalar(var, 1e-8), -0.5));
  }

  /// Image stream: per-image standardization, four blocks of (conv3x3 s1,
  /// relu, conv3x3 s2, relu), then F_U as the channel concat of per-scale
  /// 1x1 projections brought back to full resolution with nearest-neighbor
  /// upsampling.
  ImageStreamOut image_stream_forward(const Tensor& image) const {
    if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_h ||
        image.dim(2) != cfg_.image_w)
      throw ContractError("image_stream_forward: expected 3x" + std::to_string(cfg_.image_h) +
                          "x" + std::to_string(cfg_.image_w) + " image, got " +
                          detail::shape_str(image.shape()));
    ImageStreamOut out;
    Tensor cur = standardize_image(image);
    Tensor fu;
    for (std::size_t i = 0; i < 4; ++i) {
      cur = relu(add_channel_bias(conv2d(cur, blocks_[i].k1, 1, 1), blocks_[i].b1));
      cur = relu(add_channel_bias(conv2d(cur, blocks_[i].k2, 2, 1), blocks_[i].b2));
      out.maps[i] = cur;
      // project first, then upsample: pointwise ops commute with
      // replication, and the projected map is 2^(i+1) times smaller.
      const Tensor up = upsample_nearest(conv1x1(cur, fu_proj_[i]), 1 << (i + 1));
      fu = i == 0 ? up : concat_maps(fu, up);
    }
    out.fused_map = fu;
    return out;
  }

  /// One SA stage: seeded farthest-point subsampling, radius grouping with
  /// at most k members (center always first, slots padded by repeating the
  /// center), a shared linear+relu on [feature, relative position], then a
  /// per-group channel max.
  PointStageOut sa_stage(const std::vector<std::array<double, 3>>& pts, const Tensor& feats,
                         std::size_t out_count, double radius, std::size_t k,
                         std::uint64_t stage_seed, const SaStage& stage) const {
    if (out_count > pts.size()) throw ContractError("sa_stage: out_count exceeds point count");
    if (k < 1) throw ContractError("sa_stage: group size must be >= 1");
    const auto centers = farthest_point_indices(pts, out_count, stage_seed);

    const std::size_t g = centers.size();
    std::vector<std::size_t> member_idx(g * k);
    std::vector<double> rel(g * k * 3, 0.0);
    std::vector<std::pair<double, std::size_t>> within;
    for (std::size_t gi = 0; gi < g; ++gi) {
      const auto& cpt = pts[centers[gi]];
      within.clear();
      if (radius > 0.0) {
        const double r2 = radius * radius;
        for (std::size_t i = 0; i < pts.size(); ++i) {
          if (i == centers[gi]) continue;
          const double dx = pts[i][0] - cpt[0], dy = pts[i][1] - cpt[1],
                       dz = pts[i][2] - cpt[2];
          const double d2 = dx * dx + dy * dy + dz * dz;
          if (d2 <= r2) within.emplace_back(d2, i);
        }
        const std::size_t take = std::min(within.size(), k - 1);
        std::partial_sort(within.begin(), within.begin() + static_cast<std::ptrdiff_t>(take),
                          within.end());
        within.resize(take);
      }
      member_idx[gi * k] = centers[gi];
      for (std::size_t m = 0; m < k - 1; ++m) {
        const std::size_t src = m < within.size() ? within[m].second : centers[gi];
        member_idx[gi * k + 1 + m] = src;
        rel[(gi * k + 1 + m) * 3 + 0] = pts[src][0] - cpt[0];
        rel[(gi * k + 1 + m) * 3 + 1] = pts[src][1] - cpt[1];
        rel[(gi * k + 1 + m) * 3 + 2] = pts[src][2] - cpt[2];
      }
    }

    const Tensor gathered = gather_rows(feats, member_idx);
    const Tensor group_in = concat(gathered, Tensor({g * k, 3}, std::move(rel)));
    const Tensor activated = relu(linear(group_in, stage.w, stage.b));
    const Tensor pooled = grouped_max(reshape(activated, {g, k, stage.w.dim(1)}));

    PointStageOut out;
    out.pts.reserve(g);
    for (std::size_t idx : centers) out.pts.push_back(pts[idx]);
    out.feats = pooled;
    return out;
  }

  /// Feature propagation: inverse-distance 3-NN interpolation of coarse
  /// features onto fine points, concat with skip features, linear+relu.
  Tensor fp_stage(const std::vector<std::array<double, 3>>& coarse_pts, const Tensor& coarse_feats,
                  const std::vector<std::array<double, 3>>& fine_pts, const Tensor& fine_skip,
                  const FpStage& stage) const {
    if (coarse_pts.empty()) throw ContractError("fp_stage: empty coarse set");
    const std::size_t n = fine_pts.size(), m = coarse_pts.size();
    std::vector<std::array<std::size_t, 3>> idx(n);
    std::vector<std::array<double, 3>> wgt(n);
    std::array<std::pair<double, std::size_t>, 3> nn;
    for (std::size_t i = 0; i < n; ++i) {
      nn.fill({std::numeric_limits<double>::infinity(), 0});
      for (std::size_t j = 0; j < m; ++j) {
        const double dx = fine_pts[i][0] - coarse_pts[j][0];
        const double dy = fine_pts[i][1] - coarse_pts[j][1];
        const double dz = fine_pts[i][2] - coarse_pts[j][2];
        const double d2 = dx * dx + dy * dy + dz * dz;
        if (d2 < nn[2].first) {
          nn[2] = {d2, j};
          if (nn[2].first < nn[1].first) std::swap(nn[1], nn[2]);
          if (nn[1].first < nn[0].first) std::swap(nn[0], nn[1]);
        }
      }
      const std::size_t use = std::min<std::size_t>(3, m);
      double total = 0.0;
      for (std::size_t t = 0; t < use; ++t) {
        wgt[i][t] = 1.0 / (std::sqrt(nn[t].first) + 1e-8);
        idx[i][t] = nn[t].second;
        total += wgt[i][t];
      }
      for (std::size_t t = use; t < 3; ++t) {
        idx[i][t] = nn[0].second;
        wgt[i][t] = 0.0;
      }
      for (std::size_t t = 0; t < use; ++t) wgt[i][t] /= total;
    }
    const Tensor interpolated = weighted_gather_rows(coarse_feats, idx, wgt);
    return relu(linear(concat(interpolated, fine_skip), stage.w, stage.b));
  }

  /// Full two-stream forward to per-point features. The cloud must already
  /// be preprocessed (cropped and subsampled to point_stage_sizes[0]).
  ForwardTrace two_stream_forward(const std::vector<std::array<double, 3>>& points,
                                  const Tensor& image, const ProjectionMatrix& proj) const {
    if (points.size() != cfg_.point_stage_sizes[0])
      throw ContractError("two_stream_forward: expected " +
                          std::to_string(cfg_.point_stage_sizes[0]) + " points, got " +
                          std::to_string(points.size()));
    ForwardTrace trace;
    trace.points = points;

    std::optional<ImageStreamOut> image_out;
    if (cfg_.fusion != FusionMode::None) image_out = image_stream_forward(image);

    std::vector<double> coords(points.size() * 3);
    for (std::size_t i = 0; i < points.size(); ++i)
      for (std::size_t d = 0; d < 3; ++d) coords[i * 3 + d] = points[i][d];
    Tensor feats({points.size(), 3}, std::move(coords));

    std::array<PointStageOut, 4> stages;
    const std::vector<std::array<double, 3>>* cur_pts = &points;
    for (std::size_t i = 0; i < 4; ++i) {
      stages[i] = sa_stage(*cur_pts, feats, cfg_.point_stage_sizes[i], cfg_.sa_radius[i],
                           cfg_.sa_group_size, cfg_.seed + i, sa_[i]);
      if (cfg_.fusion != FusionMode::None) {
        const auto corr = generate_grid(stages[i].pts, proj, 1 << (i + 1), cfg_.image_h,
                                        cfg_.image_w);
        const Tensor sampled = sample_point_features(image_out->maps[i], corr);
        stages[i].feats = apply_fusion(sa_fusion_[i], stages[i].feats, sampled, trace);
      }
      cur_pts = &stages[i].pts;
      feats = stages[i].feats;
    }

    Tensor carried = stages[3].feats;
    for (std::size_t i = 0; i < 3; ++i)
      carried = fp_stage(stages[3 - i].pts, carried, stages[2 - i].pts, stages[2 - i].feats,
                         fp_[i]);
    std::vector<double> raw(points.size() * 3);
    for (std::size_t i = 0; i < points.size(); ++i)
      for (std::size_t d = 0; d < 3; ++d) raw[i * 3 + d] = points[i][d];
    Tensor final_feats = fp_stage(stages[0].pts, carried, points,
                                  Tensor({points.size(), 3}, std::move(raw)), fp_[3]);

    if (cfg_.fusion != FusionMode::None) {
      const auto corr = generate_grid(points, proj, 1, cfg_.image_h, cfg_.image_w);
      const Tensor sampled = sample_point_features(image_out->fused_map, corr);
      final_feats = apply_fusion(*fu_fusion_, final_feats, sampled, trace);
    }
    trace.point_features = final_feats;
    return trace;
  }

  struct HeadsOut {
    Tensor fg_prob;     // N x 1, sigmoid
    Tensor reg;         // N x reg_cols
  };

  HeadsOut rpn_heads(const Tensor& point_features) const {
    return {sigmoid(linear(point_features, fg_w_, fg_b_)),
            linear(point_features, reg_w_, reg_b_)};
  }

  // ---- box encode / decode -------------------------------------------------

  BinConfig heading_config() const { return BinConfig::heading(cfg_.heading_bins); }

  /// Anchor frame for box regression: a position plus a yaw. RPN anchors
  /// are bare points (yaw 0); refinement anchors are proposal boxes, whose
  /// yaw canonicalizes the pooled coordinates and the regression targets.
  struct AnchorFrame {
    double x = 0.0, y = 0.0, z = 0.0;
    double yaw = 0.0;

    static AnchorFrame at_point(const std::array<double, 3>& p) { return {p[0], p[1], p[2], 0.0}; }
    static AnchorFrame at_box(const Box3D& b) { return {b.x, b.y, b.z, b.yaw}; }

    // world offset -> frame-local (along, across)
    std::pair<double, double> to_local(double dx, double dz) const {
      const double c = std::cos(yaw), s = std::sin(yaw);
      return {c * dx - s * dz, s * dx + c * dz};
    }
    std::pair<double, double> to_world(double lx, double lz) const {
      const double c = std::cos(yaw), s = std::sin(yaw);
      return {c * lx + s * lz, -s * lx + c * lz};
    }
  };

  /// Offsets of a ground-truth box relative to an anchor frame: x/z bins
  /// and residuals in the frame's axes, y and sizes raw, yaw binned as the
  /// wrapped offset from the frame yaw.
  RegTarget encode_box(const AnchorFrame& frame, const Box3D& gt) const {
    RegTarget t;
    const auto [lx, lz] = frame.to_local(gt.x - frame.x, gt.z - frame.z);
    const auto ex = bin_encode(lx, cfg_.center_bins);
    const auto ez = bin_encode(lz, cfg_.center_bins);
    const auto eyaw = bin_encode(wrap_angle(gt.yaw - frame.yaw), heading_config());
    t.bin_x = ex.bin;
    t.bin_z = ez.bin;
    t.bin_yaw = eyaw.bin;
    t.clamped = ex.clamped || ez.clamped || eyaw.clamped;
    t.residuals = {ex.residual,          gt.y - frame.y,          ez.residual,
                   gt.h - cfg_.mean_size.h, gt.w - cfg_.mean_size.w, gt.l - cfg_.mean_size.l,
                   eyaw.residual};
    return t;
  }

  /// Regression frame for refining a proposal: the box frame shifted by
  /// half a bin along both local axes and half a heading bin. A converged
  /// proposal then encodes at bin CENTERS; without the shift its near-zero
  /// offsets straddle the bin edge at 0 and the bin labels degenerate into
  /// coin flips.
  AnchorFrame refine_frame(const Box3D& box) const {
    AnchorFrame f = AnchorFrame::at_box(box);
    const double half = cfg_.center_bins.bin_size / 2.0;
    const auto [dx, dz] = f.to_world(half, half);
    f.x += dx;
    f.z += dz;
    f.yaw = wrap_angle(f.yaw + heading_config().bin_size / 2.0);
    return f;
  }

  /// Decodes one regression row (argmax bins + residuals) against an anchor
  /// frame. Sizes are clamped to a small positive floor.
  Box3D decode_box(const AnchorFrame& frame, const double* reg_row) const {
    const std::size_t nb = cfg_.center_bin_cols();
    const std::size_t hb = cfg_.heading_logit_cols();
    auto argmax = [](const double* v, std::size_t n) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (v[i] > v[best]) best = i;
      return best;
    };
    const std::size_t bx = argmax(reg_row, nb);
    const std::size_t bz = argmax(reg_row + nb, nb);
    const std::size_t byaw = argmax(reg_row + 2 * nb, hb);
    const double* res = reg_row + 2 * nb + hb;
    const double lx = bin_decode(bx, res[0], cfg_.center_bins);
    const double lz = bin_decode(bz, res[2], cfg_.center_bins);
    const auto [dx, dz] = frame.to_world(lx, lz);
    const double y = frame.y + res[1];
    const double h = std::max(0.05, cfg_.mean_size.h + res[3]);
    const double w = std::max(0.05, cfg_.mean_size.w + res[4]);
    const double l = std::max(0.05, cfg_.mean_size.l + res[5]);
    const double yaw = wrap_angle(frame.yaw + bin_decode(byaw, res[6], heading_config()));
    return Box3D(frame.x + dx, y, frame.z + dz, h, w, l, yaw);
  }

  /// Differentiable decode of the boxes of selected rows: bins are taken at
  /// their argmax (constants), residual columns stay on the graph, and the
  /// frame rotation enters as constant per-row coefficients. Yaw is
  /// detached entirely, matching the axis-aligned IoU surrogate.
  BoxColumns decode_rows_diff(const Tensor& reg, const std::vector<std::size_t>& rows,
                              const std::vector<AnchorFrame>& frames) const {
    const std::size_t nb = cfg_.center_bin_cols();
    const std::size_t hb = cfg_.heading_logit_cols();
    const std::size_t m = rows.size();
    const Tensor picked = gather_rows(reg, rows);
    const Tensor res = slice_cols(picked, 2 * nb + hb, 2 * nb + hb + 7);

    std::vector<double> base_x(m), base_y(m), base_z(m);
    std::vector<double> cos_c(m), sin_c(m);
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = reg.data().data() + rows[i] * cfg_.reg_cols();
      auto argmax = [](const double* v, std::size_t n) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j)
          if (v[j] > v[best]) best = j;
        return best;
      };
      const double bcx = (static_cast<double>(argmax(row, nb)) + 0.5) * cfg_.center_bins.bin_size -
                         cfg_.center_bins.search_range;
      const double bcz =
          (static_cast<double>(argmax(row + nb, nb)) + 0.5) * cfg_.center_bins.bin_size -
          cfg_.center_bins.search_range;
      const auto& f = frames[i];
      const double c = std::cos(f.yaw), s = std::sin(f.yaw);
      // world position of the bin centers; residual terms add on top
      base_x[i] = f.x + c * bcx + s * bcz;
      base_y[i] = f.y;
      base_z[i] = f.z - s * bcx + c * bcz;
      cos_c[i] = c;
      sin_c[i] = s;
    }
    const double delta = cfg_.center_bins.bin_size;
    auto col = [&](std::size_t j) { return slice_cols(res, j, j + 1); };
    const Tensor floor_sz = Tensor::full({m, 1}, 0.05);
    const Tensor cos_col({m, 1}, cos_c);
    const Tensor sin_col({m, 1}, sin_c);
    const Tensor rx = mul_scalar(col(0), delta);  // frame-local residual offsets
    const Tensor rz = mul_scalar(col(2), delta);
    BoxColumns out;
    out.x = add(add(mul(cos_col, rx), mul(sin_col, rz)), Tensor({m, 1}, base_x));
    out.z = add(sub(mul(cos_col, rz), mul(sin_col, rx)), Tensor({m, 1}, base_z));
    out.y = add(col(1), Tensor({m, 1}, base_y));
    out.h = maximum(add_scalar(col(3), cfg_.mean_size.h), floor_sz);
    out.w = maximum(add_scalar(col(4), cfg_.mean_size.w), floor_sz);
    out.l = maximum(add_scalar(col(5), cfg_.mean_size.l), floor_sz);
    return out;
  }

  // ---- proposals and refinement ---------------------------------------------

  struct Proposal {
    Box3D box;
    double confidence = 0.0;
    std::size_t source_point = 0;
  };

  /// Top-K by confidence, rotated NMS at the proposal threshold, keep the
  /// best post_nms_top, sorted by confidence.
  std::vector<Proposal> generate_proposals(const ForwardTrace& trace,
                                           const HeadsOut& heads) const {
    const std::size_t n = trace.points.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return heads.fg_prob.data()[a] > heads.fg_prob.data()[b];
    });
    if (order.size() > cfg_.pre_nms_top) order.resize(cfg_.pre_nms_top);

    std::vector<Detection> dets;
    dets.reserve(order.size());
    for (std::size_t idx : order) {
      Detection d;
      d.scene_id = 0;
      d.box = decode_box(AnchorFrame::at_point(trace.points[idx]),
                         heads.reg.data().data() + idx * cfg_.reg_cols());
      d.confidence = heads.fg_prob.data()[idx];
      d.class_id = static_cast<int>(idx);  // carries the source point through NMS
      dets.push_back(d);
    }
    // NMS treats class_id as a label; suppression here must ignore it, so
    // run with explicit same-scene comparisons.
    std::vector<Proposal> kept;
    for (const auto& det : dets) {
      if (kept.size() >= cfg_.post_nms_top) break;
      bool suppressed = false;
      for (const auto& k : kept)
        if (iou_bev(k.box, det.box) > cfg_.proposal_nms_iou) {
          suppressed = true;
          break;
        }
      if (!suppressed)
        kept.push_back({det.box, det.confidence, static_cast<std::size_t>(det.class_id)});
    }
    return kept;
  }

  struct RefineOut {
    std::vector<Proposal> proposals;            // inputs, same order
    Tensor confidence;                          // P x 1
    Tensor reg;                                 // P x reg_cols
    std::vector<std::vector<std::size_t>> pooled_points;  // per proposal
  };

  /// Pools up to refine_point_budget in-box points per proposal (random
  /// selection, seeded; zero-padded when short), one shared linear+relu and
  /// a channel max per proposal, then classification and regression heads.
  RefineOut refine(const std::vector<Proposal>& proposals, const ForwardTrace& trace,
                   std::uint64_t scene_seed) const {
    const std::size_t p = proposals.size();
    const std::size_t k = cfg_.refine_point_budget;
    RefineOut out;
    out.proposals = proposals;
    out.pooled_points.resize(p);
    if (p == 0) {
      out.confidence = Tensor::zeros({0, 1});
      out.reg = Tensor::zeros({0, cfg_.reg_cols()});
      return out;
    }

    Rng rng(scene_seed ^ 0x9d2c5680ULL);
    std::vector<std::size_t> member_idx(p * k, 0);
    std::vector<double> mask(p * k, 0.0);
    std::vector<double> rel(p * k * 3, 0.0);
    for (std::size_t pi = 0; pi < p; ++pi) {
      const auto& box = proposals[pi].box;
      std::vector<std::size_t> inside;
      for (std::size_t i = 0; i < trace.points.size(); ++i)
        if (box.contains(trace.points[i][0], trace.points[i][1], trace.points[i][2],
                         cfg_.refine_pool_margin))
          inside.push_back(i);
      if (inside.size() > k) {
        const auto pick = rng.sample_without_replacement(inside.size(), k);
        std::vector<std::size_t> chosen;
        chosen.reserve(k);
        for (std::size_t s : pick) chosen.push_back(inside[s]);
        std::sort(chosen.begin(), chosen.end());
        inside = std::move(chosen);
      }
      out.pooled_points[pi] = inside;
      const AnchorFrame frame = refine_frame(box);
      for (std::size_t m = 0; m < inside.size(); ++m) {
        member_idx[pi * k + m] = inside[m];
        mask[pi * k + m] = 1.0;
        // canonicalized: offsets rotated into the proposal's anchor frame
        const auto [lx, lz] = frame.to_local(trace.points[inside[m]][0] - frame.x,
                                             trace.points[inside[m]][2] - frame.z);
        rel[(pi * k + m) * 3 + 0] = lx;
        rel[(pi * k + m) * 3 + 1] = trace.points[inside[m]][1] - frame.y;
        rel[(pi * k + m) * 3 + 2] = lz;
      }
    }

    const Tensor gathered = gather_rows(trace.point_features, member_idx);
    const Tensor masked = row_scale(Tensor({p * k, 1}, std::move(mask)), gathered);
    const Tensor group_in = concat(masked, Tensor({p * k, 3}, std::move(rel)));
    const Tensor activated = relu(linear(group_in, refine_mlp_w_, refine_mlp_b_));
    const Tensor descriptor = grouped_max(reshape(activated, {p, k, refine_mlp_w_.dim(1)}));
    const Tensor hidden = relu(linear(descriptor, refine_hidden_w_, refine_hidden_b_));
    out.confidence = sigmoid(linear(hidden, refine_cls_w_, refine_cls_b_));
    out.reg = linear(hidden, refine_reg_w_, refine_reg_b_);
    return out;
  }

  const std::array<ImageBlock, 4>& image_blocks() const { return blocks_; }
  const std::array<SaStage, 4>& sa_stages() const { return sa_; }
  const std::array<FpStage, 4>& fp_stages() const { return fp_; }
  const std::array<std::optional<FusionSite>, 4>& sa_fusion_sites() const { return sa_fusion_; }
  const std::optional<FusionSite>& fu_fusion_site() const { return fu_fusion_; }

 private:
  std::optional<FusionSite> make_fusion_site(const std::string& name, std::size_t cp,
                                             std::size_t ci, Rng& rng) {
    const std::size_t ct = cfg_.fusion_hidden == 0 ? std::min(cp, ci) : cfg_.fusion_hidden;
    FusionSite site;
    site.layer.u = params_.add(name + ".u", {cp, ct}, rng);
    site.layer.v = params_.add(name + ".v", {ci, ct}, rng);
    site.layer.w = params_.add(name + ".w", {ct, 1}, rng);
    return site;
  }

  Tensor apply_fusion(const std::optional<FusionSite>& site, const Tensor& point_feats,
                      const Tensor& image_feats, ForwardTrace& trace) const {
    if (cfg_.fusion == FusionMode::Ungated) {
      trace.weight_maps.push_back(Tensor::full({point_feats.dim(0), 1}, 1.0));
      return concat(point_feats, image_feats);
    }
    FusionOutput fused = fuse(site->layer, point_feats, image_feats);
    trace.weight_maps.push_back(fused.weight_map);
    return fused.fused;
  }

  TwoStreamConfig cfg_;
  ParamStore params_;
  std::array<ImageBlock, 4> blocks_;
  std::array<Tensor, 4> fu_proj_;
  std::array<SaStage, 4> sa_;
  std::array<FpStage, 4> fp_;
  std::array<std::optional<FusionSite>, 4> sa_fusion_;
  std::optional<FusionSite> fu_fusion_;
  std::array<std::size_t, 4> stage_out_ch_{};
  std::size_t final_ch_ = 0;
  Tensor fg_w_, fg_b_, reg_w_, reg_b_;
  Tensor refine_mlp_w_, refine_mlp_b_, refine_hidden_w_, refine_hidden_b_;
  Tensor refine_cls_w_, refine_cls_b_, refine_reg_w_, refine_reg_b_;
};

}  // namespace pf
