#pragma once

// Training objectives: the consistency-enforcing loss -log(c * IoU), focal
// classification, smooth-L1, bin-based center/heading regression, and the
// per-stage composition cls + reg + lambda * ce.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pointfuse/autodiff.hpp"
#include "pointfuse/error.hpp"

namespace pf {

/// Bin layout for one symmetric search range: 2*S_r/delta bins over
/// [-S_r, S_r], residuals normalized to [-0.5, 0.5].
struct BinConfig {
  double search_range = 3.0;  // S_r, meters (or radians for headings)
  double bin_size = 0.5;      // delta

  std::size_t num_bins() const {
    const double n = 2.0 * search_range / bin_size;
    const auto rounded = static_cast<std::size_t>(std::llround(n));
    if (rounded < 1 || std::abs(n - static_cast<double>(rounded)) > 1e-9)
      throw ContractError("BinConfig: 2*S_r/delta must be a positive integer");
    return rounded;
  }

  static BinConfig heading(std::size_t bins) {
    if (bins < 2) throw ContractError("BinConfig: need at least 2 heading bins");
    return BinConfig{kPi_, 2.0 * kPi_ / static_cast<double>(bins)};
  }

 private:
  static constexpr double kPi_ = 3.14159265358979323846;
};

struct LossWeights {
  double lambda = 5.0;      // consistency term weight
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double smooth_l1_beta = 1.0;

  void validate() const {
    if (lambda < 0.0 || focal_alpha <= 0.0 || focal_alpha >= 1.0 || focal_gamma < 0.0 ||
        smooth_l1_beta <= 0.0)
      throw ContractError("LossWeights: parameter out of range");
  }
};

struct BinEncoding {
  std::size_t bin = 0;
  double residual = 0.0;  // normalized to [-0.5, 0.5]
  bool clamped = false;   // offset fell outside [-S_r, S_r]
};

/// bin = floor((offset + S_r) / delta), clamped into range; edge offsets
/// belong to the higher bin except the top edge, which clamps down.
inline BinEncoding bin_encode(double offset, const BinConfig& cfg) {
  const std::size_t nbins = cfg.num_bins();
  BinEncoding enc;
  double off = offset;
  if (off < -cfg.search_range) {
    off = -cfg.search_range;
    enc.clamped = true;
  } else if (off > cfg.search_range) {
    off = cfg.search_range;
    enc.clamped = true;
  }
  const double shifted = (off + cfg.search_range) / cfg.bin_size;
  auto bin = static_cast<long>(std::floor(shifted));
  bin = std::clamp<long>(bin, 0, static_cast<long>(nbins) - 1);
  enc.bin = static_cast<std::size_t>(bin);
  enc.residual = shifted - (static_cast<double>(bin) + 0.5);
  return enc;
}

inline double bin_decode(std::size_t bin, double residual, const BinConfig& cfg) {
  if (bin >= cfg.num_bins())
    throw InputError("bin_decode: bin " + std::to_string(bin) + " out of range");
  return (static_cast<double>(bin) + 0.5 + residual) * cfg.bin_size - cfg.search_range;
}

/// Elementwise smooth L1: 0.5 d^2 / beta for |d| < beta, |d| - 0.5 beta
/// otherwise.
inline Tensor smooth_l1(const Tensor& d, double beta) {
  if (beta <= 0.0) throw ContractError("smooth_l1: beta must be positive");
  const auto& dd = d.data();
  std::vector<double> out(dd.size());
  for (std::size_t i = 0; i < dd.size(); ++i) {
    const double a = std::abs(dd[i]);
    out[i] = a < beta ? 0.5 * dd[i] * dd[i] / beta : a - 0.5 * beta;
  }
  auto dn = d.node();
  return make_op(
      d.shape(), std::move(out), {d},
      [dn, beta](detail::Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          const double v = dn->data[i];
          const double slope = std::abs(v) < beta ? v / beta : (v > 0.0 ? 1.0 : -1.0);
          dn->grad[i] += n.grad[i] * slope;
        }
      },
      "smooth_l1");
}

/// Consistency-enforcing loss -log(c * iou), elementwise over matching
/// shapes (scalar in the 1x1 case). The IoU operand is clamped below at
/// 1e-6 so zero overlap cannot emit a non-finite value; confidence must be
/// strictly positive (it comes out of a sigmoid).
inline Tensor ce_loss(const Tensor& confidence, const Tensor& iou) {
  for (double c : confidence.data())
    if (c <= 0.0 || c > 1.0)
      throw DomainError("ce_loss: confidence must lie in (0, 1], got " + std::to_string(c));
  const Tensor iou_safe = maximum(iou, Tensor::full(iou.shape(), 1e-6));
  return neg(add(log(confidence), log(iou_safe)));
}

/// Focal classification loss, mean over points. c_t is p for positives and
/// 1 - p for negatives; alpha weights positives, (1 - alpha) negatives.
inline Tensor focal_loss(const Tensor& p, const std::vector<int>& targets, double alpha,
                         double gamma) {
  if (p.ndim() != 2 || p.dim(1) != 1)
    throw DimensionError("focal_loss: probabilities must be Nx1");
  if (targets.size() != p.dim(0))
    throw DimensionError("focal_loss: target count does not match probability rows");
  for (double v : p.data())
    if (v <= 0.0 || v >= 1.0)
      throw DomainError("focal_loss: probabilities must lie strictly inside (0, 1)");

  const std::size_t n = targets.size();
  std::vector<double> pos(n), weight(n);
  for (std::size_t i = 0; i < n; ++i) {
    pos[i] = targets[i] ? 1.0 : 0.0;
    weight[i] = targets[i] ? alpha : 1.0 - alpha;
  }
  const Tensor t({n, 1}, pos);
  const Tensor w({n, 1}, weight);
  // c_t = t * p + (1 - t) * (1 - p)
  const Tensor one_minus_p = add_scalar(neg(p), 1.0);
  const Tensor ct = add(mul(t, p), mul(add_scalar(neg(t), 1.0), one_minus_p));
  const Tensor focal = mul(w, mul(pow_scalar(add_scalar(neg(ct), 1.0), gamma), neg(log(ct))));
  return mean(focal);
}

/// Encoded regression target for one positive sample.
struct RegTarget {
  std::size_t bin_x = 0, bin_z = 0, bin_yaw = 0;
  // Residual order: x, y, z, h, w, l, yaw. Center-bin residuals are
  // normalized; y and sizes are raw offsets.
  std::array<double, 7> residuals{};
  bool clamped = false;
};

struct RegLossResult {
  Tensor bin_term;  // scalar: summed cross entropy over x, z, yaw bins
  Tensor res_term;  // scalar: summed smooth-L1 over the seven residuals
  bool empty_mask = false;
};

/// Bin logits per axis ([M x B] each) plus [M x 7] residuals against
/// encoded targets. Cross entropy and smooth-L1 are averaged over the M
/// positives and summed over axes. M == 0 returns zero losses with a flag.
inline RegLossResult reg_loss(const Tensor& logits_x, const Tensor& logits_z,
                              const Tensor& logits_yaw, const Tensor& residuals,
                              const std::vector<RegTarget>& targets, double beta) {
  const std::size_t m = targets.size();
  if (m == 0) return {Tensor::scalar(0.0), Tensor::scalar(0.0), true};
  if (logits_x.dim(0) != m || logits_z.dim(0) != m || logits_yaw.dim(0) != m ||
      residuals.dim(0) != m || residuals.dim(1) != 7)
    throw DimensionError("reg_loss: prediction rows do not match target count");

  std::vector<std::size_t> bx(m), bz(m), byaw(m);
  std::vector<double> res(m * 7);
  for (std::size_t i = 0; i < m; ++i) {
    bx[i] = targets[i].bin_x;
    bz[i] = targets[i].bin_z;
    byaw[i] = targets[i].bin_yaw;
    for (std::size_t j = 0; j < 7; ++j) res[i * 7 + j] = targets[i].residuals[j];
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  const Tensor ce = add(add(sum(softmax_cross_entropy(logits_x, bx)),
                            sum(softmax_cross_entropy(logits_z, bz))),
                        sum(softmax_cross_entropy(logits_yaw, byaw)));
  const Tensor res_err = smooth_l1(sub(residuals, Tensor({m, 7}, res)), beta);
  return {mul_scalar(ce, inv_m), mul_scalar(sum(res_err), inv_m), false};
}

/// Per-stage loss values, recorded after the weighted composition.
struct StageLoss {
  double cls = 0.0;
  double reg_bin = 0.0;
  double reg_res = 0.0;
  double ce = 0.0;        // unweighted consistency term
  double total = 0.0;     // cls + reg_bin + reg_res + lambda * ce
};

struct LossBreakdown {
  StageLoss rpn;
  StageLoss rcnn;
  double total = 0.0;  // rpn.total + rcnn.total
};

/// Weighted composition of one stage: cls + reg + lambda * ce. The ce term
/// is zero when the stage had no positives (or the mode disabled it).
inline Tensor stage_loss(const Tensor& cls, const Tensor& reg_bin, const Tensor& reg_res,
                         const Tensor& ce, double lambda, StageLoss* out = nullptr) {
  const Tensor total = add(add(cls, add(reg_bin, reg_res)), mul_scalar(ce, lambda));
  if (out) {
    out->cls = cls.value();
    out->reg_bin = reg_bin.value();
    out->reg_res = reg_res.value();
    out->ce = ce.value();
    out->total = total.value();
  }
  return total;
}

}  // namespace pf
