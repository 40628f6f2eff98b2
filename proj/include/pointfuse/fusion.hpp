#pragma once

// Point-wise LiDAR/image fusion: the grid generator (projection at a
// feature-map scale), the bilinear image sampler, and the LiDAR-guided
// gated fusion layer w = sigmoid(W tanh(U F_P + V F_I)), F_LI = F_P || w F_I.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pointfuse/autodiff.hpp"
#include "pointfuse/error.hpp"
#include "pointfuse/geometry.hpp"
#include "pointfuse/rng.hpp"

namespace pf {

/// Continuous pixel positions (and validity) for N points at one
/// feature-map scale. Coordinates are full-resolution pixels divided by
/// the cumulative stride of the target map.
struct PointImageCorrespondence {
  std::vector<std::pair<double, double>> coords;  // (u, v)
  std::vector<bool> valid;
  std::size_t map_h = 0, map_w = 0;  // feature-map extent at this scale
};

/// Projects points at full resolution, scales by 1/stride, and marks
/// points valid only when the projection succeeded and the scaled position
/// lies inside [-0.5, dim - 0.5) of the target map.
inline PointImageCorrespondence generate_grid(const std::vector<std::array<double, 3>>& points,
                                              const ProjectionMatrix& m, int stride,
                                              std::size_t image_h, std::size_t image_w) {
  if (stride != 1 && stride != 2 && stride != 4 && stride != 8 && stride != 16)
    throw ContractError("generate_grid: stride must be one of 1, 2, 4, 8, 16");
  if (image_h % static_cast<std::size_t>(stride) != 0 ||
      image_w % static_cast<std::size_t>(stride) != 0)
    throw ContractError("generate_grid: image extent not divisible by stride");
  PointImageCorrespondence corr;
  corr.map_h = image_h / static_cast<std::size_t>(stride);
  corr.map_w = image_w / static_cast<std::size_t>(stride);
  corr.coords.resize(points.size(), {0.0, 0.0});
  corr.valid.assign(points.size(), false);
  const auto projected = project_points(points, m);
  const double inv = 1.0 / static_cast<double>(stride);
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!projected[i].valid) continue;
    const double u = projected[i].u * inv;
    const double v = projected[i].v * inv;
    const bool inside = u >= -0.5 && u < static_cast<double>(corr.map_w) - 0.5 && v >= -0.5 &&
                        v < static_cast<double>(corr.map_h) - 0.5;
    corr.coords[i] = {u, v};
    corr.valid[i] = inside;
  }
  return corr;
}

/// Bilinear sample of the feature map at each correspondence; invalid
/// points produce zero rows.
inline Tensor sample_point_features(const Tensor& fmap, const PointImageCorrespondence& corr) {
  if (fmap.ndim() != 3 || fmap.dim(1) != corr.map_h || fmap.dim(2) != corr.map_w)
    throw ContractError("sample_point_features: feature map " + detail::shape_str(fmap.shape()) +
                        " does not match correspondence scale " + std::to_string(corr.map_h) +
                        "x" + std::to_string(corr.map_w));
  return bilinear_sample(fmap, corr.coords, corr.valid);
}

/// Learnable maps of one fusion site; all bias-free.
struct LiFusionLayer {
  Tensor u;  // Cp x Ct
  Tensor v;  // Ci x Ct
  Tensor w;  // Ct x 1

  std::size_t point_channels() const { return u.dim(0); }
  std::size_t image_channels() const { return v.dim(0); }
  std::size_t hidden_channels() const { return u.dim(1); }

  /// Ct defaults to min(Cp, Ci) when hidden == 0.
  static LiFusionLayer create(std::size_t cp, std::size_t ci, std::size_t hidden, Rng& rng) {
    const std::size_t ct = hidden == 0 ? std::min(cp, ci) : hidden;
    auto init = [&rng](std::size_t rows, std::size_t cols) {
      const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
      std::vector<double> data(rows * cols);
      for (double& x : data) x = rng.uniform(-bound, bound);
      Tensor t({rows, cols}, std::move(data));
      t.set_requires_grad(true);
      return t;
    };
    return {init(cp, ct), init(ci, ct), init(ct, 1)};
  }
};

struct FusionOutput {
  Tensor fused;       // N x (Cp + Ci), first Cp channels identical to F_P
  Tensor weight_map;  // N x 1, strictly inside (0, 1)
};

/// w = sigmoid(W tanh(U F_P + V F_I)); fused = concat(F_P, w * F_I).
inline FusionOutput fuse(const LiFusionLayer& layer, const Tensor& point_features,
                         const Tensor& image_features) {
  if (point_features.ndim() != 2 || point_features.dim(1) != layer.point_channels())
    throw ContractError("fuse: point features " + detail::shape_str(point_features.shape()) +
                        " do not match layer Cp " + std::to_string(layer.point_channels()));
  if (image_features.ndim() != 2 || image_features.dim(1) != layer.image_channels())
    throw ContractError("fuse: image features " + detail::shape_str(image_features.shape()) +
                        " do not match layer Ci " + std::to_string(layer.image_channels()));
  if (point_features.dim(0) != image_features.dim(0))
    throw ContractError("fuse: point/image row counts differ");

  const Tensor hidden = tanh_act(add(linear(point_features, layer.u),
                                     linear(image_features, layer.v)));
  const Tensor weight = sigmoid(linear(hidden, layer.w));
  return {concat(point_features, row_scale(weight, image_features)), weight};
}

/// Per-scene weight-map statistics for the fuse-inspect dump.
struct WeightMapStats {
  double min = 0.0, mean = 0.0, max = 0.0;
  std::size_t count = 0;
};

inline WeightMapStats weight_map_stats(const Tensor& weight_map) {
  WeightMapStats stats;
  const auto& d = weight_map.data();
  stats.count = d.size();
  if (d.empty()) return stats;
  stats.min = d[0];
  stats.max = d[0];
  double acc = 0.0;
  for (double v : d) {
    stats.min = std::min(stats.min, v);
    stats.max = std::max(stats.max, v);
    acc += v;
  }
  stats.mean = acc / static_cast<double>(d.size());
  return stats;
}

}  // namespace pf
