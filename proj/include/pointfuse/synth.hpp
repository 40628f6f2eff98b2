#pragma once

// Synthetic desk-scale scenes: cuboid objects on a ground plane, surface
// point clouds, and a top-down orthographic color image rendered from an
// exact constructed projection matrix, so that projecting an object's
// points lands them on its own silhouette pixels. Target objects and
// geometry-identical decoys differ only by hue, which is what makes the
// image stream informative. Also: the geometric augmentations and the
// illumination perturbation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pointfuse/error.hpp"
#include "pointfuse/geometry.hpp"
#include "pointfuse/kitti.hpp"
#include "pointfuse/rng.hpp"

namespace pf {

struct Rgb {
  double r = 0.0, g = 0.0, b = 0.0;
};

struct SyntheticSceneConfig {
  // placement window (camera coords; y points down, ground at y_ground)
  double x_min = -5.0, x_max = 5.0;
  double z_min = 2.0, z_max = 12.0;
  double y_ground = 1.0;

  int targets_min = 2, targets_max = 4;  // ground-truth objects
  int decoys_min = 2, decoys_max = 4;    // same geometry, background class

  // cuboid size ranges (h, w, l)
  double h_min = 0.9, h_max = 1.3;
  double w_min = 1.0, w_max = 1.5;
  double l_min = 2.0, l_max = 2.9;

  // Cuboids carry no front/back cue, so full-circle yaws would make the
  // heading label ambiguous by pi; half a turn keeps labels unique.
  double yaw_min = -1.49, yaw_max = 1.49;

  int points_per_object = 160;   // surface samples per cuboid
  int min_points_per_box = 32;   // generation-time floor per ground-truth box
  int ground_points = 512;
  double point_jitter = 0.01;    // meters, gaussian
  double color_jitter = 0.0;     // on the 0..1 scale, quantized after

  std::size_t image_h = 64, image_w = 64;
  double pixels_per_meter = 5.0;

  // Hues are distinct in clean and darkened renderings; under the
  // overexposure transform (a=3, b=5) every object channel clamps to 255,
  // so lightened images mark objects loudly but cannot tell them apart.
  Rgb background{80.0 / 255.0, 80.0 / 255.0, 80.0 / 255.0};
  Rgb target_color{230.0 / 255.0, 120.0 / 255.0, 90.0 / 255.0};
  Rgb decoy_color{90.0 / 255.0, 120.0 / 255.0, 230.0 / 255.0};

  double max_pair_iou = 0.05;  // placement constraint, BEV
  int place_retries = 200;

  std::uint64_t seed = 0;
};

struct SceneObject {
  Box3D box;
  bool is_target = false;  // decoys render like targets but are background
};

/// A generated scene plus the object list needed to re-render its image
/// after a geometric transform.
struct SyntheticScene {
  Scene scene;
  std::vector<SceneObject> objects;
};

namespace detail {

inline std::uint8_t quantize255(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Top-down orthographic projection: u = s*x + tu, v = s*z + tv, depth 1.
/// Exact for every point, and the image silhouette of an object is its BEV
/// footprint, which keeps Eq-style point/pixel correspondence honest.
inline ProjectionMatrix synthetic_projection(const SyntheticSceneConfig& cfg) {
  ProjectionMatrix m;
  const double s = cfg.pixels_per_meter;
  const double cx = (static_cast<double>(cfg.image_w) - 1.0) / 2.0;
  m.at(0, 0) = s;
  m.at(0, 3) = cx - s * (cfg.x_min + cfg.x_max) / 2.0;
  m.at(1, 2) = s;
  m.at(1, 3) = -0.5;  // z = 0 maps to the top image edge
  m.at(2, 3) = 1.0;
  return m;
}

/// Renders the color image from the object list: each pixel takes the hue
/// of the object whose footprint contains its world position (later
/// objects win the rare overlap), background elsewhere. Colors are
/// quantized to the 1/255 grid so PPM round-trips are bit-exact.
inline Tensor render_scene_image(const SyntheticSceneConfig& cfg,
                                 const std::vector<SceneObject>& objects, Rng& rng) {
  const std::size_t h = cfg.image_h, w = cfg.image_w;
  const ProjectionMatrix m = synthetic_projection(cfg);
  const double s = m.at(0, 0);
  std::vector<double> data(3 * h * w);
  for (std::size_t row = 0; row < h; ++row)
    for (std::size_t col = 0; col < w; ++col) {
      const double x = (static_cast<double>(col) - m.at(0, 3)) / s;
      const double z = (static_cast<double>(row) - m.at(1, 3)) / s;
      Rgb color = cfg.background;
      for (const auto& obj : objects)
        if (obj.box.contains(x, obj.box.y, z)) color = obj.is_target ? cfg.target_color : cfg.decoy_color;
      double rgb[3] = {color.r, color.g, color.b};
      if (cfg.color_jitter > 0.0)
        for (double& c : rgb) c += cfg.color_jitter * rng.gauss();
      for (std::size_t c = 0; c < 3; ++c)
        data[c * h * w + row * w + col] =
            static_cast<double>(detail::quantize255(rgb[c])) / 255.0;
    }
  return Tensor({3, h, w}, std::move(data));
}

namespace detail {

/// Uniform samples on the cuboid surface (all six faces, area-weighted),
/// with gaussian jitter.
inline void sample_box_surface(const Box3D& box, int count, double jitter, Rng& rng,
                               std::vector<std::array<double, 3>>& out) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double areas[3] = {box.w * box.h, box.l * box.h, box.l * box.w};  // x, z, y faces
  const double total = 2.0 * (areas[0] + areas[1] + areas[2]);
  for (int i = 0; i < count; ++i) {
    double pick = rng.uniform() * total;
    int axis = 0;
    for (; axis < 2; ++axis) {
      if (pick < 2.0 * areas[axis]) break;
      pick -= 2.0 * areas[axis];
    }
    const double side = (pick < areas[axis]) ? 0.5 : -0.5;
    // local frame: lx along heading in [-l/2, l/2], lz across in [-w/2, w/2],
    // ly in [0, h] measured down from the bottom face.
    double lx = rng.uniform(-0.5, 0.5) * box.l;
    double lz = rng.uniform(-0.5, 0.5) * box.w;
    double ly = rng.uniform() * box.h;
    if (axis == 0) lx = side * box.l;
    if (axis == 1) lz = side * box.w;
    if (axis == 2) ly = (side > 0.0) ? box.h : 0.0;
    const double px = box.x + c * lx + s * lz + jitter * rng.gauss();
    const double pz = box.z - s * lx + c * lz + jitter * rng.gauss();
    const double py = box.y - ly + jitter * rng.gauss();
    out.push_back({px, py, pz});
  }
}

inline bool footprint_contains(const Box3D& box, double x, double z, double margin) {
  return box.contains(x, box.y, z, margin);
}

}  // namespace detail

struct GenerationError : InputError {
  using InputError::InputError;
};

/// Deterministic synthetic scene for a seed. Targets become ground-truth
/// boxes; decoys share the size distribution and differ only by color.
inline SyntheticScene generate_synthetic_scene(const SyntheticSceneConfig& cfg) {
  if (cfg.image_h % 16 != 0 || cfg.image_w % 16 != 0)
    throw ContractError("generate_synthetic_scene: image dims must be divisible by 16");
  Rng rng(cfg.seed);
  Rng place_rng = rng.fork(1);
  Rng point_rng = rng.fork(2);
  Rng image_rng = rng.fork(3);

  const int n_targets =
      cfg.targets_min + static_cast<int>(place_rng.uniform_index(
                            static_cast<std::uint64_t>(cfg.targets_max - cfg.targets_min + 1)));
  const int n_decoys =
      cfg.decoys_min + static_cast<int>(place_rng.uniform_index(
                           static_cast<std::uint64_t>(cfg.decoys_max - cfg.decoys_min + 1)));

  SyntheticScene out;
  auto try_place = [&](bool is_target) {
    for (int attempt = 0; attempt < cfg.place_retries; ++attempt) {
      Box3D candidate(place_rng.uniform(cfg.x_min, cfg.x_max), cfg.y_ground,
                      place_rng.uniform(cfg.z_min, cfg.z_max),
                      place_rng.uniform(cfg.h_min, cfg.h_max),
                      place_rng.uniform(cfg.w_min, cfg.w_max),
                      place_rng.uniform(cfg.l_min, cfg.l_max),
                      place_rng.uniform(cfg.yaw_min, cfg.yaw_max));
      bool ok = true;
      for (const auto& other : out.objects)
        if (iou_bev(candidate, other.box) >= cfg.max_pair_iou) {
          ok = false;
          break;
        }
      if (ok) {
        out.objects.push_back({candidate, is_target});
        return;
      }
    }
    throw GenerationError("generate_synthetic_scene: could not place object after " +
                          std::to_string(cfg.place_retries) + " retries");
  };
  for (int i = 0; i < n_targets; ++i) try_place(true);
  for (int i = 0; i < n_decoys; ++i) try_place(false);

  Scene& scene = out.scene;
  scene.id = static_cast<int>(cfg.seed & 0x7fffffff);
  scene.proj = synthetic_projection(cfg);

  // Object surface points; ground-truth boxes keep at least the configured
  // floor by retrying the box's sample until enough land inside.
  for (const auto& obj : out.objects) {
    std::vector<std::array<double, 3>> pts;
    detail::sample_box_surface(obj.box, cfg.points_per_object, cfg.point_jitter, point_rng, pts);
    if (obj.is_target) {
      auto inside = [&]() {
        int n = 0;
        for (const auto& p : pts)
          if (obj.box.contains(p[0], p[1], p[2], 3.0 * cfg.point_jitter)) ++n;
        return n;
      };
      while (inside() < cfg.min_points_per_box)
        detail::sample_box_surface(obj.box, cfg.points_per_object / 4, cfg.point_jitter,
                                   point_rng, pts);
    }
    scene.points.insert(scene.points.end(), pts.begin(), pts.end());
  }

  // Ground points, skipping patches hidden under object footprints.
  int placed = 0;
  while (placed < cfg.ground_points) {
    const double x = point_rng.uniform(cfg.x_min, cfg.x_max);
    const double z = point_rng.uniform(cfg.z_min, cfg.z_max);
    bool hidden = false;
    for (const auto& obj : out.objects)
      if (detail::footprint_contains(obj.box, x, z, 0.1)) {
        hidden = true;
        break;
      }
    if (hidden) continue;
    scene.points.push_back({x, cfg.y_ground + cfg.point_jitter * point_rng.gauss(), z});
    ++placed;
  }

  for (const auto& obj : out.objects)
    if (obj.is_target) scene.gt_boxes.push_back({obj.box, 0});

  scene.image = render_scene_image(cfg, out.objects, image_rng);
  return out;
}

/// KITTI label entries for a synthetic scene's ground truth.
inline std::vector<LabelEntry> synthetic_labels(const SyntheticScene& s) {
  std::vector<LabelEntry> labels;
  for (const auto& obj : s.objects) {
    if (!obj.is_target) continue;
    LabelEntry e;
    e.type = "Car";
    e.h = obj.box.h;
    e.w = obj.box.w;
    e.l = obj.box.l;
    e.x = obj.box.x;
    e.y = obj.box.y;
    e.z = obj.box.z;
    e.yaw = obj.box.yaw;
    labels.push_back(std::move(e));
  }
  return labels;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// Rotates points and boxes about the vertical axis by phi; box yaw becomes
/// yaw - phi (wrapped). The image is untouched; synthetic callers re-render
/// via their object list.
inline Scene augment_rotate(const Scene& scene, double phi) {
  Scene out = scene;
  const double c = std::cos(phi), s = std::sin(phi);
  for (auto& p : out.points) {
    const double x = p[0], z = p[2];
    p[0] = c * x - s * z;
    p[2] = s * x + c * z;
  }
  for (auto& gt : out.gt_boxes) {
    const double x = gt.box.x, z = gt.box.z;
    gt.box.x = c * x - s * z;
    gt.box.z = s * x + c * z;
    gt.box.yaw = wrap_angle(gt.box.yaw - phi);
  }
  return out;
}

/// Mirrors the scene about the forward axis: x -> -x, yaw -> pi - yaw.
inline Scene augment_flip(const Scene& scene) {
  Scene out = scene;
  for (auto& p : out.points) p[0] = -p[0];
  for (auto& gt : out.gt_boxes) {
    gt.box.x = -gt.box.x;
    gt.box.yaw = wrap_angle(kPi - gt.box.yaw);
  }
  return out;
}

/// Global scale: multiplies point positions, box centers and box sizes.
inline Scene augment_scale(const Scene& scene, double s) {
  if (s <= 0.0) throw InputError("augment_scale: scale must be positive");
  Scene out = scene;
  for (auto& p : out.points)
    for (double& v : p) v *= s;
  for (auto& gt : out.gt_boxes) {
    gt.box.x *= s;
    gt.box.y *= s;
    gt.box.z *= s;
    gt.box.h *= s;
    gt.box.w *= s;
    gt.box.l *= s;
  }
  return out;
}

/// Same transforms for a synthetic scene, with the image re-rendered from
/// the transformed object list so pixels stay consistent with geometry.
inline SyntheticScene augment_synthetic_rotate(const SyntheticScene& s,
                                               const SyntheticSceneConfig& cfg, double phi) {
  SyntheticScene out;
  out.scene = augment_rotate(s.scene, phi);
  out.objects = s.objects;
  const double c = std::cos(phi), sn = std::sin(phi);
  for (auto& obj : out.objects) {
    const double x = obj.box.x, z = obj.box.z;
    obj.box.x = c * x - sn * z;
    obj.box.z = sn * x + c * z;
    obj.box.yaw = wrap_angle(obj.box.yaw - phi);
  }
  Rng rng(cfg.seed ^ 0x5079a3c1u);
  out.scene.image = render_scene_image(cfg, out.objects, rng);
  return out;
}

/// Illumination perturbation y = clamp(a*x + b, 0, 255) applied on the
/// 0..255 scale, then renormalized (and requantized) to [0, 1].
inline Tensor perturb_illumination(const Tensor& image, double a, double b) {
  if (image.ndim() != 3) throw ContractError("perturb_illumination: image must be CxHxW");
  std::vector<double> data(image.data().size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double x255 = image.data()[i] * 255.0;
    const double y255 = std::clamp(a * x255 + b, 0.0, 255.0);
    data[i] = static_cast<double>(detail::quantize255(y255 / 255.0)) / 255.0;
  }
  return Tensor(image.shape(), std::move(data));
}

}  // namespace pf
