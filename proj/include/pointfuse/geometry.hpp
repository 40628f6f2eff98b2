#pragma once

// Oriented 3D boxes in camera coordinates (X right, Y down, Z forward),
// exact rotated IoU via Sutherland-Hodgman clipping on the ground plane,
// a differentiable axis-aligned IoU for the consistency loss path, and the
// pinhole projection used to map points onto the image.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "pointfuse/autodiff.hpp"
#include "pointfuse/error.hpp"
#include "pointfuse/rng.hpp"

namespace pf {

constexpr double kPi = 3.14159265358979323846;

/// Wraps an angle into [-pi, pi). In-range values pass through untouched.
inline double wrap_angle(double a) {
  if (a >= -kPi && a < kPi) return a;
  a = std::fmod(a + kPi, 2.0 * kPi);
  if (a < 0.0) a += 2.0 * kPi;
  return a - kPi;
}

/// Oriented 3D box. Center y is the BOTTOM face (KITTI label convention);
/// the vertical span is [y - h, y]. Yaw rotates about the vertical axis.
struct Box3D {
  double x = 0.0, y = 0.0, z = 0.0;  // bottom-center position, meters
  double h = 1.0, w = 1.0, l = 1.0;  // height, width, length, meters
  double yaw = 0.0;                  // radians in [-pi, pi]

  Box3D() = default;
  Box3D(double x_, double y_, double z_, double h_, double w_, double l_, double yaw_)
      : x(x_), y(y_), z(z_), h(h_), w(w_), l(l_), yaw(wrap_angle(yaw_)) {
    if (h <= 0.0 || w <= 0.0 || l <= 0.0)
      throw InputError("Box3D: dimensions must be strictly positive");
  }

  double volume() const { return h * w * l; }

  /// True when the point lies inside the box (inclusive), with optional
  /// symmetric margin added to each dimension.
  bool contains(double px, double py, double pz, double margin = 0.0) const {
    if (py < y - h - margin || py > y + margin) return false;
    const double dx = px - x, dz = pz - z;
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double lx = c * dx - s * dz;   // along heading
    const double lz = s * dx + c * dz;   // across heading
    return std::abs(lx) <= l / 2.0 + margin && std::abs(lz) <= w / 2.0 + margin;
  }
};

/// 3x4 projection matrix: camera (or LiDAR) frame -> homogeneous pixels.
struct ProjectionMatrix {
  std::array<double, 12> m{};  // row-major 3x4

  double& at(int r, int c) { return m[static_cast<std::size_t>(r * 4 + c)]; }
  double at(int r, int c) const { return m[static_cast<std::size_t>(r * 4 + c)]; }

  static ProjectionMatrix identity() {
    ProjectionMatrix p;
    p.at(0, 0) = p.at(1, 1) = p.at(2, 2) = 1.0;
    return p;
  }
};

struct ProjectedPoint {
  double u = 0.0, v = 0.0;
  bool valid = false;
};

constexpr double kMinProjectionDepth = 1e-6;

/// p_h = M * (x, y, z, 1); valid iff the homogeneous depth exceeds the
/// epsilon, in which case (u, v) = (p_h0 / p_h2, p_h1 / p_h2).
inline std::vector<ProjectedPoint> project_points(
    const std::vector<std::array<double, 3>>& points, const ProjectionMatrix& m) {
  std::vector<ProjectedPoint> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    const double ph0 = m.at(0, 0) * p[0] + m.at(0, 1) * p[1] + m.at(0, 2) * p[2] + m.at(0, 3);
    const double ph1 = m.at(1, 0) * p[0] + m.at(1, 1) * p[1] + m.at(1, 2) * p[2] + m.at(1, 3);
    const double ph2 = m.at(2, 0) * p[0] + m.at(2, 1) * p[1] + m.at(2, 2) * p[2] + m.at(2, 3);
    if (ph2 > kMinProjectionDepth) out[i] = {ph0 / ph2, ph1 / ph2, true};
  }
  return out;
}

/// Convex polygon on the ground (x, z) plane, counter-clockwise.
struct Polygon2D {
  std::vector<std::array<double, 2>> vertices;

  bool empty() const { return vertices.size() < 3; }

  /// Shoelace area; non-negative for CCW order.
  double area() const {
    if (empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < vertices.size(); ++i) {
      const auto& a = vertices[i];
      const auto& b = vertices[(i + 1) % vertices.size()];
      acc += a[0] * b[1] - b[0] * a[1];
    }
    return acc / 2.0;
  }
};

/// Ground-plane footprint: the l x w rectangle centered at (x, z), rotated
/// by yaw, corners in CCW order.
inline Polygon2D box_corners_bev(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = b.l / 2.0, hw = b.w / 2.0;
  // Local (along, across) corners in CCW order; local-to-world is the
  // rotation about the vertical axis used by Box3D::contains.
  const std::array<std::array<double, 2>, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  Polygon2D poly;
  poly.vertices.reserve(4);
  for (const auto& lc : local)
    poly.vertices.push_back({b.x + c * lc[0] + s * lc[1], b.z - s * lc[0] + c * lc[1]});
  return poly;
}

/// Sutherland-Hodgman clip of a convex subject against a convex CCW clip
/// polygon. Result area below 1e-9 is treated as empty.
inline Polygon2D polygon_clip(const Polygon2D& subject, const Polygon2D& clip) {
  std::vector<std::array<double, 2>> output = subject.vertices;
  const auto& cv = clip.vertices;
  for (std::size_t e = 0; e < cv.size() && !output.empty(); ++e) {
    const auto& a = cv[e];
    const auto& b = cv[(e + 1) % cv.size()];
    const double ex = b[0] - a[0], ez = b[1] - a[1];
    auto inside = [&](const std::array<double, 2>& p) {
      return ex * (p[1] - a[1]) - ez * (p[0] - a[0]) >= 0.0;
    };
    auto intersect = [&](const std::array<double, 2>& p, const std::array<double, 2>& q) {
      const double dp = ex * (p[1] - a[1]) - ez * (p[0] - a[0]);
      const double dq = ex * (q[1] - a[1]) - ez * (q[0] - a[0]);
      const double t = dp / (dp - dq);
      return std::array<double, 2>{p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])};
    };
    std::vector<std::array<double, 2>> input = std::move(output);
    output.clear();
    for (std::size_t i = 0; i < input.size(); ++i) {
      const auto& cur = input[i];
      const auto& prev = input[(i + input.size() - 1) % input.size()];
      const bool cur_in = inside(cur), prev_in = inside(prev);
      if (cur_in) {
        if (!prev_in) output.push_back(intersect(prev, cur));
        output.push_back(cur);
      } else if (prev_in) {
        output.push_back(intersect(prev, cur));
      }
    }
  }
  Polygon2D result{std::move(output)};
  if (result.area() < 1e-9) return Polygon2D{};
  return result;
}

/// Rotated intersection area of two box footprints.
inline double intersection_area_bev(const Box3D& a, const Box3D& b) {
  return polygon_clip(box_corners_bev(a), box_corners_bev(b)).area();
}

/// Rotated IoU on the ground plane.
inline double iou_bev(const Box3D& a, const Box3D& b) {
  const double inter = intersection_area_bev(a, b);
  const double area_a = a.l * a.w, area_b = b.l * b.w;
  const double uni = area_a + area_b - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

/// Volumetric IoU: rotated footprint overlap times vertical overlap of the
/// [y - h, y] spans.
inline double iou_3d(const Box3D& a, const Box3D& b) {
  const double y_overlap = std::min(a.y, b.y) - std::max(a.y - a.h, b.y - b.h);
  if (y_overlap <= 0.0) return 0.0;
  const double inter = intersection_area_bev(a, b) * y_overlap;
  const double uni = a.volume() + b.volume() - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

/// Box parameters captured as autodiff tensors, one [N x 1] column per
/// field. Yaw is intentionally absent: it is detached from this path.
struct BoxColumns {
  Tensor x, y, z, h, w, l;

  std::size_t count() const { return x.dim(0); }
};

inline BoxColumns box_columns_from(const std::vector<Box3D>& boxes) {
  const std::size_t n = boxes.size();
  std::vector<double> xs(n), ys(n), zs(n), hs(n), ws(n), ls(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = boxes[i].x;
    ys[i] = boxes[i].y;
    zs[i] = boxes[i].z;
    hs[i] = boxes[i].h;
    ws[i] = boxes[i].w;
    ls[i] = boxes[i].l;
  }
  return {Tensor({n, 1}, xs), Tensor({n, 1}, ys), Tensor({n, 1}, zs),
          Tensor({n, 1}, hs), Tensor({n, 1}, ws), Tensor({n, 1}, ls)};
}

/// Differentiable axis-aligned 3D IoU, yaw ignored on both sides. Exact
/// for yaw-aligned pairs; the standard surrogate inside the consistency
/// loss. Returns an [N x 1] column (scalar when N == 1).
inline Tensor iou_3d_axis_aligned_diff(const BoxColumns& a, const BoxColumns& b) {
  const std::size_t n = a.count();
  if (b.count() != n) throw DimensionError("iou_3d_axis_aligned_diff: box counts differ");
  auto zero = Tensor::zeros({n, 1});
  auto half = [&](const Tensor& t) { return mul_scalar(t, 0.5); };

  // Per-axis overlap: max(0, min(hi_a, hi_b) - max(lo_a, lo_b)).
  auto overlap = [&](const Tensor& lo_a, const Tensor& hi_a, const Tensor& lo_b,
                     const Tensor& hi_b) {
    return maximum(zero, sub(minimum(hi_a, hi_b), maximum(lo_a, lo_b)));
  };
  const Tensor ox = overlap(sub(a.x, half(a.l)), add(a.x, half(a.l)),
                            sub(b.x, half(b.l)), add(b.x, half(b.l)));
  const Tensor oz = overlap(sub(a.z, half(a.w)), add(a.z, half(a.w)),
                            sub(b.z, half(b.w)), add(b.z, half(b.w)));
  const Tensor oy = overlap(sub(a.y, a.h), a.y, sub(b.y, b.h), b.y);

  const Tensor inter = mul(mul(ox, oz), oy);
  const Tensor vol_a = mul(mul(a.h, a.w), a.l);
  const Tensor vol_b = mul(mul(b.h, b.w), b.l);
  return div(inter, sub(add(vol_a, vol_b), inter));
}

struct MonteCarloIou {
  double iou = 0.0;
  double std_err = 0.0;
  std::size_t union_hits = 0;
};

/// Independent Monte-Carlo IoU oracle: uniform samples over the joint
/// bounding volume, IoU estimated as inter hits / union hits.
inline MonteCarloIou mc_iou_oracle(const Box3D& a, const Box3D& b, std::size_t samples,
                                   std::uint64_t seed) {
  if (samples < 1) throw InputError("mc_iou_oracle: need at least one sample");
  auto bounds = [](const Box3D& box, double& lo_x, double& hi_x, double& lo_y, double& hi_y,
                   double& lo_z, double& hi_z) {
    const double r = std::hypot(box.l, box.w) / 2.0;
    lo_x = box.x - r;
    hi_x = box.x + r;
    lo_y = box.y - box.h;
    hi_y = box.y;
    lo_z = box.z - r;
    hi_z = box.z + r;
  };
  double ax0, ax1, ay0, ay1, az0, az1, bx0, bx1, by0, by1, bz0, bz1;
  bounds(a, ax0, ax1, ay0, ay1, az0, az1);
  bounds(b, bx0, bx1, by0, by1, bz0, bz1);
  const double x0 = std::min(ax0, bx0), x1 = std::max(ax1, bx1);
  const double y0 = std::min(ay0, by0), y1 = std::max(ay1, by1);
  const double z0 = std::min(az0, bz0), z1 = std::max(az1, bz1);

  Rng rng(seed);
  std::size_t in_union = 0, in_inter = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double px = rng.uniform(x0, x1);
    const double py = rng.uniform(y0, y1);
    const double pz = rng.uniform(z0, z1);
    const bool ia = a.contains(px, py, pz);
    const bool ib = b.contains(px, py, pz);
    if (ia || ib) ++in_union;
    if (ia && ib) ++in_inter;
  }
  MonteCarloIou result;
  result.union_hits = in_union;
  if (in_union == 0) return result;
  const double p = static_cast<double>(in_inter) / static_cast<double>(in_union);
  result.iou = p;
  result.std_err = std::sqrt(std::max(p * (1.0 - p), 1e-12) / static_cast<double>(in_union));
  return result;
}

}  // namespace pf
