#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pointfuse/fusion.hpp"
#include "pointfuse/synth.hpp"

using Catch::Approx;
using namespace pf;

TEST_CASE("generate_synthetic_scene basics") {
  SyntheticSceneConfig cfg;
  cfg.seed = 3;
  const auto s = generate_synthetic_scene(cfg);
  CHECK(!s.scene.points.empty());
  CHECK(s.scene.image.shape() == Shape{3, 64, 64});
  CHECK(static_cast<int>(s.scene.gt_boxes.size()) >= cfg.targets_min);
  CHECK(static_cast<int>(s.scene.gt_boxes.size()) <= cfg.targets_max);

  // determinism for a fixed seed
  const auto again = generate_synthetic_scene(cfg);
  CHECK(again.scene.points == s.scene.points);
  CHECK(again.scene.image.data() == s.scene.image.data());

  // placement constraint: no heavy BEV overlap between any pair
  for (std::size_t i = 0; i < s.objects.size(); ++i)
    for (std::size_t j = i + 1; j < s.objects.size(); ++j)
      CHECK(iou_bev(s.objects[i].box, s.objects[j].box) < cfg.max_pair_iou);
}

TEST_CASE("zero-object scene is pure background") {
  SyntheticSceneConfig cfg;
  cfg.targets_min = cfg.targets_max = 0;
  cfg.decoys_min = cfg.decoys_max = 0;
  cfg.seed = 5;
  const auto s = generate_synthetic_scene(cfg);
  CHECK(s.scene.gt_boxes.empty());
  const double bg = static_cast<double>(detail::quantize255(cfg.background.r)) / 255.0;
  for (std::size_t i = 0; i < s.scene.image.dim(1) * s.scene.image.dim(2); ++i)
    CHECK(s.scene.image.data()[i] == bg);
}

TEST_CASE("object points project inside their image silhouette") {
  SyntheticSceneConfig cfg;
  cfg.targets_min = cfg.targets_max = 1;
  cfg.decoys_min = cfg.decoys_max = 0;
  cfg.ground_points = 0;
  cfg.seed = 11;
  const auto s = generate_synthetic_scene(cfg);
  REQUIRE(s.objects.size() == 1);
  const auto& box = s.objects[0].box;

  // the silhouette check reads the bilinear neighborhood, i.e. exactly the
  // pixels the image sampler would blend for that point; points on a side
  // face sit on the silhouette edge, so a single rounded pixel would flap
  const auto projected = project_points(s.scene.points, s.scene.proj);
  const double target =
      static_cast<double>(detail::quantize255(cfg.target_color.r)) / 255.0;
  std::size_t inside = 0;
  const auto& img = s.scene.image;
  for (const auto& p : projected) {
    REQUIRE(p.valid);
    bool on_object = false;
    for (int du = 0; du <= 1; ++du)
      for (int dv = 0; dv <= 1; ++dv) {
        const auto col = static_cast<std::ptrdiff_t>(std::floor(p.u)) + du;
        const auto row = static_cast<std::ptrdiff_t>(std::floor(p.v)) + dv;
        if (col < 0 || col >= static_cast<std::ptrdiff_t>(img.dim(2)) || row < 0 ||
            row >= static_cast<std::ptrdiff_t>(img.dim(1)))
          continue;
        on_object = on_object || img.data()[static_cast<std::size_t>(row) * img.dim(2) +
                                            static_cast<std::size_t>(col)] == target;
      }
    if (on_object) ++inside;
  }
  CHECK(static_cast<double>(inside) / static_cast<double>(projected.size()) >= 0.95);
  (void)box;
}

TEST_CASE("ground-truth boxes keep enough generated points") {
  SyntheticSceneConfig cfg;
  cfg.seed = 13;
  const auto s = generate_synthetic_scene(cfg);
  for (const auto& gt : s.scene.gt_boxes) {
    int count = 0;
    for (const auto& p : s.scene.points)
      if (gt.box.contains(p[0], p[1], p[2], 3.0 * cfg.point_jitter)) ++count;
    CHECK(count >= cfg.min_points_per_box);
  }
}

TEST_CASE("targets and decoys share geometry and differ only by hue") {
  SyntheticSceneConfig cfg;
  cfg.seed = 17;
  cfg.decoys_min = cfg.decoys_max = 2;
  const auto s = generate_synthetic_scene(cfg);
  bool saw_decoy = false;
  for (const auto& obj : s.objects) {
    if (obj.is_target) continue;
    saw_decoy = true;
    // decoys also sit on the ground with sizes from the same ranges
    CHECK(obj.box.y == cfg.y_ground);
    CHECK(obj.box.h >= cfg.h_min);
    CHECK(obj.box.h <= cfg.h_max);
  }
  CHECK(saw_decoy);
}

TEST_CASE("augment_rotate consistency") {
  SyntheticSceneConfig cfg;
  cfg.seed = 19;
  auto s = generate_synthetic_scene(cfg).scene;

  // identity at phi = 0
  const auto same = augment_rotate(s, 0.0);
  CHECK(same.points == s.points);

  const double phi = kPi / 18.0;
  const auto rotated = augment_rotate(s, phi);
  CHECK(rotated.points.size() == s.points.size());
  CHECK(rotated.gt_boxes.size() == s.gt_boxes.size());

  // pairwise gt IoUs are invariant under a shared rotation
  for (std::size_t i = 0; i < s.gt_boxes.size(); ++i)
    for (std::size_t j = i + 1; j < s.gt_boxes.size(); ++j)
      CHECK(std::abs(iou_3d(rotated.gt_boxes[i].box, rotated.gt_boxes[j].box) -
                     iou_3d(s.gt_boxes[i].box, s.gt_boxes[j].box)) <= 1e-9);

  // points stay inside their boxes after the shared transform
  for (const auto& gt : s.gt_boxes) {
    for (std::size_t pi = 0; pi < s.points.size(); ++pi) {
      const bool before = gt.box.contains(s.points[pi][0], s.points[pi][1], s.points[pi][2]);
      bool after = false;
      for (const auto& rgt : rotated.gt_boxes)
        after = after ||
                rgt.box.contains(rotated.points[pi][0], rotated.points[pi][1], rotated.points[pi][2]);
      if (before) CHECK(after);
    }
  }
}

TEST_CASE("augment_flip is an involution") {
  SyntheticSceneConfig cfg;
  cfg.seed = 23;
  const auto s = generate_synthetic_scene(cfg).scene;
  const auto twice = augment_flip(augment_flip(s));
  CHECK(twice.points == s.points);  // negation is bitwise-exact
  for (std::size_t i = 0; i < s.gt_boxes.size(); ++i) {
    CHECK(twice.gt_boxes[i].box.x == s.gt_boxes[i].box.x);
    const double dyaw = wrap_angle(twice.gt_boxes[i].box.yaw - s.gt_boxes[i].box.yaw);
    CHECK(std::abs(dyaw) <= 1e-12);
  }

  // a flipped box still contains its flipped points
  const auto flipped = augment_flip(s);
  for (const auto& gt : s.gt_boxes)
    for (std::size_t pi = 0; pi < s.points.size(); ++pi)
      if (gt.box.contains(s.points[pi][0], s.points[pi][1], s.points[pi][2])) {
        bool in_any = false;
        for (const auto& fgt : flipped.gt_boxes)
          in_any = in_any || fgt.box.contains(flipped.points[pi][0], flipped.points[pi][1],
                                              flipped.points[pi][2]);
        CHECK(in_any);
      }
}

TEST_CASE("augment_scale") {
  SyntheticSceneConfig cfg;
  cfg.seed = 29;
  const auto s = generate_synthetic_scene(cfg).scene;
  const auto same = augment_scale(s, 1.0);
  CHECK(same.points == s.points);

  const auto scaled = augment_scale(s, 1.05);
  CHECK(scaled.gt_boxes[0].box.h == Approx(1.05 * s.gt_boxes[0].box.h));
  CHECK(scaled.points[0][0] == Approx(1.05 * s.points[0][0]));
  CHECK_THROWS_AS(augment_scale(s, 0.0), InputError);
}

TEST_CASE("synthetic rotate re-renders a geometry-consistent image") {
  SyntheticSceneConfig cfg;
  cfg.seed = 31;
  const auto s = generate_synthetic_scene(cfg);
  const auto rotated = augment_synthetic_rotate(s, cfg, kPi / 18.0);

  // >= 95% of each object's points still reach a non-background pixel
  // through their bilinear neighborhood after the re-render
  const auto projected = project_points(rotated.scene.points, rotated.scene.proj);
  const double bg = static_cast<double>(detail::quantize255(cfg.background.r)) / 255.0;
  std::size_t object_points = 0, on_object_pixels = 0;
  const auto& img = rotated.scene.image;
  for (std::size_t i = 0; i < rotated.scene.points.size(); ++i) {
    bool inside_obj = false;
    for (const auto& obj : rotated.objects)
      inside_obj = inside_obj || obj.box.contains(rotated.scene.points[i][0],
                                                  rotated.scene.points[i][1],
                                                  rotated.scene.points[i][2], 0.05);
    if (!inside_obj || !projected[i].valid) continue;
    ++object_points;
    bool on_object = false;
    for (int du = 0; du <= 1; ++du)
      for (int dv = 0; dv <= 1; ++dv) {
        const auto col = static_cast<std::ptrdiff_t>(std::floor(projected[i].u)) + du;
        const auto row = static_cast<std::ptrdiff_t>(std::floor(projected[i].v)) + dv;
        if (col < 0 || col >= static_cast<std::ptrdiff_t>(img.dim(2)) || row < 0 ||
            row >= static_cast<std::ptrdiff_t>(img.dim(1)))
          continue;
        on_object = on_object || img.data()[static_cast<std::size_t>(row) * img.dim(2) +
                                            static_cast<std::size_t>(col)] != bg;
      }
    if (on_object) ++on_object_pixels;
  }
  CHECK(static_cast<double>(on_object_pixels) >= 0.95 * static_cast<double>(object_points));
}

TEST_CASE("perturb_illumination fixtures") {
  // identity on the 8-bit grid
  Tensor img({3, 1, 1}, {100.0 / 255.0, 0.0, 1.0});
  const auto same = perturb_illumination(img, 1.0, 0.0);
  CHECK(same.data() == img.data());

  // lighten: 3*100 + 5 clamps to 255
  const auto bright = perturb_illumination(img, 3.0, 5.0);
  CHECK(bright.data()[0] == Approx(1.0));

  // darken: 0.3*100 + 5 = 35
  const auto dark = perturb_illumination(img, 0.3, 5.0);
  CHECK(dark.data()[0] == Approx(35.0 / 255.0));
}
