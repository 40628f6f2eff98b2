#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pointfuse/config.hpp"
#include "pointfuse/experiments.hpp"
#include "pointfuse/gradcheck.hpp"
#include "pointfuse/model.hpp"
#include "pointfuse/train.hpp"

using Catch::Approx;
using namespace pf;

namespace {

/// Shrunken network + scenes so the training tests run in seconds.
TwoStreamConfig tiny_net(std::uint64_t seed = 0) {
  TwoStreamConfig cfg;
  cfg.image_h = cfg.image_w = 32;
  cfg.image_channels = {4, 6, 8, 10};
  cfg.fu_proj_channels = 4;
  cfg.point_stage_sizes = {256, 128, 64, 32};
  cfg.point_stage_channels = {8, 12, 16, 24};
  cfg.fp_channels = {24, 16, 12, 12};
  cfg.sa_group_size = 4;
  cfg.pre_nms_top = 64;
  cfg.post_nms_top = 16;
  cfg.refine_point_budget = 16;
  cfg.seed = seed;
  return cfg;
}

ExperimentConfig tiny_experiment(std::uint64_t seed = 0) {
  ExperimentConfig cfg;
  cfg.net = tiny_net(seed);
  cfg.scenes.image_h = cfg.scenes.image_w = 32;
  cfg.scenes.points_per_object = 70;
  cfg.scenes.ground_points = 150;
  cfg.scenes.targets_min = 1;
  cfg.scenes.targets_max = 2;
  cfg.scenes.decoys_min = 0;
  cfg.scenes.decoys_max = 1;
  cfg.scenes.yaw_min = -0.4;
  cfg.scenes.yaw_max = 0.4;
  cfg.seed = seed;
  cfg.train_scenes = 2;
  cfg.eval_scenes = 1;
  return cfg;
}

}  // namespace

TEST_CASE("image stream shapes at 64x64") {
  TwoStreamConfig cfg;  // default channels, 64x64
  TwoStreamModel model(cfg);
  const auto out = model.image_stream_forward(Tensor::zeros({3, 64, 64}));
  CHECK(out.maps[0].shape() == Shape{8, 32, 32});
  CHECK(out.maps[1].shape() == Shape{16, 16, 16});
  CHECK(out.maps[2].shape() == Shape{24, 8, 8});
  CHECK(out.maps[3].shape() == Shape{32, 4, 4});
  CHECK(out.fused_map.shape() == Shape{32, 64, 64});

  // zero image with zero biases gives all-zero features
  for (const auto& m : out.maps)
    for (double v : m.data()) CHECK(v == 0.0);
  for (double v : out.fused_map.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(model.image_stream_forward(Tensor::zeros({3, 32, 32})), ContractError);
}

TEST_CASE("image stream gradient check on a small input") {
  TwoStreamConfig cfg = tiny_net(3);
  cfg.image_h = cfg.image_w = 16;
  cfg.image_channels = {2, 3, 3, 4};
  cfg.fu_proj_channels = 2;
  TwoStreamModel model(cfg);
  Rng img_rng(5);
  auto image = detail::random_tensor({3, 16, 16}, img_rng);
  std::vector<Tensor> params{image};
  for (auto& [name, t] : model.params().items)
    if (name.rfind("image.", 0) == 0) params.push_back(t);
  const auto report = finite_diff_check(
      "image_stream",
      [&]() {
        Rng p(7);
        return detail::probe(model.image_stream_forward(image).fused_map, p);
      },
      params, 1e-5);
  CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("farthest point sampling is canonical and seeded") {
  Rng rng(9);
  std::vector<std::array<double, 3>> pts;
  for (int i = 0; i < 64; ++i)
    pts.push_back({rng.uniform(-5, 5), rng.uniform(-1, 1), rng.uniform(0, 10)});

  const auto picked = farthest_point_indices(pts, 16, 4);
  CHECK(picked.size() == 16);

  // permuting the cloud picks the same point SET
  std::vector<std::size_t> perm(pts.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::vector<std::array<double, 3>> shuffled(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) shuffled[i] = pts[perm[i]];
  const auto picked2 = farthest_point_indices(shuffled, 16, 4);
  for (std::size_t i = 0; i < picked.size(); ++i)
    CHECK(pts[picked[i]] == shuffled[picked2[i]]);

  CHECK_THROWS_AS(farthest_point_indices(pts, 65, 0), ContractError);
}

TEST_CASE("sa_stage degenerate grouping is a per-point MLP") {
  TwoStreamConfig cfg = tiny_net(1);
  TwoStreamModel model(cfg);
  Rng rng(11);
  std::vector<std::array<double, 3>> pts;
  for (int i = 0; i < 8; ++i)
    pts.push_back({rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(0, 4)});
  auto feats = detail::random_tensor({8, 3}, rng);

  const auto& stage = model.sa_stages()[0];
  const auto out = model.sa_stage(pts, feats, 8, 0.0, 4, 2, stage);
  REQUIRE(out.pts.size() == 8);

  // reference: relu(linear([feat, 0])) per selected point
  for (std::size_t i = 0; i < out.pts.size(); ++i) {
    std::size_t src = 0;
    while (pts[src] != out.pts[i]) ++src;
    std::vector<double> in_row(feats.data().begin() + static_cast<std::ptrdiff_t>(src * 3),
                               feats.data().begin() + static_cast<std::ptrdiff_t>(src * 3 + 3));
    in_row.resize(6, 0.0);
    const auto ref = relu(linear(Tensor({1, 6}, in_row), stage.w, stage.b));
    for (std::size_t c = 0; c < ref.numel(); ++c)
      CHECK(out.feats.data()[i * ref.numel() + c] == Approx(ref.data()[c]).margin(1e-12));
  }
}

TEST_CASE("sa_stage treats duplicated points identically") {
  TwoStreamConfig cfg = tiny_net(1);
  TwoStreamModel model(cfg);
  std::vector<std::array<double, 3>> pts{{0, 0, 1}, {1, 0, 2}, {0, 0, 1}, {2, 0, 3}};
  auto feats = Tensor({4, 3}, {1, 2, 3, 4, 5, 6, 1, 2, 3, 7, 8, 9});
  const auto out = model.sa_stage(pts, feats, 4, 0.5, 3, 0, model.sa_stages()[0]);
  // find the two duplicate outputs and compare them
  std::vector<std::size_t> dup_rows;
  for (std::size_t i = 0; i < out.pts.size(); ++i)
    if (out.pts[i] == std::array<double, 3>{0, 0, 1}) dup_rows.push_back(i);
  REQUIRE(dup_rows.size() == 2);
  const std::size_t c = out.feats.dim(1);
  for (std::size_t j = 0; j < c; ++j)
    CHECK(out.feats.data()[dup_rows[0] * c + j] == out.feats.data()[dup_rows[1] * c + j]);
}

TEST_CASE("sa_stage gradient check on a 32-point cloud") {
  TwoStreamConfig cfg = tiny_net(2);
  TwoStreamModel model(cfg);
  Rng rng(13);
  std::vector<std::array<double, 3>> pts;
  for (int i = 0; i < 32; ++i)
    pts.push_back({rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(0, 4)});
  auto feats = detail::random_tensor({32, 3}, rng);
  const auto& stage = model.sa_stages()[0];
  const auto report = finite_diff_check(
      "sa_stage",
      [&]() {
        Rng p(17);
        return detail::probe(model.sa_stage(pts, feats, 16, 0.8, 4, 5, stage).feats, p);
      },
      {feats, stage.w, stage.b}, 1e-5);
  CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("fp_stage interpolation") {
  TwoStreamConfig cfg = tiny_net(1);
  TwoStreamModel model(cfg);
  Rng rng(19);

  // a fine point coincident with a coarse point keeps that coarse feature
  std::vector<std::array<double, 3>> coarse{{0, 0, 0}, {4, 0, 0}, {0, 0, 4}};
  auto cf = detail::random_tensor({3, 5}, rng);
  std::vector<std::array<double, 3>> fine{{0, 0, 0}};
  // identity-ish check through the raw interpolation: weights collapse onto
  // the coincident point, so interpolated == coarse row 0. Verify through a
  // probe model stage whose linear is identity-free: compare against a
  // manual forward of the same stage.
  const auto& fp = model.fp_stages()[0];
  auto skip = Tensor::zeros({1, static_cast<std::size_t>(fp.w.dim(0) - cf.dim(1))});
  const auto out = model.fp_stage(coarse, cf, fine, skip, fp);

  std::vector<double> in_row(cf.data().begin(), cf.data().begin() + 5);
  in_row.resize(fp.w.dim(0), 0.0);
  const auto ref = relu(linear(Tensor({1, fp.w.dim(0)}, in_row), fp.w, fp.b));
  for (std::size_t c = 0; c < ref.numel(); ++c)
    CHECK(out.data()[c] == Approx(ref.data()[c]).margin(1e-6));

  // a single coarse point broadcasts
  std::vector<std::array<double, 3>> one{{1, 1, 1}};
  auto onef = detail::random_tensor({1, 5}, rng);
  std::vector<std::array<double, 3>> many{{0, 0, 0}, {5, 5, 5}, {1, 2, 3}};
  auto skip3 = Tensor::zeros({3, static_cast<std::size_t>(fp.w.dim(0) - 5)});
  const auto bcast = model.fp_stage(one, onef, many, skip3, fp);
  for (std::size_t i = 1; i < 3; ++i)
    for (std::size_t c = 0; c < bcast.dim(1); ++c)
      CHECK(bcast.data()[i * bcast.dim(1) + c] == Approx(bcast.data()[c]).margin(1e-12));
}

TEST_CASE("two_stream_forward shapes, zero-image propagation, fusion off") {
  auto cfg = tiny_experiment(4);
  const auto scenes = make_dataset(cfg, false);
  const auto& scene = scenes[0];

  TwoStreamModel model(cfg.net);
  const auto trace = model.two_stream_forward(scene.points, scene.image, scene.proj);
  CHECK(trace.point_features.dim(0) == cfg.net.point_stage_sizes[0]);
  CHECK(trace.point_features.dim(1) == model.final_channels());
  CHECK(trace.weight_maps.size() == 5);  // four SA sites plus the F_U site

  // zero image: each fused image half is exactly zero
  const auto zero_trace =
      model.two_stream_forward(scene.points, Tensor::zeros({3, 32, 32}), scene.proj);
  const std::size_t cp = model.final_channels() - 4 * cfg.net.fu_proj_channels;
  for (std::size_t i = 0; i < zero_trace.point_features.dim(0); ++i)
    for (std::size_t j = cp; j < model.final_channels(); ++j)
      CHECK(zero_trace.point_features.data()[i * model.final_channels() + j] == 0.0);

  // disabling fusion reduces to a pure point network
  TwoStreamConfig off = cfg.net;
  off.fusion = FusionMode::None;
  TwoStreamModel plain(off);
  const auto plain_trace = plain.two_stream_forward(scene.points, scene.image, scene.proj);
  CHECK(plain_trace.weight_maps.empty());
  CHECK(plain_trace.point_features.dim(1) == off.fp_channels[3]);

  CHECK_THROWS_AS(model.two_stream_forward({{0, 0, 1}}, scene.image, scene.proj), ContractError);
}

TEST_CASE("point stream is permutation equivariant") {
  auto cfg = tiny_experiment(5);
  const auto scene = make_dataset(cfg, false)[0];
  TwoStreamModel model(cfg.net);

  std::vector<std::size_t> perm(scene.points.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(23);
  for (std::size_t i = perm.size(); i > 1; --i)
    std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
  std::vector<std::array<double, 3>> shuffled(scene.points.size());
  for (std::size_t i = 0; i < perm.size(); ++i) shuffled[i] = scene.points[perm[i]];

  const auto a = model.two_stream_forward(scene.points, scene.image, scene.proj);
  const auto b = model.two_stream_forward(shuffled, scene.image, scene.proj);
  const std::size_t c = model.final_channels();
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < c; ++j)
      CHECK(b.point_features.data()[i * c + j] ==
            Approx(a.point_features.data()[perm[i] * c + j]).margin(1e-12));
}

TEST_CASE("head encode/decode closure") {
  auto cfg = tiny_net(6);
  TwoStreamModel model(cfg);

  const Box3D gt(1.2, 0.9, 5.5, 1.1, 1.3, 2.5, 0.4);
  const auto frame = TwoStreamModel::AnchorFrame::at_point({1.0, 1.0, 5.0});
  const auto target = model.encode_box(frame, gt);
  CHECK_FALSE(target.clamped);

  // assemble the regression row the heads would need to emit
  std::vector<double> row(cfg.reg_cols(), 0.0);
  row[target.bin_x] = 10.0;
  row[cfg.center_bin_cols() + target.bin_z] = 10.0;
  row[2 * cfg.center_bin_cols() + target.bin_yaw] = 10.0;
  for (std::size_t i = 0; i < 7; ++i)
    row[2 * cfg.center_bin_cols() + cfg.heading_logit_cols() + i] = target.residuals[i];
  const Box3D decoded = model.decode_box(frame, row.data());
  CHECK(decoded.x == Approx(gt.x).margin(1e-9));
  CHECK(decoded.y == Approx(gt.y).margin(1e-9));
  CHECK(decoded.z == Approx(gt.z).margin(1e-9));
  CHECK(decoded.h == Approx(gt.h).margin(1e-9));
  CHECK(decoded.w == Approx(gt.w).margin(1e-9));
  CHECK(decoded.l == Approx(gt.l).margin(1e-9));
  CHECK(std::abs(wrap_angle(decoded.yaw - gt.yaw)) <= 1e-9);

  // re-encoding the decoded box reproduces identical bins and residuals
  const auto again = model.encode_box(frame, decoded);
  CHECK(again.bin_x == target.bin_x);
  CHECK(again.bin_z == target.bin_z);
  CHECK(again.bin_yaw == target.bin_yaw);
  for (std::size_t i = 0; i < 7; ++i)
    CHECK(again.residuals[i] == Approx(target.residuals[i]).margin(1e-9));

  // rotated frame round-trip (the refinement path)
  const auto box_frame = TwoStreamModel::AnchorFrame::at_box(Box3D(1, 1, 5, 1, 1, 2, 0.8));
  const auto t2 = model.encode_box(box_frame, gt);
  std::vector<double> row2(cfg.reg_cols(), 0.0);
  row2[t2.bin_x] = 10.0;
  row2[cfg.center_bin_cols() + t2.bin_z] = 10.0;
  row2[2 * cfg.center_bin_cols() + t2.bin_yaw] = 10.0;
  for (std::size_t i = 0; i < 7; ++i)
    row2[2 * cfg.center_bin_cols() + cfg.heading_logit_cols() + i] = t2.residuals[i];
  const Box3D dec2 = model.decode_box(box_frame, row2.data());
  CHECK(dec2.x == Approx(gt.x).margin(1e-9));
  CHECK(dec2.z == Approx(gt.z).margin(1e-9));
  CHECK(std::abs(wrap_angle(dec2.yaw - gt.yaw)) <= 1e-9);

  // the all-zero row decodes to the mean-size box at the bin-0 centers
  std::vector<double> zero_row(cfg.reg_cols(), 0.0);
  const Box3D dflt = model.decode_box(frame, zero_row.data());
  CHECK(dflt.h == Approx(cfg.mean_size.h));
  CHECK(dflt.w == Approx(cfg.mean_size.w));
  CHECK(dflt.l == Approx(cfg.mean_size.l));
  CHECK(dflt.x == Approx(frame.x + bin_decode(0, 0.0, cfg.center_bins)));
}

TEST_CASE("rpn heads emit probabilities strictly inside (0,1)") {
  auto cfg = tiny_experiment(7);
  const auto scene = make_dataset(cfg, false)[0];
  TwoStreamModel model(cfg.net);
  const auto trace = model.two_stream_forward(scene.points, scene.image, scene.proj);
  const auto heads = model.rpn_heads(trace.point_features);
  for (double p : heads.fg_prob.data()) {
    CHECK(p > 0.0);
    CHECK(p < 1.0);
  }
  CHECK(heads.reg.dim(1) == cfg.net.reg_cols());
}

TEST_CASE("generate_proposals ordering and caps") {
  auto cfg = tiny_experiment(8);
  const auto scene = make_dataset(cfg, false)[0];
  TwoStreamModel model(cfg.net);
  const auto trace = model.two_stream_forward(scene.points, scene.image, scene.proj);
  const auto heads = model.rpn_heads(trace.point_features);
  const auto proposals = model.generate_proposals(trace, heads);
  CHECK(proposals.size() <= cfg.net.post_nms_top);
  for (std::size_t i = 1; i < proposals.size(); ++i)
    CHECK(proposals[i - 1].confidence >= proposals[i].confidence);

  // identical duplicate proposals collapse: coincident points decode to the
  // same box, and the proposal NMS keeps one of each such cluster
  for (std::size_t i = 0; i < proposals.size(); ++i)
    for (std::size_t j = i + 1; j < proposals.size(); ++j)
      CHECK(iou_bev(proposals[i].box, proposals[j].box) <= cfg.net.proposal_nms_iou);
}

TEST_CASE("refine handles empty boxes through the zero-descriptor path") {
  auto cfg = tiny_experiment(9);
  const auto scene = make_dataset(cfg, false)[0];
  TwoStreamModel model(cfg.net);
  const auto trace = model.two_stream_forward(scene.points, scene.image, scene.proj);

  // a proposal far away from every point pools nothing
  std::vector<TwoStreamModel::Proposal> proposals{
      {Box3D(30, 0.5, 30, 1, 1, 1, 0), 0.9, 0}};
  const auto refined = model.refine(proposals, trace, 3);
  REQUIRE(refined.confidence.dim(0) == 1);
  CHECK(refined.pooled_points[0].empty());
  CHECK(refined.confidence.data()[0] > 0.0);
  CHECK(refined.confidence.data()[0] < 1.0);
  for (double v : refined.reg.data()) CHECK(std::isfinite(v));
}

TEST_CASE("train_step decreases the loss in all three modes") {
  for (LossMode mode : {LossMode::CE, LossMode::IouOnly, LossMode::None}) {
    auto cfg = tiny_experiment(10);
    const auto scenes = make_dataset(cfg, false);
    TrainState state(cfg.net);
    double first = 0.0, last = 0.0;
    for (int s = 0; s < 50; ++s) {
      const auto loss = train_step(state, {scenes[0]}, mode);
      if (s == 0) first = loss.total;
      last = loss.total;
    }
    INFO(to_string(mode));
    CHECK(last < first);
  }
}

TEST_CASE("training is deterministic and lambda=0 collapses CE onto NONE") {
  auto cfg = tiny_experiment(11);
  const auto scenes = make_dataset(cfg, false);

  auto run = [&](LossMode mode, double lambda) {
    TwoStreamConfig net = cfg.net;
    net.weights.lambda = lambda;
    TrainState state(net);
    std::vector<double> trace;
    for (int s = 0; s < 8; ++s) trace.push_back(train_step(state, {scenes[0]}, mode).total);
    return trace;
  };

  CHECK(run(LossMode::CE, 5.0) == run(LossMode::CE, 5.0));  // bitwise determinism
  CHECK(run(LossMode::CE, 0.0) == run(LossMode::None, 0.0));
}

TEST_CASE("every parameter group receives gradient") {
  auto cfg = tiny_experiment(12);
  const auto scenes = make_dataset(cfg, false);
  TrainState state(cfg.net);

  // warm up until the refinement stage sees positive proposals; the reg
  // head only carries gradient once a proposal clears the IoU threshold
  std::size_t rcnn_positives = 0;
  for (int s = 0; s < 150 && rcnn_positives == 0; ++s) {
    train_step(state, {scenes[0]}, LossMode::CE);
    state.model.params().zero_grads();
    rcnn_positives = scene_loss(state.model, scenes[0], LossMode::CE, 1).rcnn_positives;
  }
  REQUIRE(rcnn_positives > 0);

  state.model.params().zero_grads();
  const auto out = scene_loss(state.model, scenes[0], LossMode::CE, 1);
  backward(out.total);
  for (auto& [name, tensor] : state.model.params().items) {
    double norm = 0.0;
    for (double g : tensor.grad()) norm += g * g;
    INFO(name);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("checkpoint round-trip resumes bitwise") {
  auto cfg = tiny_experiment(13);
  const auto scenes = make_dataset(cfg, false);

  TrainState state(cfg.net);
  for (int s = 0; s < 5; ++s) train_step(state, {scenes[0]}, LossMode::CE);
  const auto bytes = serialize_checkpoint(state);

  // uninterrupted continuation
  const auto direct = train_step(state, {scenes[1]}, LossMode::CE);

  // resumed continuation
  TrainState resumed(cfg.net);
  load_checkpoint(resumed, bytes);
  CHECK(resumed.step == 5);
  const auto after = train_step(resumed, {scenes[1]}, LossMode::CE);

  CHECK(after.total == direct.total);  // bitwise-equal loss
  for (std::size_t i = 0; i < state.model.params().items.size(); ++i)
    CHECK(resumed.model.params().items[i].second.data() ==
          state.model.params().items[i].second.data());

  // corrupted magic is rejected
  auto bad = bytes;
  bad[0] = 'X';
  TrainState fresh(cfg.net);
  CHECK_THROWS_AS(load_checkpoint(fresh, bad), ParseError);
}

TEST_CASE("config file application") {
  ExperimentConfig cfg;
  const auto file = ConfigFile::parse(
      "# comment\n"
      "seed = 9\n"
      "steps=25\n"
      "fusion = ungated\n"
      "lambda = 2.5\n"
      "image_size = 32\n");
  apply_config(file, cfg);
  CHECK(cfg.seed == 9);
  CHECK(cfg.steps == 25);
  CHECK(cfg.net.fusion == FusionMode::Ungated);
  CHECK(cfg.net.weights.lambda == 2.5);
  CHECK(cfg.net.image_h == 32);

  CHECK_THROWS_WITH(apply_config(ConfigFile::parse("not_a_key = 1\n"), cfg),
                    Catch::Matchers::ContainsSubstring("not_a_key"));
  CHECK_THROWS_AS(ConfigFile::parse("key_without_value\n"), ParseError);
  CHECK_THROWS_AS(apply_config(ConfigFile::parse("steps = abc\n"), cfg), ParseError);
}
