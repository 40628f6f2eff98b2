#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pointfuse/geometry.hpp"
#include "pointfuse/losses.hpp"
#include "pointfuse/rng.hpp"

using Catch::Approx;
using namespace pf;

TEST_CASE("ce_loss fixtures") {
  CHECK(ce_loss(Tensor::scalar(1.0), Tensor::scalar(1.0)).value() == Approx(0.0).margin(1e-12));
  CHECK(ce_loss(Tensor::scalar(0.5), Tensor::scalar(0.5)).value() ==
        Approx(1.386294).margin(1e-6));
  CHECK_THROWS_AS(ce_loss(Tensor::scalar(0.0), Tensor::scalar(0.5)), DomainError);
  CHECK_THROWS_AS(ce_loss(Tensor::scalar(-0.1), Tensor::scalar(0.5)), DomainError);

  // dL/dc at (0.5, 0.5) is -1/c = -2
  auto c = Tensor::scalar(0.5);
  c.set_requires_grad(true);
  auto iou = Tensor::scalar(0.5);
  backward(ce_loss(c, iou));
  CHECK(c.grad()[0] == Approx(-2.0).margin(1e-9));

  // zero overlap clamps instead of emitting infinity
  CHECK(std::isfinite(ce_loss(Tensor::scalar(0.5), Tensor::scalar(0.0)).value()));
}

TEST_CASE("ce_loss is strictly decreasing in both arguments") {
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    auto c = Tensor::scalar(rng.uniform(0.05, 0.95));
    auto iou = Tensor::scalar(rng.uniform(0.05, 0.95));
    c.set_requires_grad(true);
    iou.set_requires_grad(true);
    backward(ce_loss(c, iou));
    CHECK(c.grad()[0] < 0.0);
    CHECK(iou.grad()[0] < 0.0);
  }
}

TEST_CASE("gradient descent on ce_loss raises confidence and overlap jointly") {
  // a toy box with trainable x-offset and a confidence logit: descending the
  // CE loss alone must push both the IoU and the confidence upward
  auto logit = Tensor::scalar(-0.5);
  logit.set_requires_grad(true);
  std::vector<Box3D> gt{Box3D(0, 0.5, 0, 1, 1, 1, 0)};
  auto offset = Tensor::scalar(0.45);
  offset.set_requires_grad(true);

  const double iou0 = [&] {
    BoxColumns a = box_columns_from(gt);
    a.x = reshape(offset, {1, 1});
    return iou_3d_axis_aligned_diff(a, box_columns_from(gt)).value();
  }();
  const double c0 = 1.0 / (1.0 + std::exp(0.5));

  const double rate = 0.1;
  for (int it = 0; it < 50; ++it) {
    logit.zero_grad();
    offset.zero_grad();
    BoxColumns a = box_columns_from(gt);
    a.x = reshape(offset, {1, 1});
    auto iou = iou_3d_axis_aligned_diff(a, box_columns_from(gt));
    auto loss = ce_loss(reshape(sigmoid(logit), {1, 1}), iou);
    backward(loss);
    logit.data()[0] -= rate * logit.grad()[0];
    offset.data()[0] -= rate * offset.grad()[0];
  }
  const double c1 = 1.0 / (1.0 + std::exp(-logit.data()[0]));
  const double iou1 = [&] {
    BoxColumns a = box_columns_from(gt);
    a.x = reshape(offset, {1, 1});
    return iou_3d_axis_aligned_diff(a, box_columns_from(gt)).value();
  }();
  CHECK(c1 > c0);
  CHECK(iou1 > iou0);
}

TEST_CASE("focal_loss fixtures") {
  // positive at p = 0.5 with alpha 0.25, gamma 2
  auto p = Tensor({1, 1}, {0.5});
  CHECK(focal_loss(p, {1}, 0.25, 2.0).value() == Approx(0.0433217).margin(1e-6));

  // gamma 0, alpha 0.5 is half the plain cross entropy
  Rng rng(11);
  std::vector<double> probs;
  std::vector<int> targets;
  for (int i = 0; i < 20; ++i) {
    probs.push_back(rng.uniform(0.05, 0.95));
    targets.push_back(rng.uniform_index(2) ? 1 : 0);
  }
  auto pt = Tensor({20, 1}, probs);
  double bce = 0.0;
  for (int i = 0; i < 20; ++i)
    bce += targets[i] ? -std::log(probs[static_cast<std::size_t>(i)])
                      : -std::log(1.0 - probs[static_cast<std::size_t>(i)]);
  bce /= 20.0;
  CHECK(focal_loss(pt, targets, 0.5, 0.0).value() == Approx(0.5 * bce).margin(1e-12));

  // well-classified positives vanish
  auto sure = Tensor({1, 1}, {0.999999});
  CHECK(focal_loss(sure, {1}, 0.25, 2.0).value() < 1e-9);

  CHECK_THROWS_AS(focal_loss(Tensor({1, 1}, {1.0}), {1}, 0.25, 2.0), DomainError);
  CHECK_THROWS_AS(focal_loss(Tensor({1, 1}, {0.0}), {0}, 0.25, 2.0), DomainError);
}

TEST_CASE("smooth_l1 fixtures") {
  auto d = Tensor({1, 3}, {0.0, 0.5, 2.0});
  auto y = smooth_l1(d, 1.0);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == Approx(0.125));
  CHECK(y.data()[2] == Approx(1.5));
  CHECK_THROWS_AS(smooth_l1(d, 0.0), ContractError);
}

TEST_CASE("bin encode and decode") {
  BinConfig cfg{3.0, 0.5};
  CHECK(cfg.num_bins() == 12);

  // offset 0 sits exactly on the shared edge of bins 5|6; edges belong to
  // the higher bin
  auto enc = bin_encode(0.0, cfg);
  CHECK(enc.bin == 6);
  CHECK(enc.residual == Approx(-0.5));
  CHECK_FALSE(enc.clamped);

  auto enc2 = bin_encode(-2.8, cfg);
  CHECK(enc2.bin == 0);
  CHECK(enc2.residual == Approx(-0.1));

  // top edge clamps down
  auto top = bin_encode(3.0, cfg);
  CHECK(top.bin == 11);
  CHECK_FALSE(top.clamped);
  CHECK(bin_encode(3.5, cfg).clamped);

  // roundtrip over random in-range offsets
  Rng rng(13);
  for (int i = 0; i < 1000; ++i) {
    const double offset = rng.uniform(-3.0, 3.0);
    const auto e = bin_encode(offset, cfg);
    CHECK(std::abs(bin_decode(e.bin, e.residual, cfg) - offset) <= 1e-12);
  }

  CHECK_THROWS_AS(bin_decode(12, 0.0, cfg), InputError);

  // heading layout covers [-pi, pi] with the requested bin count
  const auto heading = BinConfig::heading(12);
  CHECK(heading.num_bins() == 12);
  const auto eh = bin_encode(0.1, heading);
  CHECK(std::abs(bin_decode(eh.bin, eh.residual, heading) - 0.1) <= 1e-12);
}

TEST_CASE("reg_loss optimum and monotonicity") {
  BinConfig cfg{3.0, 0.5};
  const std::size_t nb = cfg.num_bins();
  RegTarget t;
  t.bin_x = 4;
  t.bin_z = 7;
  t.bin_yaw = 2;
  t.residuals = {0.1, -0.2, 0.3, 0.05, -0.05, 0.1, 0.0};

  auto one_hot = [&](std::size_t bin, std::size_t n, double margin) {
    std::vector<double> row(n, 0.0);
    row[bin] = margin;
    return Tensor({1, n}, row);
  };
  std::vector<double> res(t.residuals.begin(), t.residuals.end());
  auto exact = reg_loss(one_hot(t.bin_x, nb, 30.0), one_hot(t.bin_z, nb, 30.0),
                        one_hot(t.bin_yaw, 12, 30.0), Tensor({1, 7}, res), {t}, 1.0);
  CHECK_FALSE(exact.empty_mask);
  CHECK(exact.bin_term.value() + exact.res_term.value() <= 1e-3);

  // empty positives return flagged zeros
  auto empty = reg_loss(Tensor::zeros({0, nb}), Tensor::zeros({0, nb}), Tensor::zeros({0, 12}),
                        Tensor::zeros({0, 7}), {}, 1.0);
  CHECK(empty.empty_mask);
  CHECK(empty.bin_term.value() == 0.0);

  // loss grows monotonically as one residual moves away inside the bin
  double prev = -1.0;
  for (double delta : {0.0, 0.1, 0.2, 0.3, 0.4}) {
    std::vector<double> perturbed = res;
    perturbed[3] += delta;
    auto r = reg_loss(one_hot(t.bin_x, nb, 30.0), one_hot(t.bin_z, nb, 30.0),
                      one_hot(t.bin_yaw, 12, 30.0), Tensor({1, 7}, perturbed), {t}, 1.0);
    const double v = r.res_term.value();
    CHECK(v >= prev);
    prev = v;
  }
}

TEST_CASE("stage_loss composition") {
  auto cls = Tensor::scalar(0.4);
  auto bin = Tensor::scalar(0.3);
  auto res = Tensor::scalar(0.2);
  auto ce = Tensor::scalar(0.1);

  StageLoss breakdown;
  auto with_lambda = stage_loss(cls, bin, res, ce, 5.0, &breakdown);
  CHECK(with_lambda.value() == Approx(0.4 + 0.3 + 0.2 + 5.0 * 0.1).margin(1e-12));
  CHECK(breakdown.total ==
        Approx(breakdown.cls + breakdown.reg_bin + breakdown.reg_res + 5.0 * breakdown.ce)
            .margin(1e-9));

  auto no_ce = stage_loss(cls, bin, res, ce, 0.0);
  CHECK(no_ce.value() == Approx(0.9).margin(1e-12));
}

TEST_CASE("losses are non-negative and ce_loss vanishes only at the optimum") {
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    const double c = rng.uniform(0.05, 1.0);
    const double iou = rng.uniform(0.05, 1.0);
    const double v = ce_loss(Tensor::scalar(c), Tensor::scalar(iou)).value();
    CHECK(v >= -1e-12);
    if (v < 1e-12) {
      CHECK(c == Approx(1.0));
      CHECK(iou == Approx(1.0));
    }
  }
}
