#pragma once

// The operator verification suite: every autodiff operator plus the
// composed fusion layer, each checked against central finite differences
// on random fixtures over many seeds. Also the deliberately-broken
// negative control that a healthy harness must flag.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pointfuse/autodiff.hpp"
#include "pointfuse/fusion.hpp"
#include "pointfuse/losses.hpp"
#include "pointfuse/rng.hpp"

namespace pf {

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(lo, hi);
  Tensor t(std::move(shape), std::move(data));
  t.set_requires_grad(true);
  return t;
}

/// Scalar probe of a tensor-valued op: weighted sum with fixed random
/// weights, so every output element contributes to the checked scalar.
inline Tensor probe(const Tensor& y, Rng& rng) {
  std::vector<double> w(y.numel());
  for (double& v : w) v = rng.uniform(0.5, 1.5);
  return sum(mul(y, Tensor(y.shape(), std::move(w))));
}

}  // namespace detail

/// One fixture: name plus a builder that assembles (loss closure, params).
struct GradCheckCase {
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed, double step)> run;
};

inline std::vector<GradCheckCase> gradcheck_cases() {
  using detail::probe;
  using detail::random_tensor;
  std::vector<GradCheckCase> cases;
  auto register_case = [&](const std::string& name, auto builder) {
    cases.push_back({name, [name, builder](std::uint64_t seed, double step) {
                       Rng rng(seed);
                       auto [f, params] = builder(rng);
                       return finite_diff_check(name, f, params, step, seed);
                     }});
  };

  using CheckFn = std::function<Tensor()>;
  using Built = std::pair<CheckFn, std::vector<Tensor>>;

  register_case("linear", [](Rng& rng) -> Built {
    auto x = random_tensor({3, 4}, rng);
    auto w = random_tensor({4, 2}, rng);
    auto b = random_tensor({2}, rng);
    return {[=]() { Rng p(7); return probe(linear(x, w, b), p); }, {x, w, b}};
  });
  register_case("conv2d_s1", [](Rng& rng) -> Built {
    auto x = random_tensor({2, 6, 6}, rng);
    auto k = random_tensor({3, 2, 3, 3}, rng);
    return {[=]() { Rng p(7); return detail::probe(conv2d(x, k, 1, 1), p); }, {x, k}};
  });
  register_case("conv2d_s2", [](Rng& rng) -> Built {
    auto x = random_tensor({2, 8, 8}, rng);
    auto k = random_tensor({4, 2, 3, 3}, rng);
    return {[=]() { Rng p(7); return detail::probe(conv2d(x, k, 2, 1), p); }, {x, k}};
  });
  register_case("conv1x1", [](Rng& rng) -> Built {
    auto x = random_tensor({3, 4, 4}, rng);
    auto w = random_tensor({2, 3}, rng);
    return {[=]() { Rng p(7); return detail::probe(conv1x1(x, w), p); }, {x, w}};
  });
  register_case("add_channel_bias", [](Rng& rng) -> Built {
    auto x = random_tensor({3, 4, 4}, rng);
    auto b = random_tensor({3}, rng);
    return {[=]() { Rng p(7); return detail::probe(add_channel_bias(x, b), p); }, {x, b}};
  });
  register_case("bilinear_sample", [](Rng& rng) -> Built {
    auto f = random_tensor({2, 5, 5}, rng);
    std::vector<std::pair<double, double>> coords;
    std::vector<bool> valid;
    for (int i = 0; i < 6; ++i) {
      coords.emplace_back(rng.uniform(-1.0, 5.0), rng.uniform(-1.0, 5.0));
      valid.push_back(i != 5);
    }
    return {[=]() { Rng p(7); return detail::probe(bilinear_sample(f, coords, valid), p); }, {f}};
  });
  register_case("relu", [](Rng& rng) -> Built {
    // keep samples away from the kink
    auto x = random_tensor({3, 5}, rng);
    for (double& v : x.data())
      if (std::abs(v) < 0.05) v = v < 0 ? v - 0.1 : v + 0.1;
    return {[=]() { Rng p(7); return detail::probe(relu(x), p); }, {x}};
  });
  register_case("tanh_act", [](Rng& rng) -> Built {
    auto x = random_tensor({3, 5}, rng);
    return {[=]() { Rng p(7); return detail::probe(tanh_act(x), p); }, {x}};
  });
  register_case("sigmoid", [](Rng& rng) -> Built {
    auto x = random_tensor({3, 5}, rng);
    return {[=]() { Rng p(7); return detail::probe(sigmoid(x), p); }, {x}};
  });
  register_case("add_sub_mul_div", [](Rng& rng) -> Built {
    auto a = random_tensor({4, 3}, rng);
    auto b = random_tensor({4, 3}, rng, 0.5, 1.5);
    return {[=]() {
              Rng p(7);
              return detail::probe(div(mul(add(a, b), sub(a, b)), b), p);
            },
            {a, b}};
  });
  register_case("minimum_maximum", [](Rng& rng) -> Built {
    auto a = random_tensor({4, 3}, rng);
    auto b = random_tensor({4, 3}, rng);
    // separate the operands so no tie sits near the probe
    for (std::size_t i = 0; i < a.numel(); ++i)
      if (std::abs(a.data()[i] - b.data()[i]) < 0.05) a.data()[i] += 0.2;
    return {[=]() {
              Rng p(7);
              return detail::probe(add(minimum(a, b), maximum(a, b)), p);
            },
            {a, b}};
  });
  register_case("log_pow", [](Rng& rng) -> Built {
    auto x = random_tensor({3, 3}, rng, 0.2, 2.0);
    return {[=]() { Rng p(7); return detail::probe(add(log(x), pow_scalar(x, 1.7)), p); }, {x}};
  });
  register_case("concat", [](Rng& rng) -> Built {
    auto a = random_tensor({3, 2}, rng);
    auto b = random_tensor({3, 4}, rng);
    return {[=]() { Rng p(7); return detail::probe(concat(a, b), p); }, {a, b}};
  });
  register_case("concat_maps", [](Rng& rng) -> Built {
    auto a = random_tensor({2, 3, 3}, rng);
    auto b = random_tensor({1, 3, 3}, rng);
    return {[=]() { Rng p(7); return detail::probe(concat_maps(a, b), p); }, {a, b}};
  });
  register_case("grouped_max", [](Rng& rng) -> Built {
    auto x = random_tensor({4, 8, 6}, rng);
    // push elements apart so argmax is stable under the probe step
    for (double& v : x.data()) v *= 3.0;
    return {[=]() { Rng p(7); return detail::probe(grouped_max(x), p); }, {x}};
  });
  register_case("upsample_nearest", [](Rng& rng) -> Built {
    auto x = random_tensor({2, 3, 3}, rng);
    return {[=]() { Rng p(7); return detail::probe(upsample_nearest(x, 2), p); }, {x}};
  });
  register_case("reshape_slice_gather", [](Rng& rng) -> Built {
    auto x = random_tensor({4, 6}, rng);
    return {[=]() {
              Rng p(7);
              auto r = reshape(x, {2, 2, 6});
              auto g = gather_rows(x, {0, 2, 2, 3});
              return add(detail::probe(grouped_max(r), p),
                         detail::probe(slice_cols(g, 1, 4), p));
            },
            {x}};
  });
  register_case("weighted_gather_rows", [](Rng& rng) -> Built {
    auto x = random_tensor({5, 3}, rng);
    std::vector<std::array<std::size_t, 3>> idx{{0, 1, 2}, {2, 3, 4}, {4, 0, 1}};
    std::vector<std::array<double, 3>> wgt{{0.2, 0.3, 0.5}, {0.6, 0.4, 0.0}, {1.0, 0.0, 0.0}};
    return {[=]() { Rng p(7); return detail::probe(weighted_gather_rows(x, idx, wgt), p); }, {x}};
  });
  register_case("row_scale", [](Rng& rng) -> Built {
    auto s = random_tensor({4, 1}, rng, 0.1, 1.0);
    auto x = random_tensor({4, 3}, rng);
    return {[=]() { Rng p(7); return detail::probe(row_scale(s, x), p); }, {s, x}};
  });
  register_case("softmax_cross_entropy", [](Rng& rng) -> Built {
    auto logits = random_tensor({5, 4}, rng);
    std::vector<std::size_t> labels;
    for (int i = 0; i < 5; ++i) labels.push_back(rng.uniform_index(4));
    return {[=]() { Rng p(7); return detail::probe(softmax_cross_entropy(logits, labels), p); },
            {logits}};
  });
  register_case("sum_mean", [](Rng& rng) -> Built {
    auto x = random_tensor({3, 4}, rng);
    return {[=]() { return add(sum(x), mean(x)); }, {x}};
  });
  register_case("broadcast_standardize", [](Rng& rng) -> Built {
    auto x = random_tensor({2, 3, 3}, rng);
    return {[=]() {
              Rng p(7);
              const Tensor m = mean(x);
              const Tensor centered = add_broadcast(x, neg(m));
              const Tensor var = mean(mul(centered, centered));
              return detail::probe(mul_broadcast(centered, pow_scalar(add_scalar(var, 1e-8), -0.5)),
                                   p);
            },
            {x}};
  });
  register_case("smooth_l1", [](Rng& rng) -> Built {
    auto d = random_tensor({4, 3}, rng, -2.0, 2.0);
    // keep away from the |d| = beta junction
    for (double& v : d.data())
      if (std::abs(std::abs(v) - 1.0) < 0.05) v *= 1.2;
    return {[=]() { Rng p(7); return detail::probe(smooth_l1(d, 1.0), p); }, {d}};
  });
  register_case("ce_loss", [](Rng& rng) -> Built {
    auto c = random_tensor({3, 1}, rng, 0.1, 0.9);
    auto iou = random_tensor({3, 1}, rng, 0.1, 0.9);
    return {[=]() { Rng p(7); return detail::probe(ce_loss(c, iou), p); }, {c, iou}};
  });
  register_case("focal_loss", [](Rng& rng) -> Built {
    auto p = random_tensor({6, 1}, rng, 0.1, 0.9);
    std::vector<int> targets;
    for (int i = 0; i < 6; ++i) targets.push_back(rng.uniform_index(2) ? 1 : 0);
    return {[=]() { return focal_loss(p, targets, 0.25, 2.0); }, {p}};
  });
  register_case("li_fusion_layer", [](Rng& rng) -> Built {
    const std::size_t n = 5, cp = 4, ci = 3;
    auto fp = random_tensor({n, cp}, rng);
    auto fi = random_tensor({n, ci}, rng);
    Rng lrng = rng.fork(3);
    LiFusionLayer layer = LiFusionLayer::create(cp, ci, 0, lrng);
    return {[=]() {
              Rng p(7);
              auto out = fuse(layer, fp, fi);
              return add(detail::probe(out.fused, p), detail::probe(out.weight_map, p));
            },
            {fp, fi, layer.u, layer.v, layer.w}};
  });
  return cases;
}

/// Runs every case over `seeds` seeds; returns the worst report per case.
inline std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t base_seed, int seeds,
                                                        double step = 1e-5) {
  std::vector<GradCheckReport> reports;
  for (const auto& c : gradcheck_cases()) {
    GradCheckReport worst{c.name, 0.0, step, base_seed};
    for (int s = 0; s < seeds; ++s) {
      const auto rep = c.run(base_seed + static_cast<std::uint64_t>(s) * 1000003ULL, step);
      if (rep.max_rel_err >= worst.max_rel_err) worst = rep;
    }
    reports.push_back(worst);
  }
  return reports;
}

/// Negative control: an op whose backward is wrong by 10%. The harness
/// must report a relative error well above any passing threshold.
inline GradCheckReport run_corrupted_control(std::uint64_t seed, double step = 1e-5) {
  Rng rng(seed);
  auto x = detail::random_tensor({3, 3}, rng, 0.5, 1.5);
  auto corrupted_square = [](const Tensor& t) {
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.data()[i] * t.data()[i];
    auto tn = t.node();
    return make_op(
        t.shape(), std::move(out), {t},
        [tn](detail::Node& n) {
          for (std::size_t i = 0; i < n.grad.size(); ++i)
            tn->grad[i] += n.grad[i] * 2.2 * tn->data[i];  // should be 2.0
        },
        "corrupted_square");
  };
  return finite_diff_check(
      "corrupted_square", [&]() { return sum(corrupted_square(x)); }, {x}, step, seed);
}

inline nlohmann::json to_json(const GradCheckReport& r) {
  return {{"op_name", r.op_name}, {"max_rel_err", r.max_rel_err}, {"step", r.step},
          {"seed", r.seed}};
}

}  // namespace pf
