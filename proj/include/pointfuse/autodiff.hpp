#pragma once

// Minimal reverse-mode differentiation engine. Double precision only, no
// broadcasting beyond the documented bias/row cases, every backward rule
// written out analytically and checked against central finite differences.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "pointfuse/error.hpp"

namespace pf {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::atomic<std::uint64_t> g_seq{1};

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;  // leaf flag
  bool tracked = false;        // this node or an ancestor requires grad
  bool backward_done = false;  // set on a node used as a backward() root
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // scatters this->grad into parents

  std::size_t numel() const { return data.size(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

/// n-dimensional real array, optionally recorded on the autodiff tape.
///
/// Value semantics with a shared node: copies alias the same storage, which
/// is what parameter handles and graph edges both want.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data) {
    if (detail::shape_numel(shape) != data.size())
      throw DimensionError("Tensor: shape " + detail::shape_str(shape) + " wants " +
                           std::to_string(detail::shape_numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    n_ = std::make_shared<detail::Node>();
    n_->shape = std::move(shape);
    n_->data = std::move(data);
    n_->seq = detail::g_seq.fetch_add(1, std::memory_order_relaxed);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  static Tensor full(Shape shape, double v) {
    const std::size_t n = detail::shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::size_t numel() const { return n_->numel(); }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
  std::size_t ndim() const { return n_->shape.size(); }

  std::vector<double>& data() { return n_->data; }
  const std::vector<double>& data() const { return n_->data; }
  double value() const {
    if (numel() != 1) throw ContractError("Tensor::value: tensor is not scalar");
    return n_->data[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool f = true) {
    n_->requires_grad = f;
    n_->tracked = f;
    return *this;
  }

  /// Deep copy of shape and values, detached from any recorded graph.
  Tensor clone() const { return Tensor(n_->shape, n_->data); }

  /// Gradient accumulator; zeros are materialized on first access.
  const std::vector<double>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() {
    n_->grad.assign(n_->data.size(), 0.0);
    n_->backward_done = false;
  }

  std::shared_ptr<detail::Node> node() const { return n_; }

 private:
  std::shared_ptr<detail::Node> n_;
};

/// Builds a recorded op node. The backprop callback reads node.grad and
/// accumulates into node.parents[i]->grad (already sized). Modules outside
/// this header (losses, geometry) register their own ops through this.
inline Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                      std::function<void(detail::Node&)> backprop, const char* op) {
  Tensor out(std::move(shape), std::move(data));
  auto& n = *out.node();
  n.op = op;
  bool tracked = false;
  for (const auto& p : parents) {
    if (!p.defined()) throw ContractError(std::string(op) + ": undefined operand");
    tracked = tracked || p.node()->tracked;
  }
  if (tracked) {
    n.tracked = true;
    n.parents.reserve(parents.size());
    for (const auto& p : parents) n.parents.push_back(p.node());
    n.backprop = std::move(backprop);
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Reverse sweep from a scalar loss. Visits the recorded subgraph in exact
/// reverse recording order, so every node's gradient is complete before its
/// parents consume it. A node may root one backward sweep; rerunning
/// requires zero_grad() on the root first.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward: loss must be a defined scalar tensor");
  auto root = loss.node();
  if (root->backward_done)
    throw ContractError("backward: already ran on this node (reset with zero_grad)");
  root->backward_done = true;

  // Collect the reachable recorded subgraph.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  // seq is monotone in recording order; descending seq is a valid reverse
  // topological order of the tape.
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (detail::Node* n : order) {
    if (!n->backprop) continue;
    n->ensure_grad();
    for (const auto& p : n->parents) p->ensure_grad();
    n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <class Fwd, class Bwd>
Tensor unary_elemwise(const Tensor& x, const char* name, Fwd fwd, Bwd dfdx) {
  const auto& xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  auto xn = x.node();
  return make_op(
      x.shape(), std::move(out), {x},
      [xn, dfdx](Node& n) {
        for (std::size_t i = 0; i < n.data.size(); ++i)
          xn->grad[i] += n.grad[i] * dfdx(xn->data[i], n.data[i]);
      },
      name);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_op(
      a.shape(), std::move(out), {a, b},
      [an, bn](detail::Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          an->grad[i] += n.grad[i];
          bn->grad[i] += n.grad[i];
        }
      },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_op(
      a.shape(), std::move(out), {a, b},
      [an, bn](detail::Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          an->grad[i] += n.grad[i];
          bn->grad[i] -= n.grad[i];
        }
      },
      "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_op(
      a.shape(), std::move(out), {a, b},
      [an, bn](detail::Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          an->grad[i] += n.grad[i] * bn->data[i];
          bn->grad[i] += n.grad[i] * an->data[i];
        }
      },
      "mul");
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "div");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (b.data()[i] == 0.0) throw DomainError("div: division by zero");
    out[i] = a.data()[i] / b.data()[i];
  }
  auto an = a.node(), bn = b.node();
  return make_op(
      a.shape(), std::move(out), {a, b},
      [an, bn](detail::Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          const double inv = 1.0 / bn->data[i];
          an->grad[i] += n.grad[i] * inv;
          bn->grad[i] -= n.grad[i] * an->data[i] * inv * inv;
        }
      },
      "div");
}

/// Elementwise min; on ties the gradient goes to the first operand.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "minimum");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.data()[i], b.data()[i]);
  auto an = a.node(), bn = b.node();
  return make_op(
      a.shape(), std::move(out), {a, b},
      [an, bn](detail::Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          if (an->data[i] <= bn->data[i])
            an->grad[i] += n.grad[i];
          else
            bn->grad[i] += n.grad[i];
        }
      },
      "minimum");
}

/// Elementwise max; on ties the gradient goes to the first operand.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "maximum");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.data()[i], b.data()[i]);
  auto an = a.node(), bn = b.node();
  return make_op(
      a.shape(), std::move(out), {a, b},
      [an, bn](detail::Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          if (an->data[i] >= bn->data[i])
            an->grad[i] += n.grad[i];
          else
            bn->grad[i] += n.grad[i];
        }
      },
      "maximum");
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary_elemwise(
      x, "add_scalar", [s](double v) { return v + s; },
      [](double, double) { return 1.0; });
}

/// Broadcast add of a single-element tensor to every element of x.
inline Tensor add_broadcast(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("add_broadcast: scalar operand must have one element");
  const double sv = s.data()[0];
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + sv;
  auto xn = x.node(), sn = s.node();
  return make_op(
      x.shape(), std::move(out), {x, s},
      [xn, sn](detail::Node& n) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          xn->grad[i] += n.grad[i];
          acc += n.grad[i];
        }
        sn->grad[0] += acc;
      },
      "add_broadcast");
}

/// Broadcast multiply of every element of x by a single-element tensor.
inline Tensor mul_broadcast(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("mul_broadcast: scalar operand must have one element");
  const double sv = s.data()[0];
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * sv;
  auto xn = x.node(), sn = s.node();
  return make_op(
      x.shape(), std::move(out), {x, s},
      [xn, sn](detail::Node& n) {
        const double sv2 = sn->data[0];
        double acc = 0.0;
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          xn->grad[i] += n.grad[i] * sv2;
          acc += n.grad[i] * xn->data[i];
        }
        sn->grad[0] += acc;
      },
      "mul_broadcast");
}

inline Tensor mul_scalar(const Tensor& x, double s) {
  return detail::unary_elemwise(
      x, "mul_scalar", [s](double v) { return v * s; },
      [s](double, double) { return s; });
}

inline Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

inline Tensor log(const Tensor& x) {
  for (double v : x.data())
    if (v <= 0.0) throw DomainError("log: input must be strictly positive");
  return detail::unary_elemwise(
      x, "log", [](double v) { return std::log(v); },
      [](double xv, double) { return 1.0 / xv; });
}

/// x^p for fixed real exponent p; domain x >= 0 (x > 0 when p < 1).
inline Tensor pow_scalar(const Tensor& x, double p) {
  if (p == 0.0) return Tensor::full(x.shape(), 1.0);
  for (double v : x.data()) {
    if (v < 0.0 || (v == 0.0 && p < 1.0))
      throw DomainError("pow_scalar: input outside domain for exponent " + std::to_string(p));
  }
  return detail::unary_elemwise(
      x, "pow_scalar", [p](double v) { return std::pow(v, p); },
      [p](double xv, double) { return xv == 0.0 ? 0.0 : p * std::pow(xv, p - 1.0); });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_elemwise(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double xv, double) { return xv > 0.0 ? 1.0 : 0.0; });
}

inline Tensor tanh_act(const Tensor& x) {
  return detail::unary_elemwise(
      x, "tanh_act", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_elemwise(
      x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

// ---------------------------------------------------------------------------
// linear algebra / structural ops
// ---------------------------------------------------------------------------

/// y = x . weight (+ bias). x: [N x Cin], weight: [Cin x Cout], bias: [Cout].
inline Tensor linear(const Tensor& x, const Tensor& weight,
                     const std::optional<Tensor>& bias = std::nullopt) {
  if (x.ndim() != 2 || weight.ndim() != 2 || x.dim(1) != weight.dim(0))
    throw DimensionError("linear: inner dimensions disagree, x " +
                         detail::shape_str(x.shape()) + " vs weight " +
                         detail::shape_str(weight.shape()));
  const std::size_t n = x.dim(0), cin = x.dim(1), cout = weight.dim(1);
  if (bias && (bias->ndim() != 1 || bias->dim(0) != cout))
    throw DimensionError("linear: bias shape " + detail::shape_str(bias->shape()) +
                         " does not match Cout " + std::to_string(cout));

  std::vector<double> out(n * cout, 0.0);
  const auto& xd = x.data();
  const auto& wd = weight.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < cin; ++k) {
      const double xv = xd[i * cin + k];
      if (xv == 0.0) continue;
      const double* wrow = wd.data() + k * cout;
      double* orow = out.data() + i * cout;
      for (std::size_t j = 0; j < cout; ++j) orow[j] += xv * wrow[j];
    }
  if (bias)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < cout; ++j) out[i * cout + j] += bias->data()[j];

  auto xn = x.node(), wn = weight.node();
  auto bn = bias ? bias->node() : nullptr;
  std::vector<Tensor> parents{x, weight};
  if (bias) parents.push_back(*bias);
  return make_op(
      {n, cout}, std::move(out), std::move(parents),
      [xn, wn, bn, n, cin, cout](detail::Node& node) {
        const auto& g = node.grad;
        for (std::size_t i = 0; i < n; ++i) {
          const double* grow = g.data() + i * cout;
          for (std::size_t k = 0; k < cin; ++k) {
            const double xv = xn->data[i * cin + k];
            const double* wrow = wn->data.data() + k * cout;
            double* wgrow = wn->grad.data() + k * cout;
            double acc = 0.0;
            for (std::size_t j = 0; j < cout; ++j) {
              acc += grow[j] * wrow[j];
              wgrow[j] += grow[j] * xv;
            }
            xn->grad[i * cin + k] += acc;
          }
          if (bn)
            for (std::size_t j = 0; j < cout; ++j) bn->grad[j] += grow[j];
        }
      },
      "linear");
}

namespace detail {

/// Valid output-coordinate interval [lo, hi) of one 3x3 tap: those oy (or
/// ox) for which iy = oy*stride - padding + kt lands inside [0, extent).
inline void conv_tap_range(std::size_t out_extent, std::size_t in_extent, int stride, int padding,
                           int kt, std::size_t& lo, std::size_t& hi) {
  const int off = kt - padding;
  long lo_l = 0;
  while (lo_l * stride + off < 0) ++lo_l;
  long hi_l = static_cast<long>(out_extent);
  while (hi_l > lo_l && (hi_l - 1) * stride + off >= static_cast<long>(in_extent)) --hi_l;
  lo = static_cast<std::size_t>(lo_l);
  hi = static_cast<std::size_t>(std::max(lo_l, hi_l));
}

}  // namespace detail

/// 3x3 cross-correlation. x: [C x H x W], kernels: [K x C x 3 x 3],
/// stride in {1,2}, padding typically 1. Evaluated tap by tap as dense
/// plane sweeps, so the hot loops carry no bounds checks.
inline Tensor conv2d(const Tensor& x, const Tensor& kernels, int stride, int padding) {
  if (x.ndim() != 3) throw DimensionError("conv2d: input must be CxHxW");
  if (kernels.ndim() != 4 || kernels.dim(2) != 3 || kernels.dim(3) != 3)
    throw DimensionError("conv2d: kernels must be KxCx3x3");
  if (kernels.dim(1) != x.dim(0))
    throw DimensionError("conv2d: channel mismatch, input " + detail::shape_str(x.shape()) +
                         " vs kernels " + detail::shape_str(kernels.shape()));
  if (stride != 1 && stride != 2) throw ContractError("conv2d: stride must be 1 or 2");
  if (padding < 0) throw ContractError("conv2d: padding must be >= 0");

  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), k = kernels.dim(0);
  const std::ptrdiff_t hp = static_cast<std::ptrdiff_t>(h) + 2 * padding - 3;
  const std::ptrdiff_t wp = static_cast<std::ptrdiff_t>(w) + 2 * padding - 3;
  if (hp < 0 || wp < 0)
    throw DimensionError("conv2d: input " + detail::shape_str(x.shape()) +
                         " smaller than kernel after padding");
  const std::size_t ho = static_cast<std::size_t>(hp) / stride + 1;
  const std::size_t wo = static_cast<std::size_t>(wp) / stride + 1;

  std::vector<double> out(k * ho * wo, 0.0);
  const auto& xd = x.data();
  const auto& kd = kernels.data();
  const std::size_t us = static_cast<std::size_t>(stride);
  for (std::size_t ok = 0; ok < k; ++ok)
    for (std::size_t ic = 0; ic < c; ++ic)
      for (int ky = 0; ky < 3; ++ky) {
        std::size_t oy_lo, oy_hi;
        detail::conv_tap_range(ho, h, stride, padding, ky, oy_lo, oy_hi);
        for (int kx = 0; kx < 3; ++kx) {
          const double kv = kd[((ok * c + ic) * 3 + static_cast<std::size_t>(ky)) * 3 +
                               static_cast<std::size_t>(kx)];
          if (kv == 0.0) continue;
          std::size_t ox_lo, ox_hi;
          detail::conv_tap_range(wo, w, stride, padding, kx, ox_lo, ox_hi);
          for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
            // iy = oy*stride + ky - padding, non-negative inside the tap range
            const std::size_t iy = oy * us + static_cast<std::size_t>(ky) -
                                   static_cast<std::size_t>(padding);
            const double* src = xd.data() + (ic * h + iy) * w;
            double* dst = out.data() + (ok * ho + oy) * wo;
            for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
              dst[ox] += kv * src[ox * us + static_cast<std::size_t>(kx) -
                                  static_cast<std::size_t>(padding)];
          }
        }
      }

  auto xn = x.node(), kn = kernels.node();
  return make_op(
      {k, ho, wo}, std::move(out), {x, kernels},
      [xn, kn, c, h, w, k, ho, wo, stride, padding](detail::Node& node) {
        const auto& g = node.grad;
        const std::size_t us = static_cast<std::size_t>(stride);
        for (std::size_t ok = 0; ok < k; ++ok)
          for (std::size_t ic = 0; ic < c; ++ic)
            for (int ky = 0; ky < 3; ++ky) {
              std::size_t oy_lo, oy_hi;
              detail::conv_tap_range(ho, h, stride, padding, ky, oy_lo, oy_hi);
              for (int kx = 0; kx < 3; ++kx) {
                std::size_t ox_lo, ox_hi;
                detail::conv_tap_range(wo, w, stride, padding, kx, ox_lo, ox_hi);
                const std::size_t ki = ((ok * c + ic) * 3 + static_cast<std::size_t>(ky)) * 3 +
                                       static_cast<std::size_t>(kx);
                const double kv = kn->data[ki];
                double k_acc = 0.0;
                for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                  const std::size_t row =
                      (ic * h + (oy * us + static_cast<std::size_t>(ky) -
                                 static_cast<std::size_t>(padding))) * w;
                  const double* gp = g.data() + (ok * ho + oy) * wo;
                  const double* xp = xn->data.data() + row;
                  double* xg = xn->grad.data() + row;
                  for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                    const std::size_t ix = ox * us + static_cast<std::size_t>(kx) -
                                           static_cast<std::size_t>(padding);
                    k_acc += gp[ox] * xp[ix];
                    xg[ix] += gp[ox] * kv;
                  }
                }
                kn->grad[ki] += k_acc;
              }
            }
      },
      "conv2d");
}

/// Pointwise channel mix: x [C x H x W] with weight [K x C] -> [K x H x W].
inline Tensor conv1x1(const Tensor& x, const Tensor& weight) {
  if (x.ndim() != 3 || weight.ndim() != 2 || weight.dim(1) != x.dim(0))
    throw DimensionError("conv1x1: input " + detail::shape_str(x.shape()) +
                         " vs weight " + detail::shape_str(weight.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), k = weight.dim(0);
  const std::size_t hw = h * w;
  std::vector<double> out(k * hw, 0.0);
  for (std::size_t ok = 0; ok < k; ++ok)
    for (std::size_t ic = 0; ic < c; ++ic) {
      const double wv = weight.data()[ok * c + ic];
      if (wv == 0.0) continue;
      const double* src = x.data().data() + ic * hw;
      double* dst = out.data() + ok * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] += wv * src[i];
    }
  auto xn = x.node(), wn = weight.node();
  return make_op(
      {k, h, w}, std::move(out), {x, weight},
      [xn, wn, c, k, hw](detail::Node& node) {
        for (std::size_t ok = 0; ok < k; ++ok)
          for (std::size_t ic = 0; ic < c; ++ic) {
            const double* g = node.grad.data() + ok * hw;
            const double* src = xn->data.data() + ic * hw;
            double* xg = xn->grad.data() + ic * hw;
            const double wv = wn->data[ok * c + ic];
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
              acc += g[i] * src[i];
              xg[i] += g[i] * wv;
            }
            wn->grad[ok * c + ic] += acc;
          }
      },
      "conv1x1");
}

/// Adds a per-channel bias to a [C x H x W] map.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.ndim() != 3 || bias.ndim() != 1 || bias.dim(0) != x.dim(0))
    throw DimensionError("add_channel_bias: input " + detail::shape_str(x.shape()) +
                         " vs bias " + detail::shape_str(bias.shape()));
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<double> out(x.data());
  for (std::size_t ic = 0; ic < c; ++ic) {
    const double b = bias.data()[ic];
    double* dst = out.data() + ic * hw;
    for (std::size_t i = 0; i < hw; ++i) dst[i] += b;
  }
  auto xn = x.node(), bn = bias.node();
  return make_op(
      x.shape(), std::move(out), {x, bias},
      [xn, bn, c, hw](detail::Node& node) {
        for (std::size_t ic = 0; ic < c; ++ic) {
          const double* g = node.grad.data() + ic * hw;
          double* xg = xn->grad.data() + ic * hw;
          double acc = 0.0;
          for (std::size_t i = 0; i < hw; ++i) {
            xg[i] += g[i];
            acc += g[i];
          }
          bn->grad[ic] += acc;
        }
      },
      "add_channel_bias");
}

/// Bilinear sample of a [C x H x W] map at continuous (u, v) pixel positions.
/// Pixel centers sit at integer coordinates; out-of-bounds neighbors
/// contribute zero (zero-padding border). Invalid points yield zero rows.
/// Gradients flow to the feature map only; coordinates are constants.
inline Tensor bilinear_sample(const Tensor& f, const std::vector<std::pair<double, double>>& coords,
                              const std::vector<bool>& valid) {
  if (f.ndim() != 3) throw DimensionError("bilinear_sample: feature map must be CxHxW");
  if (coords.size() != valid.size())
    throw DimensionError("bilinear_sample: coords count " + std::to_string(coords.size()) +
                         " != mask count " + std::to_string(valid.size()));
  const std::size_t c = f.dim(0), h = f.dim(1), w = f.dim(2), n = coords.size();
  for (std::size_t i = 0; i < n; ++i)
    if (valid[i] && (!std::isfinite(coords[i].first) || !std::isfinite(coords[i].second)))
      throw InputError("bilinear_sample: non-finite coordinate at point " + std::to_string(i));

  // Per valid point: up to 4 (pixel index, weight) taps, shared by backward.
  struct Tap {
    std::size_t pix;
    double wgt;
  };
  auto taps = std::make_shared<std::vector<std::array<Tap, 4>>>(n);
  auto tap_count = std::make_shared<std::vector<std::uint8_t>>(n, 0);

  std::vector<double> out(n * c, 0.0);
  const auto& fd = f.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid[i]) continue;
    const double u = coords[i].first, v = coords[i].second;
    const double fu = std::floor(u), fv = std::floor(v);
    const long u0 = static_cast<long>(fu), v0 = static_cast<long>(fv);
    const double du = u - fu, dv = v - fv;
    const double wgt[4] = {(1 - du) * (1 - dv), du * (1 - dv), (1 - du) * dv, du * dv};
    const long uu[4] = {u0, u0 + 1, u0, u0 + 1};
    const long vv[4] = {v0, v0, v0 + 1, v0 + 1};
    std::uint8_t cnt = 0;
    for (int t = 0; t < 4; ++t) {
      if (uu[t] < 0 || uu[t] >= static_cast<long>(w) || vv[t] < 0 ||
          vv[t] >= static_cast<long>(h) || wgt[t] == 0.0)
        continue;
      (*taps)[i][cnt] = {static_cast<std::size_t>(vv[t]) * w + static_cast<std::size_t>(uu[t]),
                         wgt[t]};
      ++cnt;
    }
    (*tap_count)[i] = cnt;
    for (std::size_t ic = 0; ic < c; ++ic) {
      const double* plane = fd.data() + ic * h * w;
      double acc = 0.0;
      for (std::uint8_t t = 0; t < cnt; ++t) acc += plane[(*taps)[i][t].pix] * (*taps)[i][t].wgt;
      out[i * c + ic] = acc;
    }
  }

  auto fn = f.node();
  return make_op(
      {n, c}, std::move(out), {f},
      [fn, taps, tap_count, c, h, w, n](detail::Node& node) {
        for (std::size_t i = 0; i < n; ++i) {
          const std::uint8_t cnt = (*tap_count)[i];
          for (std::size_t ic = 0; ic < c; ++ic) {
            const double gv = node.grad[i * c + ic];
            if (gv == 0.0) continue;
            double* plane = fn->grad.data() + ic * h * w;
            for (std::uint8_t t = 0; t < cnt; ++t)
              plane[(*taps)[i][t].pix] += gv * (*taps)[i][t].wgt;
          }
        }
      },
      "bilinear_sample");
}

/// Channel-wise concatenation of [N x Ca] and [N x Cb].
inline Tensor concat(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0))
    throw DimensionError("concat: leading dimensions differ, " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  std::vector<double> out(n * (ca + cb));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(b.data().data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  auto an = a.node(), bn = b.node();
  return make_op(
      {n, ca + cb}, std::move(out), {a, b},
      [an, bn, n, ca, cb](detail::Node& node) {
        for (std::size_t i = 0; i < n; ++i) {
          const double* g = node.grad.data() + i * (ca + cb);
          for (std::size_t j = 0; j < ca; ++j) an->grad[i * ca + j] += g[j];
          for (std::size_t j = 0; j < cb; ++j) bn->grad[i * cb + j] += g[ca + j];
        }
      },
      "concat");
}

/// Channel concatenation of two [C x H x W] maps.
inline Tensor concat_maps(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw DimensionError("concat_maps: spatial dims differ, " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
  const std::size_t ca = a.dim(0), cb = b.dim(0), hw = a.dim(1) * a.dim(2);
  std::vector<double> out;
  out.reserve((ca + cb) * hw);
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  auto an = a.node(), bn = b.node();
  return make_op(
      {ca + cb, a.dim(1), a.dim(2)}, std::move(out), {a, b},
      [an, bn, ca, hw, cb](detail::Node& node) {
        for (std::size_t i = 0; i < ca * hw; ++i) an->grad[i] += node.grad[i];
        for (std::size_t i = 0; i < cb * hw; ++i) bn->grad[i] += node.grad[ca * hw + i];
      },
      "concat_maps");
}

/// Per-group, per-channel max over [G x K x C] -> [G x C].
/// Gradient routes to the first occurrence of the max.
inline Tensor grouped_max(const Tensor& x) {
  if (x.ndim() != 3) throw DimensionError("grouped_max: input must be GxKxC");
  const std::size_t g = x.dim(0), k = x.dim(1), c = x.dim(2);
  if (k < 1) throw InputError("grouped_max: empty group (K must be >= 1)");
  std::vector<double> out(g * c);
  auto argmax = std::make_shared<std::vector<std::size_t>>(g * c);
  const auto& xd = x.data();
  for (std::size_t ig = 0; ig < g; ++ig)
    for (std::size_t ic = 0; ic < c; ++ic) {
      double best = xd[(ig * k) * c + ic];
      std::size_t bi = 0;
      for (std::size_t ik = 1; ik < k; ++ik) {
        const double v = xd[(ig * k + ik) * c + ic];
        if (v > best) {
          best = v;
          bi = ik;
        }
      }
      out[ig * c + ic] = best;
      (*argmax)[ig * c + ic] = bi;
    }
  auto xn = x.node();
  return make_op(
      {g, c}, std::move(out), {x},
      [xn, argmax, g, k, c](detail::Node& node) {
        for (std::size_t ig = 0; ig < g; ++ig)
          for (std::size_t ic = 0; ic < c; ++ic)
            xn->grad[(ig * k + (*argmax)[ig * c + ic]) * c + ic] += node.grad[ig * c + ic];
      },
      "grouped_max");
}

/// Nearest-neighbor upsampling of a [C x H x W] map by an integer factor.
inline Tensor upsample_nearest(const Tensor& x, int factor) {
  if (x.ndim() != 3) throw DimensionError("upsample_nearest: input must be CxHxW");
  if (factor <= 0) throw InputError("upsample_nearest: factor must be positive");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t f = static_cast<std::size_t>(factor);
  const std::size_t ho = h * f, wo = w * f;
  std::vector<double> out(c * ho * wo);
  const auto& xd = x.data();
  for (std::size_t ic = 0; ic < c; ++ic)
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const double* src = xd.data() + (ic * h + oy / f) * w;
      double* dst = out.data() + (ic * ho + oy) * wo;
      for (std::size_t ox = 0; ox < wo; ++ox) dst[ox] = src[ox / f];
    }
  auto xn = x.node();
  return make_op(
      {c, ho, wo}, std::move(out), {x},
      [xn, c, h, w, f, ho, wo](detail::Node& node) {
        for (std::size_t ic = 0; ic < c; ++ic)
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const double* g = node.grad.data() + (ic * ho + oy) * wo;
            double* dst = xn->grad.data() + (ic * h + oy / f) * w;
            for (std::size_t ox = 0; ox < wo; ++ox) dst[ox / f] += g[ox];
          }
      },
      "upsample_nearest");
}

/// Reinterprets the row-major buffer under a new shape (same element count).
inline Tensor reshape(const Tensor& x, Shape new_shape) {
  if (detail::shape_numel(new_shape) != x.numel())
    throw DimensionError("reshape: " + detail::shape_str(x.shape()) + " has " +
                         std::to_string(x.numel()) + " elements, target " +
                         detail::shape_str(new_shape) + " wants " +
                         std::to_string(detail::shape_numel(new_shape)));
  auto xn = x.node();
  return make_op(
      std::move(new_shape), std::vector<double>(x.data()), {x},
      [xn](detail::Node& node) {
        for (std::size_t i = 0; i < node.grad.size(); ++i) xn->grad[i] += node.grad[i];
      },
      "reshape");
}

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto xn = x.node();
  return make_op(
      {1}, {acc}, {x},
      [xn](detail::Node& node) {
        const double g = node.grad[0];
        for (double& gv : xn->grad) gv += g;
      },
      "sum");
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw InputError("mean: empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Column slice [begin, end) of an [N x C] tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.ndim() != 2 || begin > end || end > x.dim(1))
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for " + detail::shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), cs = end - begin;
  std::vector<double> out(n * cs);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.data().data() + i * c + begin, cs, out.data() + i * cs);
  auto xn = x.node();
  return make_op(
      {n, cs}, std::move(out), {x},
      [xn, n, c, cs, begin](detail::Node& node) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < cs; ++j)
            xn->grad[i * c + begin + j] += node.grad[i * cs + j];
      },
      "slice_cols");
}

/// Row gather of an [N x C] tensor; backward scatter-adds.
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> rows) {
  if (x.ndim() != 2) throw DimensionError("gather_rows: input must be NxC");
  const std::size_t n = x.dim(0), c = x.dim(1);
  for (std::size_t r : rows)
    if (r >= n) throw InputError("gather_rows: row index " + std::to_string(r) + " out of range");
  const std::size_t m = rows.size();
  std::vector<double> out(m * c);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data().data() + rows[i] * c, c, out.data() + i * c);
  auto xn = x.node();
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(rows));
  return make_op(
      {m, c}, std::move(out), {x},
      [xn, idx, c](detail::Node& node) {
        for (std::size_t i = 0; i < idx->size(); ++i)
          for (std::size_t j = 0; j < c; ++j)
            xn->grad[(*idx)[i] * c + j] += node.grad[i * c + j];
      },
      "gather_rows");
}

/// Interpolates rows of [M x C] onto N outputs: out[i] = sum_j w[i][j] * x[idx[i][j]].
/// Indices and weights are constants (geometry-derived).
inline Tensor weighted_gather_rows(const Tensor& x,
                                   const std::vector<std::array<std::size_t, 3>>& idx,
                                   const std::vector<std::array<double, 3>>& wgt) {
  if (x.ndim() != 2) throw DimensionError("weighted_gather_rows: input must be MxC");
  if (idx.size() != wgt.size())
    throw DimensionError("weighted_gather_rows: index/weight count mismatch");
  const std::size_t m = x.dim(0), c = x.dim(1), n = idx.size();
  for (const auto& tri : idx)
    for (std::size_t r : tri)
      if (r >= m) throw InputError("weighted_gather_rows: row index out of range");
  std::vector<double> out(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (int t = 0; t < 3; ++t) {
      const double w = wgt[i][static_cast<std::size_t>(t)];
      if (w == 0.0) continue;
      const double* src = x.data().data() + idx[i][static_cast<std::size_t>(t)] * c;
      double* dst = out.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += w * src[j];
    }
  auto xn = x.node();
  auto idx_s = std::make_shared<std::vector<std::array<std::size_t, 3>>>(idx);
  auto wgt_s = std::make_shared<std::vector<std::array<double, 3>>>(wgt);
  return make_op(
      {n, c}, std::move(out), {x},
      [xn, idx_s, wgt_s, c](detail::Node& node) {
        for (std::size_t i = 0; i < idx_s->size(); ++i)
          for (int t = 0; t < 3; ++t) {
            const double w = (*wgt_s)[i][static_cast<std::size_t>(t)];
            if (w == 0.0) continue;
            double* dst = xn->grad.data() + (*idx_s)[i][static_cast<std::size_t>(t)] * c;
            const double* g = node.grad.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) dst[j] += w * g[j];
          }
      },
      "weighted_gather_rows");
}

/// Scales each row of [N x C] by the matching entry of a [N x 1] column.
inline Tensor row_scale(const Tensor& scale, const Tensor& x) {
  if (scale.ndim() != 2 || scale.dim(1) != 1 || x.ndim() != 2 || scale.dim(0) != x.dim(0))
    throw DimensionError("row_scale: scale " + detail::shape_str(scale.shape()) +
                         " does not match " + detail::shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = scale.data()[i];
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = s * x.data()[i * c + j];
  }
  auto sn = scale.node(), xn = x.node();
  return make_op(
      {n, c}, std::move(out), {scale, x},
      [sn, xn, n, c](detail::Node& node) {
        for (std::size_t i = 0; i < n; ++i) {
          const double s = sn->data[i];
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double g = node.grad[i * c + j];
            acc += g * xn->data[i * c + j];
            xn->grad[i * c + j] += g * s;
          }
          sn->grad[i] += acc;
        }
      },
      "row_scale");
}

/// Per-row softmax cross entropy of [N x B] logits against integer labels.
/// Returns [N x 1] losses; numerically stabilized by the row max.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.ndim() != 2) throw DimensionError("softmax_cross_entropy: logits must be NxB");
  const std::size_t n = logits.dim(0), b = logits.dim(1);
  if (labels.size() != n)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  for (std::size_t l : labels)
    if (l >= b) throw InputError("softmax_cross_entropy: label out of range");

  auto probs = std::make_shared<std::vector<double>>(n * b);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * b;
    double mx = row[0];
    for (std::size_t j = 1; j < b; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < b; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < b; ++j) (*probs)[i * b + j] = std::exp(row[j] - mx) / z;
    out[i] = -(row[labels[i]] - mx - std::log(z));
  }
  auto ln = logits.node();
  auto lab = std::make_shared<std::vector<std::size_t>>(labels);
  return make_op(
      {n, 1}, std::move(out), {logits},
      [ln, probs, lab, n, b](detail::Node& node) {
        for (std::size_t i = 0; i < n; ++i) {
          const double g = node.grad[i];
          if (g == 0.0) continue;
          for (std::size_t j = 0; j < b; ++j)
            ln->grad[i * b + j] += g * ((*probs)[i * b + j] - (j == (*lab)[i] ? 1.0 : 0.0));
        }
      },
      "softmax_cross_entropy");
}

// ---------------------------------------------------------------------------
// finite-difference verification harness
// ---------------------------------------------------------------------------

struct GradCheckReport {
  std::string op_name;
  double max_rel_err = 0.0;
  double step = 0.0;
  std::uint64_t seed = 0;
};

/// Central-difference check of a scalar-valued function against the
/// analytic gradients of the given parameters. Relative error denominator
/// is max(1, |analytic|, |numeric|).
inline GradCheckReport finite_diff_check(const std::string& op_name,
                                         const std::function<Tensor()>& f,
                                         std::vector<Tensor> params, double step,
                                         std::uint64_t seed = 0) {
  if (step <= 0.0) throw InputError("finite_diff_check: step must be positive");
  for (auto& p : params) p.zero_grad();
  Tensor loss = f();
  if (!std::isfinite(loss.value())) throw InputError("finite_diff_check: non-finite loss");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  GradCheckReport report{op_name, 0.0, step, seed};
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& values = params[pi].data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double lp = f().value();
      values[i] = saved - step;
      const double lm = f().value();
      values[i] = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm))
        throw InputError("finite_diff_check: non-finite perturbed loss");
      const double numeric = (lp - lm) / (2.0 * step);
      const double a = analytic[pi][i];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      report.max_rel_err = std::max(report.max_rel_err, std::abs(a - numeric) / denom);
    }
  }
  return report;
}

}  // namespace pf
