#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "odv/eval.hpp"
#include "odv/graph.hpp"
#include "odv/tensor.hpp"

namespace odv {

/// Axis-aligned box over the flattened graph input.
struct Box {
  std::vector<double> lo;
  std::vector<double> hi;

  std::size_t dims() const noexcept { return lo.size(); }
  double width(std::size_t i) const { return hi[i] - lo[i]; }
  double max_width() const {
    double w = 0.0;
    for (std::size_t i = 0; i < lo.size(); ++i) w = std::max(w, hi[i] - lo[i]);
    return w;
  }
  bool contains(std::span<const double> x) const {
    for (std::size_t i = 0; i < lo.size(); ++i)
      if (!(x[i] >= lo[i] && x[i] <= hi[i])) return false;
    return true;
  }
  std::vector<double> midpoint() const {
    std::vector<double> m(lo.size());
    for (std::size_t i = 0; i < lo.size(); ++i) m[i] = lo[i] + (hi[i] - lo[i]) / 2;
    return m;
  }
};

/// L-infinity neighbourhood {I : |I - center| <= radius elementwise}, optionally
/// intersected with the unit box.
struct InputRegion {
  Tensor center;
  std::vector<double> radius;
  bool clip_unit = true;

  /// Uniform radius `epsilon`; when `pixels` is non-empty only those flat indices move.
  static InputRegion linf(Tensor center, double epsilon, bool clip_unit = true,
                          const std::vector<std::size_t>& pixels = {}) {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("perturbation radius must be nonnegative");
    InputRegion r;
    r.radius.assign(center.size(), pixels.empty() ? epsilon : 0.0);
    for (std::size_t p : pixels) {
      if (p >= center.size()) throw std::out_of_range("perturbed pixel index " + std::to_string(p) + " out of range");
      r.radius[p] = epsilon;
    }
    r.center = std::move(center);
    r.clip_unit = clip_unit;
    return r;
  }

  /// Exact membership test used for witness validation.
  bool contains(std::span<const double> x) const {
    if (x.size() != center.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double c = center[i];
      if (!(c - x[i] <= radius[i] && x[i] - c <= radius[i])) return false;
      if (clip_unit && !(x[i] >= 0.0 && x[i] <= 1.0)) return false;
    }
    return true;
  }

  /// Floating-point box whose every point passes contains().
  Box box() const {
    Box b;
    b.lo.resize(center.size());
    b.hi.resize(center.size());
    constexpr double inf = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < center.size(); ++i) {
      const double c = center[i], r = radius[i];
      if (r < 0.0) throw std::invalid_argument("negative radius");
      double lo = c - r, hi = c + r;
      while (c - lo > r) lo = std::nextafter(lo, inf);
      while (hi - c > r) hi = std::nextafter(hi, -inf);
      if (clip_unit) {
        lo = std::max(lo, 0.0);
        hi = std::min(hi, 1.0);
        if (lo > hi) throw std::invalid_argument("region does not intersect the unit box at index " + std::to_string(i));
      }
      b.lo[i] = lo;
      b.hi[i] = hi;
    }
    return b;
  }
};

/// Per-node lower and upper bounds, indexed by node id.
struct IntervalBounds {
  std::vector<Tensor> lower;
  std::vector<Tensor> upper;
};

struct Interval {
  double lo;
  double hi;
};

/// Affine lower and upper bounds of one output scalar in terms of the graph input.
struct LinearBoundsEntry {
  std::vector<double> lower_coeff;
  double lower_offset = 0.0;
  std::vector<double> upper_coeff;
  double upper_offset = 0.0;
};

namespace detail {

inline double down(double v) { return std::nextafter(v, -std::numeric_limits<double>::infinity()); }
inline double up(double v) { return std::nextafter(v, std::numeric_limits<double>::infinity()); }

/// Interval of a single node from the intervals of its operands (no widening).
inline void ibp_node(const ComputeGraph& g, const Node& n, const Box& box, IntervalBounds& b) {
  Tensor lo(n.shape), hi(n.shape);
  auto L = [&](std::size_t k) { return b.lower[n.inputs[k]].values(); };
  auto U = [&](std::size_t k) { return b.upper[n.inputs[k]].values(); };
  switch (n.kind) {
    case OpKind::Input:
      for (std::size_t i = 0; i < lo.size(); ++i) {
        lo[i] = box.lo[i];
        hi[i] = box.hi[i];
      }
      break;
    case OpKind::Const:
      lo = n.value;
      hi = n.value;
      break;
    case OpKind::Affine: {
      const std::size_t out = n.weight.shape()[0], in = n.weight.shape()[1];
      auto xl = L(0), xu = U(0);
      for (std::size_t r = 0; r < out; ++r) {
        double acc_l = n.bias[r], acc_u = n.bias[r];
        for (std::size_t c = 0; c < in; ++c) {
          const double w = n.weight[r * in + c];
          const double a = w * xl[c], z = w * xu[c];
          acc_l += std::min(a, z);
          acc_u += std::max(a, z);
        }
        lo[r] = acc_l;
        hi[r] = acc_u;
      }
      break;
    }
    case OpKind::Conv2D: {
      auto geo = conv_geometry(n, g.node(n.inputs[0]).shape);
      const std::size_t plane = geo.out_h * geo.out_w;
      for (std::size_t o = 0; o < geo.out_ch; ++o)
        for (std::size_t p = 0; p < plane; ++p) lo[o * plane + p] = hi[o * plane + p] = n.bias[o];
      auto xl = L(0), xu = U(0);
      for_each_conv_tap(geo, [&](std::size_t oi, std::size_t ii, std::size_t ki) {
        const double w = n.weight[ki];
        const double a = w * xl[ii], z = w * xu[ii];
        lo[oi] += std::min(a, z);
        hi[oi] += std::max(a, z);
      });
      break;
    }
    case OpKind::ReLU:
      for (std::size_t i = 0; i < lo.size(); ++i) {
        lo[i] = std::max(L(0)[i], 0.0);
        hi[i] = std::max(U(0)[i], 0.0);
      }
      break;
    case OpKind::Sigmoid:
      for (std::size_t i = 0; i < lo.size(); ++i) {
        lo[i] = sigmoid(n.slope, L(0)[i]);
        hi[i] = sigmoid(n.slope, U(0)[i]);
      }
      break;
    case OpKind::Add:
      for (std::size_t i = 0; i < lo.size(); ++i) {
        lo[i] = L(0)[i] + L(1)[i];
        hi[i] = U(0)[i] + U(1)[i];
      }
      break;
    case OpKind::Sub:
      for (std::size_t i = 0; i < lo.size(); ++i) {
        lo[i] = L(0)[i] - U(1)[i];
        hi[i] = U(0)[i] - L(1)[i];
      }
      break;
    case OpKind::Mul: {
      const bool square = n.inputs[0] == n.inputs[1];
      for (std::size_t i = 0; i < lo.size(); ++i) {
        const double al = L(0)[i], au = U(0)[i], bl = L(1)[i], bu = U(1)[i];
        if (square) {
          const double sl = al * al, su = au * au;
          lo[i] = (al <= 0.0 && au >= 0.0) ? 0.0 : std::min(sl, su);
          hi[i] = std::max(sl, su);
        } else {
          const std::array<double, 4> c{al * bl, al * bu, au * bl, au * bu};
          lo[i] = *std::min_element(c.begin(), c.end());
          hi[i] = *std::max_element(c.begin(), c.end());
        }
      }
      break;
    }
    case OpKind::SumReduce: {
      double sl = 0.0, su = 0.0;
      for (std::size_t i = 0; i < L(0).size(); ++i) {
        sl += L(0)[i];
        su += U(0)[i];
      }
      lo[0] = sl;
      hi[0] = su;
      break;
    }
    case OpKind::Concat: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k)
        for (std::size_t i = 0; i < L(k).size(); ++i, ++off) {
          lo[off] = L(k)[i];
          hi[off] = U(k)[i];
        }
      break;
    }
    case OpKind::Slice:
      for (std::size_t i = n.begin; i < n.end; ++i) {
        lo[i - n.begin] = L(0)[i];
        hi[i - n.begin] = U(0)[i];
      }
      break;
  }
  b.lower[n.id] = std::move(lo);
  b.upper[n.id] = std::move(hi);
}

inline void widen(IntervalBounds& b, NodeId id) {
  for (double& v : b.lower[id].storage()) v = down(v);
  for (double& v : b.upper[id].storage()) v = up(v);
}

}  // namespace detail

/// Interval bound propagation over a box. Every interval is widened by one ulp outward.
inline IntervalBounds ibp(const ComputeGraph& graph, const Box& box) {
  if (box.dims() != numel(graph.input_shape())) throw std::invalid_argument("box dimension mismatch");
  IntervalBounds b;
  b.lower.resize(graph.size());
  b.upper.resize(graph.size());
  for (const Node& n : graph.nodes()) {
    detail::ibp_node(graph, n, box, b);
    detail::widen(b, n.id);
  }
  return b;
}

inline IntervalBounds ibp(const ComputeGraph& graph, const InputRegion& region) {
  return ibp(graph, region.box());
}

/// Linear lower envelope (al*x + bl) and upper envelope (au*x + bu) of a unary function.
struct LineRelaxation {
  double al = 0.0, bl = 0.0, au = 0.0, bu = 0.0;
};

/// Lower line used for a ReLU whose input interval straddles zero.
enum class ReluLowerRule {
  Adaptive,  // identity if u >= |l|, else zero
  Zero,      // always zero; never looser than interval arithmetic
};

inline LineRelaxation relax_relu(double l, double u, ReluLowerRule rule = ReluLowerRule::Adaptive) {
  if (l >= 0.0) return {1.0, 0.0, 1.0, 0.0};
  if (u <= 0.0) return {0.0, 0.0, 0.0, 0.0};
  const double slope = u / (u - l);
  const double alpha = rule == ReluLowerRule::Adaptive && u >= -l ? 1.0 : 0.0;
  return {alpha, 0.0, slope, -slope * l};
}

/// Sound lines for S(x) = sigmoid(slope * x) on [l, u]. Convex side (u <= 0): secant
/// above, midpoint tangent below; concave side mirrored. Straddling intervals use lines
/// anchored at the endpoints with slope min(S'(endpoint), secant slope). Every candidate
/// is checked on 17 points; if a line is violated beyond rounding the constant envelope
/// [S(l), S(u)] is used instead.
inline LineRelaxation relax_sigmoid(double slope, double l, double u) {
  const double sl = sigmoid(slope, l), su = sigmoid(slope, u);
  const LineRelaxation constant{0.0, sl, 0.0, su};
  const double scale = std::max({1.0, std::abs(l), std::abs(u)});
  if (!(u - l > 1e-12 * scale)) return constant;

  const double secant = (su - sl) / (u - l);
  LineRelaxation r;
  if (u <= 0.0) {
    const double m = l + (u - l) / 2, d = sigmoid_derivative(slope, m);
    r = {d, sigmoid(slope, m) - d * m, secant, sl - secant * l};
  } else if (l >= 0.0) {
    const double m = l + (u - l) / 2, d = sigmoid_derivative(slope, m);
    r = {secant, sl - secant * l, d, sigmoid(slope, m) - d * m};
  } else {
    const double kl = std::min(sigmoid_derivative(slope, l), secant);
    const double ku = std::min(sigmoid_derivative(slope, u), secant);
    r = {kl, sl - kl * l, ku, su - ku * u};
  }

  double worst_lower = 0.0, worst_upper = 0.0;
  for (int k = 0; k <= 16; ++k) {
    const double x = k == 16 ? u : l + (u - l) * (k / 16.0);
    const double f = sigmoid(slope, x);
    worst_lower = std::max(worst_lower, r.al * x + r.bl - f);
    worst_upper = std::max(worst_upper, f - (r.au * x + r.bu));
  }
  constexpr double rounding = 1e-12;
  if (worst_lower > rounding) {
    r.al = 0.0;
    r.bl = sl;
  } else {
    r.bl -= worst_lower + 4 * std::numeric_limits<double>::epsilon();
  }
  if (worst_upper > rounding) {
    r.au = 0.0;
    r.bu = su;
  } else {
    r.bu += worst_upper + 4 * std::numeric_limits<double>::epsilon();
  }
  return r;
}

struct BoundOptions {
  /// Tighten the operands of nonlinear nodes with backward linear bounds before
  /// relaxing them.
  bool refine_intermediate = true;
  ReluLowerRule relu_lower = ReluLowerRule::Adaptive;
};

/// Plane c_x * x + c_y * y + c0.
struct Plane {
  double cx = 0.0, cy = 0.0, c0 = 0.0;
  double at(double x, double y) const { return cx * x + cy * y + c0; }
};

/// McCormick envelope of x*y over [xl,xu] x [yl,yu]: two lower and two upper planes.
struct McCormick {
  Plane lower_a, lower_b, upper_a, upper_b;
};

inline McCormick mccormick(double xl, double xu, double yl, double yu) {
  return {Plane{yl, xl, -xl * yl}, Plane{yu, xu, -xu * yu}, Plane{yu, xl, -xl * yu},
          Plane{yl, xu, -xu * yl}};
}

namespace detail {

/// Coefficient accumulators for the lower and upper bound expressions of K targets.
struct Backsub {
  std::vector<Matrix> lo, up;
  std::vector<double> lo_off, up_off;

  Backsub(std::size_t nodes, std::size_t rows) : lo(nodes), up(nodes), lo_off(rows, 0.0), up_off(rows, 0.0) {}

  Matrix& at(std::vector<Matrix>& side, NodeId id, std::size_t width) {
    if (side[id].rows == 0) side[id] = Matrix(lo_off.size(), width);
    return side[id];
  }
};

/// Propagates coefficient matrices from `target` back to the graph input, relaxing each
/// nonlinearity with the current interval bounds. Returns the lower/upper coefficient
/// blocks on the input plus offsets.
inline Backsub backsubstitute(const ComputeGraph& g, const IntervalBounds& bounds, NodeId target,
                              const BoundOptions& opt) {
  const std::size_t rows = numel(g.node(target).shape);
  Backsub bs(g.size(), rows);
  {
    Matrix eye(rows, rows);
    for (std::size_t k = 0; k < rows; ++k) eye(k, k) = 1.0;
    bs.lo[target] = eye;
    bs.up[target] = std::move(eye);
  }

  for (std::size_t idx = target + 1; idx-- > 0;) {
    const Node& n = g.node(idx);
    if (bs.lo[idx].rows == 0) continue;
    if (n.kind == OpKind::Input) continue;

    for (int side = 0; side < 2; ++side) {
      auto& coeffs = side == 0 ? bs.lo : bs.up;
      auto& offset = side == 0 ? bs.lo_off : bs.up_off;
      const bool lower_side = side == 0;
      const Matrix& A = coeffs[idx];
      auto operand = [&](std::size_t k) -> Matrix& {
        return bs.at(coeffs, n.inputs[k], numel(g.node(n.inputs[k]).shape));
      };

      switch (n.kind) {
        case OpKind::Input: break;
        case OpKind::Const:
          for (std::size_t k = 0; k < rows; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < A.cols; ++j) acc += A(k, j) * n.value[j];
            offset[k] += acc;
          }
          break;
        case OpKind::Affine: {
          const std::size_t out = n.weight.shape()[0], in = n.weight.shape()[1];
          Matrix& X = operand(0);
          for (std::size_t k = 0; k < rows; ++k) {
            auto xr = X.row(k);
            for (std::size_t r = 0; r < out; ++r) {
              const double a = A(k, r);
              if (a == 0.0) continue;
              offset[k] += a * n.bias[r];
              const double* w = n.weight.storage().data() + r * in;
              for (std::size_t c = 0; c < in; ++c) xr[c] += a * w[c];
            }
          }
          break;
        }
        case OpKind::Conv2D: {
          const Shape& in_shape = g.node(n.inputs[0]).shape;
          Matrix& X = operand(0);
          auto geo = conv_geometry(n, in_shape);
          const std::size_t plane = geo.out_h * geo.out_w;
          for (std::size_t k = 0; k < rows; ++k) {
            conv_adjoint(n, in_shape, A.row(k), X.row(k));
            for (std::size_t o = 0; o < geo.out_ch; ++o)
              for (std::size_t p = 0; p < plane; ++p) offset[k] += A(k, o * plane + p) * n.bias[o];
          }
          break;
        }
        case OpKind::ReLU:
        case OpKind::Sigmoid: {
          const auto& l = bounds.lower[n.inputs[0]];
          const auto& u = bounds.upper[n.inputs[0]];
          std::vector<LineRelaxation> rel(A.cols);
          for (std::size_t j = 0; j < A.cols; ++j)
            rel[j] = n.kind == OpKind::ReLU ? relax_relu(l[j], u[j], opt.relu_lower) : relax_sigmoid(n.slope, l[j], u[j]);
          Matrix& X = operand(0);
          for (std::size_t k = 0; k < rows; ++k)
            for (std::size_t j = 0; j < A.cols; ++j) {
              const double a = A(k, j);
              if (a == 0.0) continue;
              const bool use_lower = (a >= 0.0) == lower_side;
              const double s = use_lower ? rel[j].al : rel[j].au;
              const double b = use_lower ? rel[j].bl : rel[j].bu;
              X(k, j) += a * s;
              offset[k] += a * b;
            }
          break;
        }
        case OpKind::Add:
        case OpKind::Sub: {
          const double sign = n.kind == OpKind::Add ? 1.0 : -1.0;
          {
            Matrix& X = operand(0);
            for (std::size_t i = 0; i < A.data.size(); ++i) X.data[i] += A.data[i];
          }
          Matrix& Y = operand(1);
          for (std::size_t i = 0; i < A.data.size(); ++i) Y.data[i] += sign * A.data[i];
          break;
        }
        case OpKind::Mul: {
          const auto& xl = bounds.lower[n.inputs[0]];
          const auto& xu = bounds.upper[n.inputs[0]];
          const auto& yl = bounds.lower[n.inputs[1]];
          const auto& yu = bounds.upper[n.inputs[1]];
          std::vector<McCormick> env(A.cols);
          for (std::size_t j = 0; j < A.cols; ++j) env[j] = mccormick(xl[j], xu[j], yl[j], yu[j]);
          // Both operands may be the same node; accumulate through the same reference.
          operand(0);
          operand(1);
          Matrix& X = coeffs[n.inputs[0]];
          Matrix& Y = coeffs[n.inputs[1]];
          for (std::size_t k = 0; k < rows; ++k)
            for (std::size_t j = 0; j < A.cols; ++j) {
              const double a = A(k, j);
              if (a == 0.0) continue;
              const bool use_lower = (a >= 0.0) == lower_side;
              const Plane& p = use_lower ? env[j].lower_a : env[j].upper_a;
              X(k, j) += a * p.cx;
              Y(k, j) += a * p.cy;
              offset[k] += a * p.c0;
            }
          break;
        }
        case OpKind::SumReduce: {
          Matrix& X = operand(0);
          for (std::size_t k = 0; k < rows; ++k)
            for (double& v : X.row(k)) v += A(k, 0);
          break;
        }
        case OpKind::Concat: {
          std::size_t off = 0;
          for (std::size_t t = 0; t < n.inputs.size(); ++t) {
            Matrix& X = operand(t);
            for (std::size_t k = 0; k < rows; ++k)
              for (std::size_t j = 0; j < X.cols; ++j) X(k, j) += A(k, off + j);
            off += X.cols;
          }
          break;
        }
        case OpKind::Slice: {
          Matrix& X = operand(0);
          for (std::size_t k = 0; k < rows; ++k)
            for (std::size_t j = 0; j < A.cols; ++j) X(k, n.begin + j) += A(k, j);
          break;
        }
      }
    }
    if (idx != target) {
      bs.lo[idx] = Matrix();
      bs.up[idx] = Matrix();
    }
  }
  return bs;
}

}  // namespace detail

/// Affine bounds of every element of `target` in terms of the graph input. `bounds`
/// must hold intervals for every node the target depends on.
inline std::vector<LinearBoundsEntry> backward_linear_bounds(const ComputeGraph& graph,
                                                             const IntervalBounds& bounds, NodeId target,
                                                             const BoundOptions& opt = {}) {
  auto bs = detail::backsubstitute(graph, bounds, target, opt);
  const NodeId in = graph.input_id();
  const std::size_t rows = numel(graph.node(target).shape);
  const std::size_t dims = numel(graph.node(in).shape);
  std::vector<LinearBoundsEntry> out(rows);
  for (std::size_t k = 0; k < rows; ++k) {
    auto& e = out[k];
    e.lower_offset = bs.lo_off[k];
    e.upper_offset = bs.up_off[k];
    if (target == in) {
      e.lower_coeff.assign(dims, 0.0);
      e.upper_coeff.assign(dims, 0.0);
      e.lower_coeff[k] = e.upper_coeff[k] = 1.0;
    } else if (bs.lo[in].rows) {
      auto lr = bs.lo[in].row(k);
      auto ur = bs.up[in].row(k);
      e.lower_coeff.assign(lr.begin(), lr.end());
      e.upper_coeff.assign(ur.begin(), ur.end());
    } else {
      e.lower_coeff.assign(dims, 0.0);
      e.upper_coeff.assign(dims, 0.0);
    }
  }
  return out;
}

/// Hoelder bound of an affine entry over a box: offset + c.center -/+ |c|.radius,
/// widened outward by an estimate of the accumulated rounding error.
inline Interval concretize(const LinearBoundsEntry& e, const Box& box) {
  auto side = [&](const std::vector<double>& c, double offset, double sign) {
    double acc = offset, mag = std::abs(offset);
    std::size_t terms = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (c[i] == 0.0) continue;
      ++terms;
      const double mid = box.lo[i] + (box.hi[i] - box.lo[i]) / 2;
      const double rad = std::max(box.hi[i] - mid, mid - box.lo[i]);
      const double term = c[i] * mid + sign * std::abs(c[i]) * rad;
      acc += term;
      mag += std::abs(c[i] * mid) + std::abs(c[i]) * rad;
    }
    const double slack =
        terms == 0 ? 0.0 : mag * std::numeric_limits<double>::epsilon() * static_cast<double>(terms + 2);
    return acc + sign * slack;
  };
  return {side(e.lower_coeff, e.lower_offset, -1.0), side(e.upper_coeff, e.upper_offset, 1.0)};
}

inline Interval concretize(const LinearBoundsEntry& e, const InputRegion& region) {
  return concretize(e, region.box());
}

namespace detail {

inline bool refinable(OpKind k) {
  return k == OpKind::Affine || k == OpKind::Conv2D || k == OpKind::Add || k == OpKind::Sub ||
         k == OpKind::Mul || k == OpKind::SumReduce;
}

inline std::vector<bool> feeds_nonlinearity(const ComputeGraph& g) {
  std::vector<bool> f(g.size(), false);
  for (const Node& n : g.nodes())
    if (n.kind == OpKind::ReLU || n.kind == OpKind::Sigmoid || n.kind == OpKind::Mul)
      for (NodeId i : n.inputs) f[i] = true;
  return f;
}

}  // namespace detail

/// Per-node intervals: IBP, optionally intersected with concretized backward bounds for
/// every node that feeds a ReLU, Sigmoid or product.
inline IntervalBounds compute_bounds(const ComputeGraph& graph, const Box& box, const BoundOptions& opt = {}) {
  if (box.dims() != numel(graph.input_shape())) throw std::invalid_argument("box dimension mismatch");
  IntervalBounds b;
  b.lower.resize(graph.size());
  b.upper.resize(graph.size());
  const auto feeds = detail::feeds_nonlinearity(graph);
  for (const Node& n : graph.nodes()) {
    detail::ibp_node(graph, n, box, b);
    detail::widen(b, n.id);
    if (!opt.refine_intermediate || !feeds[n.id] || !detail::refinable(n.kind)) continue;
    bool degenerate = true;
    for (std::size_t i = 0; i < b.lower[n.id].size() && degenerate; ++i)
      degenerate = b.upper[n.id][i] - b.lower[n.id][i] <= 4 * std::numeric_limits<double>::epsilon() *
                                                               std::max(1.0, std::abs(b.upper[n.id][i]));
    if (degenerate) continue;
    auto lin = backward_linear_bounds(graph, b, n.id, opt);
    for (std::size_t i = 0; i < lin.size(); ++i) {
      auto iv = concretize(lin[i], box);
      double lo = std::max(b.lower[n.id][i], iv.lo);
      double hi = std::min(b.upper[n.id][i], iv.hi);
      if (lo > hi) std::swap(lo, hi);
      b.lower[n.id][i] = lo;
      b.upper[n.id][i] = hi;
    }
  }
  return b;
}

inline IntervalBounds compute_bounds(const ComputeGraph& graph, const InputRegion& region,
                                     const BoundOptions& opt = {}) {
  return compute_bounds(graph, region.box(), opt);
}

/// Best available interval for each element of `target`: IBP intersected with the
/// concretized backward bounds.
inline std::vector<Interval> bound_node(const ComputeGraph& graph, const IntervalBounds& bounds,
                                        const Box& box, NodeId target, const BoundOptions& opt = {}) {
  auto lin = backward_linear_bounds(graph, bounds, target, opt);
  std::vector<Interval> out(lin.size());
  for (std::size_t i = 0; i < lin.size(); ++i) {
    auto iv = concretize(lin[i], box);
    out[i] = {std::max(iv.lo, bounds.lower[target][i]), std::min(iv.hi, bounds.upper[target][i])};
    if (out[i].lo > out[i].hi) std::swap(out[i].lo, out[i].hi);
  }
  return out;
}

}  // namespace odv
