#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "odv/graph.hpp"
#include "odv/tensor.hpp"

namespace odv {

/// Raised when an evaluation produces a NaN or infinity.
class EvaluationError : public std::runtime_error {
 public:
  EvaluationError(NodeId node, const std::string& what)
      : std::runtime_error("node " + std::to_string(node) + ": " + what), node_(node) {}
  NodeId node() const noexcept { return node_; }

 private:
  NodeId node_;
};

inline double sigmoid(double slope, double x) {
  double z = slope * x;
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

inline double sigmoid_derivative(double slope, double x) {
  double s = sigmoid(slope, x);
  return slope * s * (1.0 - s);
}

namespace detail {

inline void affine_forward(const Node& n, std::span<const double> x, std::span<double> y) {
  const std::size_t out = n.weight.shape()[0], in = n.weight.shape()[1];
  const double* w = n.weight.storage().data();
  for (std::size_t r = 0; r < out; ++r) {
    double acc = n.bias[r];
    const double* wr = w + r * in;
    for (std::size_t c = 0; c < in; ++c) acc += wr[c] * x[c];
    y[r] = acc;
  }
}

struct ConvGeometry {
  std::size_t out_ch, in_ch, kh, kw, in_h, in_w, out_h, out_w, stride, pad;
};

inline ConvGeometry conv_geometry(const Node& n, const Shape& in_shape) {
  const auto& k = n.weight.shape();
  ConvGeometry g{k[0], k[1], k[2], k[3], in_shape[1], in_shape[2], n.shape[1], n.shape[2], n.stride,
                 n.padding};
  return g;
}

/// Visits every (output index, input index, kernel index) triple of a convolution.
template <typename F>
void for_each_conv_tap(const ConvGeometry& g, F&& f) {
  for (std::size_t o = 0; o < g.out_ch; ++o)
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const std::size_t out_idx = (o * g.out_h + oy) * g.out_w + ox;
        for (std::size_t c = 0; c < g.in_ch; ++c)
          for (std::size_t ky = 0; ky < g.kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
              const std::size_t in_idx = (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                                         static_cast<std::size_t>(ix);
              const std::size_t k_idx = ((o * g.in_ch + c) * g.kh + ky) * g.kw + kx;
              f(out_idx, in_idx, k_idx);
            }
          }
      }
}

inline void conv_forward(const Node& n, const Shape& in_shape, std::span<const double> x,
                         std::span<double> y) {
  auto g = conv_geometry(n, in_shape);
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t o = 0; o < g.out_ch; ++o)
    for (std::size_t p = 0; p < plane; ++p) y[o * plane + p] = n.bias[o];
  const double* k = n.weight.storage().data();
  for_each_conv_tap(g, [&](std::size_t oi, std::size_t ii, std::size_t ki) { y[oi] += k[ki] * x[ii]; });
}

/// Adds W^T g (the input-side adjoint of a convolution) to `gx`.
inline void conv_adjoint(const Node& n, const Shape& in_shape, std::span<const double> gy,
                         std::span<double> gx) {
  auto g = conv_geometry(n, in_shape);
  const double* k = n.weight.storage().data();
  for_each_conv_tap(g, [&](std::size_t oi, std::size_t ii, std::size_t ki) { gx[ii] += k[ki] * gy[oi]; });
}

}  // namespace detail

/// Values of every node for one input, indexed by node id.
using Activations = std::vector<Tensor>;

/// Evaluates every node in order. The input shape is checked before any arithmetic.
inline Activations evaluate(const ComputeGraph& graph, const Tensor& input) {
  const NodeId in_id = graph.input_id();
  // A flat tensor with the right element count is accepted as a reshaped view.
  const Shape& declared = graph.node(in_id).shape;
  const bool flat_ok = input.shape().size() == 1 && input.size() == numel(declared);
  if (input.shape() != declared && !flat_ok)
    throw std::invalid_argument("input shape " + shape_string(input.shape()) + " does not match declared " +
                                shape_string(declared));

  Activations vals(graph.size());
  for (const Node& n : graph.nodes()) {
    Tensor out(n.shape);
    auto y = out.values();
    auto operand = [&](std::size_t i) -> const Tensor& { return vals[n.inputs[i]]; };
    switch (n.kind) {
      case OpKind::Input:
        out = Tensor(n.shape, input.storage());
        break;
      case OpKind::Const:
        out = n.value;
        break;
      case OpKind::Affine:
        detail::affine_forward(n, operand(0).values(), y);
        break;
      case OpKind::Conv2D:
        detail::conv_forward(n, graph.node(n.inputs[0]).shape, operand(0).values(), y);
        break;
      case OpKind::ReLU: {
        auto x = operand(0).values();
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
        break;
      }
      case OpKind::Sigmoid: {
        auto x = operand(0).values();
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = sigmoid(n.slope, x[i]);
        break;
      }
      case OpKind::Add:
      case OpKind::Sub:
      case OpKind::Mul: {
        auto a = operand(0).values();
        auto b = operand(1).values();
        for (std::size_t i = 0; i < y.size(); ++i)
          y[i] = n.kind == OpKind::Add ? a[i] + b[i] : n.kind == OpKind::Sub ? a[i] - b[i] : a[i] * b[i];
        break;
      }
      case OpKind::SumReduce: {
        double acc = 0.0;
        for (double v : operand(0).values()) acc += v;
        y[0] = acc;
        break;
      }
      case OpKind::Concat: {
        std::size_t off = 0;
        for (std::size_t i = 0; i < n.inputs.size(); ++i)
          for (double v : operand(i).values()) y[off++] = v;
        break;
      }
      case OpKind::Slice: {
        auto x = operand(0).values();
        for (std::size_t i = n.begin; i < n.end; ++i) y[i - n.begin] = x[i];
        break;
      }
    }
    if (!out.all_finite()) throw EvaluationError(n.id, "non-finite value produced");
    vals[n.id] = std::move(out);
  }
  return vals;
}

/// Evaluates the graph and returns its named outputs.
inline std::map<std::string, Tensor> forward(const ComputeGraph& graph, const Tensor& input) {
  auto vals = evaluate(graph, input);
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : graph.outputs()) out.emplace(name, vals[id]);
  return out;
}

/// Gradients of a weighted sum of node values with respect to the graph input and,
/// optionally, every Affine/Conv2D parameter.
struct Gradients {
  Tensor input;
  std::vector<Tensor> weight;  // indexed by node id; empty for parameterless nodes
  std::vector<Tensor> bias;
};

/// Reverse-mode accumulation. `seeds` pairs node ids with the adjoint of that node.
/// ReLU uses subgradient 0 at the kink.
inline Gradients backward(const ComputeGraph& graph, const Activations& vals,
                          const std::vector<std::pair<NodeId, Tensor>>& seeds, bool with_params = false) {
  std::vector<Tensor> adj(graph.size());
  auto touch = [&](NodeId id) -> Tensor& {
    if (adj[id].empty()) adj[id] = Tensor(graph.node(id).shape);
    return adj[id];
  };
  for (const auto& [id, seed] : seeds) {
    if (seed.size() != numel(graph.node(id).shape))
      throw std::invalid_argument("seed size does not match node " + std::to_string(id));
    auto& a = touch(id);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += seed[i];
  }

  Gradients grads;
  if (with_params) {
    grads.weight.resize(graph.size());
    grads.bias.resize(graph.size());
  }

  for (std::size_t idx = graph.size(); idx-- > 0;) {
    const Node& n = graph.node(idx);
    if (adj[idx].empty()) continue;
    auto gy = adj[idx].values();
    switch (n.kind) {
      case OpKind::Input:
      case OpKind::Const:
        break;
      case OpKind::Affine: {
        const std::size_t out = n.weight.shape()[0], in = n.weight.shape()[1];
        auto gx = touch(n.inputs[0]).values();
        const double* w = n.weight.storage().data();
        for (std::size_t r = 0; r < out; ++r) {
          if (gy[r] == 0.0) continue;
          for (std::size_t c = 0; c < in; ++c) gx[c] += w[r * in + c] * gy[r];
        }
        if (with_params) {
          Tensor gw(n.weight.shape());
          auto x = vals[n.inputs[0]].values();
          for (std::size_t r = 0; r < out; ++r)
            for (std::size_t c = 0; c < in; ++c) gw[r * in + c] = gy[r] * x[c];
          grads.weight[idx] = std::move(gw);
          grads.bias[idx] = adj[idx];
        }
        break;
      }
      case OpKind::Conv2D: {
        const Shape& in_shape = graph.node(n.inputs[0]).shape;
        detail::conv_adjoint(n, in_shape, gy, touch(n.inputs[0]).values());
        if (with_params) {
          Tensor gw(n.weight.shape());
          Tensor gb(n.bias.shape());
          auto x = vals[n.inputs[0]].values();
          auto g = detail::conv_geometry(n, in_shape);
          detail::for_each_conv_tap(g, [&](std::size_t oi, std::size_t ii, std::size_t ki) {
            gw[ki] += gy[oi] * x[ii];
          });
          const std::size_t plane = g.out_h * g.out_w;
          for (std::size_t o = 0; o < g.out_ch; ++o)
            for (std::size_t p = 0; p < plane; ++p) gb[o] += gy[o * plane + p];
          grads.weight[idx] = std::move(gw);
          grads.bias[idx] = std::move(gb);
        }
        break;
      }
      case OpKind::ReLU: {
        auto x = vals[n.inputs[0]].values();
        auto gx = touch(n.inputs[0]).values();
        for (std::size_t i = 0; i < gy.size(); ++i)
          if (x[i] > 0.0) gx[i] += gy[i];
        break;
      }
      case OpKind::Sigmoid: {
        auto s = vals[idx].values();
        auto gx = touch(n.inputs[0]).values();
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * n.slope * s[i] * (1.0 - s[i]);
        break;
      }
      case OpKind::Add:
      case OpKind::Sub: {
        const double sign = n.kind == OpKind::Add ? 1.0 : -1.0;
        {
          auto ga = touch(n.inputs[0]).values();
          for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
        }
        auto gb = touch(n.inputs[1]).values();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += sign * gy[i];
        break;
      }
      case OpKind::Mul: {
        auto a = vals[n.inputs[0]].values();
        auto b = vals[n.inputs[1]].values();
        {
          auto ga = touch(n.inputs[0]).values();
          for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * b[i];
        }
        auto gb = touch(n.inputs[1]).values();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * a[i];
        break;
      }
      case OpKind::SumReduce: {
        auto gx = touch(n.inputs[0]).values();
        for (double& v : gx) v += gy[0];
        break;
      }
      case OpKind::Concat: {
        std::size_t off = 0;
        for (NodeId in : n.inputs) {
          auto gx = touch(in).values();
          for (double& v : gx) v += gy[off++];
        }
        break;
      }
      case OpKind::Slice: {
        auto gx = touch(n.inputs[0]).values();
        for (std::size_t i = n.begin; i < n.end; ++i) gx[i] += gy[i - n.begin];
        break;
      }
    }
  }
  const NodeId in_id = graph.input_id();
  grads.input = adj[in_id].empty() ? Tensor(graph.node(in_id).shape) : std::move(adj[in_id]);
  return grads;
}

/// d(scalar_output)/d(input) by reverse-mode accumulation.
inline Tensor gradient(const ComputeGraph& graph, NodeId scalar_output, const Tensor& input) {
  if (scalar_output >= graph.size()) throw std::out_of_range("unknown output node");
  if (numel(graph.node(scalar_output).shape) != 1)
    throw std::invalid_argument("gradient requires a scalar output, node " + std::to_string(scalar_output) +
                                " has shape " + shape_string(graph.node(scalar_output).shape));
  auto vals = evaluate(graph, input);
  return backward(graph, vals, {{scalar_output, Tensor::scalar(1.0)}}).input;
}

}  // namespace odv
