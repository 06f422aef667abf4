#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "odv/tensor.hpp"

namespace odv {

using NodeId = std::size_t;

enum class OpKind : std::uint8_t {
  Input,
  Const,
  Affine,
  Conv2D,
  ReLU,
  Sigmoid,
  Add,
  Sub,
  Mul,
  SumReduce,
  Concat,
  Slice,
};

inline std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "Input";
    case OpKind::Const: return "Const";
    case OpKind::Affine: return "Affine";
    case OpKind::Conv2D: return "Conv2D";
    case OpKind::ReLU: return "ReLU";
    case OpKind::Sigmoid: return "Sigmoid";
    case OpKind::Add: return "Add";
    case OpKind::Sub: return "Sub";
    case OpKind::Mul: return "Mul";
    case OpKind::SumReduce: return "SumReduce";
    case OpKind::Concat: return "Concat";
    case OpKind::Slice: return "Slice";
  }
  return "?";
}

inline std::optional<OpKind> op_kind_from_string(std::string_view s) {
  for (int k = 0; k <= static_cast<int>(OpKind::Slice); ++k) {
    auto kind = static_cast<OpKind>(k);
    if (to_string(kind) == s) return kind;
  }
  return std::nullopt;
}

inline bool is_elementwise_unary(OpKind k) { return k == OpKind::ReLU || k == OpKind::Sigmoid; }
inline bool is_elementwise_binary(OpKind k) {
  return k == OpKind::Add || k == OpKind::Sub || k == OpKind::Mul;
}

/// One graph node. Parameter fields are only meaningful for the kinds that use them:
///   Const   - value
///   Affine  - weight [out, in] applied to the flattened input, bias [out]
///   Conv2D  - weight [O, C, kh, kw] over input [C, H, W], bias [O], stride, padding
///   Sigmoid - slope, computing 1 / (1 + exp(-slope * x))
///   Slice   - flat range [begin, end)
struct Node {
  NodeId id = 0;
  OpKind kind = OpKind::Input;
  std::vector<NodeId> inputs;
  Shape shape;

  Tensor value;
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
  double slope = 1.0;
  std::size_t begin = 0;
  std::size_t end = 0;
};

inline std::size_t expected_arity(OpKind kind) {
  switch (kind) {
    case OpKind::Input:
    case OpKind::Const: return 0;
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: return 2;
    case OpKind::Concat: return SIZE_MAX;
    default: return 1;
  }
}

/// Computes the output shape of `node` from its producers' shapes. Returns an error
/// message instead of a shape when the parameters or operands are inconsistent.
inline std::variant<Shape, std::string> infer_shape(const Node& node,
                                                    const std::vector<const Shape*>& in) {
  auto fail = [&](const std::string& what) -> std::variant<Shape, std::string> {
    return "node " + std::to_string(node.id) + " (" + std::string(to_string(node.kind)) + "): " + what;
  };
  switch (node.kind) {
    case OpKind::Input:
      if (node.shape.empty() || numel(node.shape) == 0) return fail("input declares an empty shape");
      return node.shape;
    case OpKind::Const:
      if (node.value.empty()) return fail("constant has no value");
      return node.value.shape();
    case OpKind::Affine: {
      const auto& w = node.weight.shape();
      if (w.size() != 2) return fail("weight must be 2-D, got " + shape_string(w));
      if (w[1] != numel(*in[0]))
        return fail("weight " + shape_string(w) + " does not accept input " + shape_string(*in[0]));
      if (node.bias.shape() != Shape{w[0]})
        return fail("bias " + shape_string(node.bias.shape()) + " does not match weight rows " +
                    std::to_string(w[0]));
      return Shape{w[0]};
    }
    case OpKind::Conv2D: {
      const auto& k = node.weight.shape();
      const auto& x = *in[0];
      if (k.size() != 4) return fail("kernel must be 4-D, got " + shape_string(k));
      if (x.size() != 3) return fail("input must be [C,H,W], got " + shape_string(x));
      if (k[1] != x[0]) return fail("kernel channels " + std::to_string(k[1]) + " != input channels " +
                                    std::to_string(x[0]));
      if (node.stride == 0) return fail("stride must be positive");
      if (node.bias.shape() != Shape{k[0]}) return fail("bias does not match output channels");
      std::size_t ph = x[1] + 2 * node.padding, pw = x[2] + 2 * node.padding;
      if (ph < k[2] || pw < k[3]) return fail("kernel larger than padded input");
      return Shape{k[0], (ph - k[2]) / node.stride + 1, (pw - k[3]) / node.stride + 1};
    }
    case OpKind::ReLU: return *in[0];
    case OpKind::Sigmoid:
      if (!(node.slope > 0.0) || !std::isfinite(node.slope)) return fail("sigmoid slope must be positive");
      return *in[0];
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul:
      if (*in[0] != *in[1])
        return fail("shape mismatch " + shape_string(*in[0]) + " vs " + shape_string(*in[1]));
      return *in[0];
    case OpKind::SumReduce: return Shape{1};
    case OpKind::Concat: {
      if (in.empty()) return fail("concat needs at least one operand");
      std::size_t total = 0;
      for (const auto* s : in) total += numel(*s);
      return Shape{total};
    }
    case OpKind::Slice:
      if (node.begin >= node.end || node.end > numel(*in[0]))
        return fail("slice [" + std::to_string(node.begin) + "," + std::to_string(node.end) +
                    ") outside producer of size " + std::to_string(numel(*in[0])));
      return Shape{node.end - node.begin};
  }
  return fail("unknown kind");
}

/// Directed acyclic graph of numeric nodes, stored in topological order.
class ComputeGraph {
 public:
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<NodeId>& inputs() const noexcept { return inputs_; }
  const std::vector<std::pair<std::string, NodeId>>& outputs() const noexcept { return outputs_; }

  NodeId input_id() const {
    if (inputs_.size() != 1) throw std::logic_error("graph must declare exactly one input");
    return inputs_.front();
  }

  const Shape& input_shape() const { return nodes_.at(input_id()).shape; }

  NodeId output(std::string_view name) const {
    for (const auto& [n, id] : outputs_)
      if (n == name) return id;
    throw std::out_of_range("graph has no output named '" + std::string(name) + "'");
  }

  bool has_output(std::string_view name) const {
    return std::any_of(outputs_.begin(), outputs_.end(), [&](const auto& o) { return o.first == name; });
  }

  void set_output(std::string name, NodeId id) {
    if (id >= nodes_.size()) throw std::out_of_range("output references unknown node " + std::to_string(id));
    for (auto& o : outputs_) {
      if (o.first == name) {
        o.second = id;
        return;
      }
    }
    outputs_.emplace_back(std::move(name), id);
  }

  /// Appends a node verbatim. The caller is responsible for running validate().
  NodeId push_unchecked(Node node) {
    node.id = nodes_.size();
    if (node.kind == OpKind::Input) inputs_.push_back(node.id);
    nodes_.push_back(std::move(node));
    return nodes_.back().id;
  }

  void set_inputs_unchecked(std::vector<NodeId> ids) { inputs_ = std::move(ids); }

  NodeId add_input(Shape shape) {
    Node n;
    n.kind = OpKind::Input;
    n.shape = std::move(shape);
    return append(std::move(n));
  }

  NodeId add_const(Tensor value) {
    Node n;
    n.kind = OpKind::Const;
    n.value = std::move(value);
    return append(std::move(n));
  }

  NodeId add_scalar(double v) { return add_const(Tensor::scalar(v)); }

  NodeId add_affine(NodeId x, Tensor weight, Tensor bias) {
    Node n;
    n.kind = OpKind::Affine;
    n.inputs = {x};
    n.weight = std::move(weight);
    n.bias = std::move(bias);
    return append(std::move(n));
  }

  NodeId add_conv2d(NodeId x, Tensor kernel, Tensor bias, std::size_t stride, std::size_t padding) {
    Node n;
    n.kind = OpKind::Conv2D;
    n.inputs = {x};
    n.weight = std::move(kernel);
    n.bias = std::move(bias);
    n.stride = stride;
    n.padding = padding;
    return append(std::move(n));
  }

  NodeId add_relu(NodeId x) { return append_op(OpKind::ReLU, {x}); }

  NodeId add_sigmoid(NodeId x, double slope) {
    Node n;
    n.kind = OpKind::Sigmoid;
    n.inputs = {x};
    n.slope = slope;
    return append(std::move(n));
  }

  NodeId add_add(NodeId a, NodeId b) { return append_op(OpKind::Add, {a, b}); }
  NodeId add_sub(NodeId a, NodeId b) { return append_op(OpKind::Sub, {a, b}); }
  NodeId add_mul(NodeId a, NodeId b) { return append_op(OpKind::Mul, {a, b}); }
  NodeId add_sum(NodeId x) { return append_op(OpKind::SumReduce, {x}); }
  NodeId add_concat(std::vector<NodeId> xs) { return append_op(OpKind::Concat, std::move(xs)); }

  NodeId add_slice(NodeId x, std::size_t begin, std::size_t end) {
    Node n;
    n.kind = OpKind::Slice;
    n.inputs = {x};
    n.begin = begin;
    n.end = end;
    return append(std::move(n));
  }

  /// Scalar a * x + b as a 1x1 affine node.
  NodeId add_scale(NodeId x, double a, double b = 0.0) {
    return add_affine(x, Tensor(Shape{1, 1}, {a}), Tensor::scalar(b));
  }

  /// Mutable access for trainers that update parameters in place.
  Node& mutable_node(NodeId id) { return nodes_.at(id); }

 private:
  NodeId append_op(OpKind kind, std::vector<NodeId> inputs) {
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    return append(std::move(n));
  }

  NodeId append(Node n) {
    n.id = nodes_.size();
    if (expected_arity(n.kind) != SIZE_MAX && n.inputs.size() != expected_arity(n.kind))
      throw std::invalid_argument(std::string(to_string(n.kind)) + " expects " +
                                  std::to_string(expected_arity(n.kind)) + " operands");
    std::vector<const Shape*> in;
    for (NodeId i : n.inputs) {
      if (i >= nodes_.size()) throw std::invalid_argument("operand " + std::to_string(i) + " does not exist");
      in.push_back(&nodes_[i].shape);
    }
    auto shape = infer_shape(n, in);
    if (auto* err = std::get_if<std::string>(&shape)) throw std::invalid_argument(*err);
    n.shape = std::get<Shape>(std::move(shape));
    return push_unchecked(std::move(n));
  }

  std::vector<Node> nodes_;
  std::vector<NodeId> inputs_;
  std::vector<std::pair<std::string, NodeId>> outputs_;
};

/// Checks every structural and shape invariant. Returns an empty list iff the graph
/// is well formed. Node shapes are recomputed, not trusted.
inline std::vector<std::string> validate(const ComputeGraph& graph) {
  std::vector<std::string> diags;
  const auto& nodes = graph.nodes();
  const std::size_t count = nodes.size();
  bool structural_ok = true;

  for (std::size_t k = 0; k < count; ++k) {
    const Node& n = nodes[k];
    if (n.id != k) {
      diags.push_back("node at position " + std::to_string(k) + " has id " + std::to_string(n.id));
      structural_ok = false;
    }
    std::size_t arity = expected_arity(n.kind);
    if ((arity == SIZE_MAX && n.inputs.empty()) || (arity != SIZE_MAX && n.inputs.size() != arity)) {
      diags.push_back("node " + std::to_string(k) + " (" + std::string(to_string(n.kind)) +
                      ") has wrong operand count " + std::to_string(n.inputs.size()));
      structural_ok = false;
    }
    for (NodeId i : n.inputs) {
      if (i >= count) {
        diags.push_back("dangling reference: node " + std::to_string(k) + " uses missing node " +
                        std::to_string(i));
        structural_ok = false;
      }
    }
  }

  // Cycle detection over the edges that point at existing nodes.
  std::vector<int> state(count, 0);
  std::vector<std::size_t> cycle_nodes;
  for (std::size_t root = 0; root < count; ++root) {
    if (state[root]) continue;
    std::vector<std::pair<std::size_t, std::size_t>> stack{{root, 0}};
    state[root] = 1;
    while (!stack.empty()) {
      auto& [v, next] = stack.back();
      const auto& ins = nodes[v].inputs;
      if (next < ins.size()) {
        std::size_t u = ins[next++];
        if (u >= count) continue;
        if (state[u] == 1) {
          if (std::find(cycle_nodes.begin(), cycle_nodes.end(), u) == cycle_nodes.end())
            cycle_nodes.push_back(u);
        } else if (state[u] == 0) {
          state[u] = 1;
          stack.emplace_back(u, 0);
        }
      } else {
        state[v] = 2;
        stack.pop_back();
      }
    }
  }
  std::sort(cycle_nodes.begin(), cycle_nodes.end());
  for (std::size_t k : cycle_nodes) diags.push_back("cycle at node " + std::to_string(k));
  if (!cycle_nodes.empty()) structural_ok = false;

  if (structural_ok) {
    for (std::size_t k = 0; k < count; ++k) {
      for (NodeId i : nodes[k].inputs) {
        if (i >= k) {
          diags.push_back("node " + std::to_string(k) + " references later node " + std::to_string(i));
          structural_ok = false;
        }
      }
    }
  }

  for (NodeId i : graph.inputs()) {
    if (i >= count || nodes[i].kind != OpKind::Input)
      diags.push_back("declared input " + std::to_string(i) + " is not an Input node");
  }
  for (std::size_t k = 0; k < count; ++k) {
    if (nodes[k].kind == OpKind::Input &&
        std::find(graph.inputs().begin(), graph.inputs().end(), k) == graph.inputs().end())
      diags.push_back("Input node " + std::to_string(k) + " is not declared as a graph input");
  }
  for (const auto& [name, id] : graph.outputs()) {
    if (id >= count) diags.push_back("output '" + name + "' references missing node " + std::to_string(id));
  }

  if (!structural_ok) return diags;

  std::vector<Shape> shapes(count);
  std::vector<bool> known(count, false);
  for (std::size_t k = 0; k < count; ++k) {
    const Node& n = nodes[k];
    std::vector<const Shape*> in;
    bool ready = true;
    for (NodeId i : n.inputs) {
      if (!known[i]) ready = false;
      in.push_back(&shapes[i]);
    }
    if (!ready) continue;
    auto shape = infer_shape(n, in);
    if (auto* err = std::get_if<std::string>(&shape)) {
      diags.push_back(*err);
      continue;
    }
    shapes[k] = std::get<Shape>(std::move(shape));
    known[k] = true;
    if (n.kind != OpKind::Input && n.shape != shapes[k])
      diags.push_back("node " + std::to_string(k) + " records shape " + shape_string(n.shape) +
                      " but computes " + shape_string(shapes[k]));
  }
  return diags;
}

}  // namespace odv
