#pragma once

// Seeded random graph generator shared by the property tests.

#include <random>

#include "odv/graph.hpp"

namespace odv::testing {

struct RandomGraphOptions {
  int max_depth = 4;
  std::size_t max_width = 16;
  bool allow_sigmoid = true;
  bool allow_mul = true;
  bool allow_conv = true;
  bool allow_misc = true;  // Add/Sub/Slice/Concat
  std::size_t outputs = 2;
};

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = u(rng);
  return t;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline bool coin(std::mt19937_64& rng, double p) { return std::bernoulli_distribution(p)(rng); }

inline NodeId random_affine(ComputeGraph& g, std::mt19937_64& rng, NodeId x, std::size_t out) {
  const std::size_t in = numel(g.node(x).shape);
  const double scale = 1.5 / std::sqrt(static_cast<double>(in));
  return g.add_affine(x, random_tensor(rng, {out, in}, scale), random_tensor(rng, {out}, 0.5));
}

/// Builds a random DAG with a vector output "out" and a scalar output "y".
inline ComputeGraph random_graph(std::mt19937_64& rng, const RandomGraphOptions& opt = {}) {
  ComputeGraph g;
  NodeId h;
  if (opt.allow_conv && coin(rng, 0.3)) {
    const std::size_t ch = pick(rng, 1, 2), side = pick(rng, 3, 5);
    h = g.add_input({ch, side, side});
    const std::size_t oc = pick(rng, 1, 3);
    h = g.add_conv2d(h, random_tensor(rng, {oc, ch, 2, 2}, 0.8), random_tensor(rng, {oc}, 0.3),
                     pick(rng, 1, 2), pick(rng, 0, 1));
    h = g.add_relu(h);
  } else {
    h = g.add_input({pick(rng, 2, 6)});
  }

  const int depth = static_cast<int>(pick(rng, 1, static_cast<std::size_t>(opt.max_depth)));
  for (int layer = 0; layer < depth; ++layer) {
    const std::size_t width = pick(rng, 2, opt.max_width);
    NodeId a = random_affine(g, rng, h, width);
    if (opt.allow_mul && coin(rng, 0.3)) {
      NodeId b = random_affine(g, rng, h, width);
      a = g.add_mul(a, b);
    }
    if (opt.allow_misc && coin(rng, 0.25)) {
      NodeId b = random_affine(g, rng, h, width);
      a = coin(rng, 0.5) ? g.add_add(a, b) : g.add_sub(a, b);
    }
    if (opt.allow_sigmoid && coin(rng, 0.3)) {
      std::uniform_real_distribution<double> slope(0.5, 3.0);
      h = g.add_sigmoid(a, slope(rng));
    } else {
      h = g.add_relu(a);
    }
    if (opt.allow_misc && width >= 3 && coin(rng, 0.2)) {
      const std::size_t cut = pick(rng, 1, width - 1);
      NodeId lo = g.add_slice(h, 0, cut);
      NodeId hi = g.add_slice(h, cut, width);
      h = g.add_concat({hi, lo});
    }
  }
  NodeId out = random_affine(g, rng, h, opt.outputs);
  g.set_output("out", out);
  NodeId y = opt.allow_misc && coin(rng, 0.5) ? g.add_sum(out) : random_affine(g, rng, out, 1);
  g.set_output("y", y);
  return g;
}

}  // namespace odv::testing
