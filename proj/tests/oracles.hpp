#pragma once

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "odv/encoder.hpp"
#include "random_graphs.hpp"

namespace odv::testing {

struct GridResult {
  double min_margin = std::numeric_limits<double>::infinity();
  std::vector<double> argmin;
  std::size_t points = 0;
};

/// Exhaustive evaluation on a regular grid over the perturbed coordinates of the
/// query box, endpoints included.
inline GridResult grid_min_margin(const VerificationQuery& q, std::size_t per_dim) {
  const Box box = q.region.box();
  std::vector<std::size_t> free;
  for (std::size_t i = 0; i < box.dims(); ++i)
    if (box.hi[i] > box.lo[i]) free.push_back(i);
  const auto ids = q.margin_nodes();
  GridResult res;
  std::vector<double> x = box.lo;
  std::vector<std::size_t> idx(free.size(), 0);
  const std::size_t n = free.empty() ? 1 : per_dim;
  auto coord = [&](std::size_t d, std::size_t k) {
    const std::size_t i = free[d];
    return k + 1 == n ? box.hi[i] : box.lo[i] + (box.hi[i] - box.lo[i]) * static_cast<double>(k) / static_cast<double>(n - 1);
  };
  while (true) {
    for (std::size_t d = 0; d < free.size(); ++d) x[free[d]] = coord(d, idx[d]);
    auto vals = evaluate(q.graph, Tensor(q.graph.input_shape(), x));
    ++res.points;
    for (NodeId id : ids)
      if (vals[id].item() < res.min_margin) {
        res.min_margin = vals[id].item();
        res.argmin = x;
      }
    std::size_t d = 0;
    while (d < free.size() && ++idx[d] == n) idx[d++] = 0;
    if (d == free.size()) break;
  }
  return res;
}

/// Points per free coordinate so the grid has about `total` points.
inline std::size_t per_dim_for(const VerificationQuery& q, double total) {
  std::size_t free = 0;
  for (double r : q.region.radius) free += r > 0.0;
  if (free == 0) return 1;
  return static_cast<std::size_t>(std::floor(std::pow(total, 1.0 / static_cast<double>(free)) + 1e-9));
}

/// Small ReLU network on `inputs` values with `perturbed` of them free; a single
/// margin output whose value at the centre is shifted to `centre_margin`.
inline VerificationQuery random_low_dim_query(std::mt19937_64& rng, std::size_t inputs, std::size_t perturbed,
                                              double epsilon, double centre_margin) {
  ComputeGraph g;
  NodeId x = g.add_input({inputs});
  const std::size_t h1 = 6 + pick(rng, 0, 4), h2 = 4 + pick(rng, 0, 4);
  NodeId a = g.add_relu(g.add_affine(x, random_tensor(rng, {h1, inputs}, 1.0), random_tensor(rng, {h1}, 0.5)));
  NodeId b = g.add_relu(g.add_affine(a, random_tensor(rng, {h2, h1}, 1.0), random_tensor(rng, {h2}, 0.5)));
  NodeId out = g.add_affine(b, random_tensor(rng, {1, h2}, 1.0), Tensor({1}));
  g.set_output("m", out);

  std::vector<double> c(inputs);
  std::uniform_real_distribution<double> u(0.3, 0.7);
  for (double& v : c) v = u(rng);
  Tensor centre({inputs}, c);
  const double shift = centre_margin - evaluate(g, centre)[out].item();
  g.mutable_node(out).bias[0] = shift;

  std::vector<std::size_t> pixels;
  std::vector<std::size_t> order(inputs);
  for (std::size_t i = 0; i < inputs; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  pixels.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(perturbed));
  std::sort(pixels.begin(), pixels.end());

  VerificationQuery q;
  q.graph = std::move(g);
  q.region = InputRegion::linf(centre, epsilon, true, pixels);
  q.margins = {"m"};
  q.timeout_seconds = 60;
  return q;
}

/// Rescales the free coordinates; `q` must have been built with radius 1 on them.
inline VerificationQuery with_epsilon(VerificationQuery q, double epsilon) {
  for (double& r : q.region.radius)
    if (r > 0.0) r = epsilon;
  return q;
}

/// Smallest radius at which the coarse grid finds a violation, by bisection on
/// [0, hi]; returns hi when none is found there.
inline double grid_transition(const VerificationQuery& q, double hi, std::size_t per_dim, int iters = 30) {
  if (grid_min_margin(with_epsilon(q, hi), per_dim).min_margin > 0.0) return hi;
  double lo = 0.0;
  for (int i = 0; i < iters; ++i) {
    const double mid = (lo + hi) / 2;
    (grid_min_margin(with_epsilon(q, mid), per_dim).min_margin > 0.0 ? lo : hi) = mid;
  }
  return hi;
}

}  // namespace odv::testing
