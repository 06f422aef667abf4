#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "odv/bounds.hpp"
#include "odv/encoder.hpp"
#include "odv/eval.hpp"

namespace odv {

/// Soft-min -T log sum exp(-m/T), evaluated stably. T = 0 gives the exact minimum.
inline double scalarize(std::span<const double> margins, double temperature) {
  if (margins.empty()) throw std::invalid_argument("scalarize needs at least one margin");
  if (temperature < 0.0) throw std::invalid_argument("temperature must be nonnegative");
  const double lo = *std::min_element(margins.begin(), margins.end());
  if (temperature == 0.0 || margins.size() == 1) return lo;
  double acc = 0.0;
  for (double m : margins) acc += std::exp(-(m - lo) / temperature);
  return lo - temperature * std::log(acc);
}

/// d scalarize / d m_i: softmax(-m/T), or a one-hot on the first minimum when T = 0.
inline std::vector<double> scalarize_weights(std::span<const double> margins, double temperature) {
  std::vector<double> w(margins.size(), 0.0);
  const auto it = std::min_element(margins.begin(), margins.end());
  if (temperature == 0.0) {
    w[static_cast<std::size_t>(it - margins.begin())] = 1.0;
    return w;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < margins.size(); ++i) total += w[i] = std::exp(-(margins[i] - *it) / temperature);
  for (double& v : w) v /= total;
  return w;
}

struct PgdOptions {
  int steps = 200;
  int restarts = 10;
  double step_size = 0.0;      // 0: step_fraction times the largest half-width of the box
  double step_fraction = 0.1;
  double temperature = 0.0;
  double surrogate_slope = 10.0;  // binarizer slope used for gradients only; 0 keeps the query's
  std::uint64_t seed = 0;
  bool stop_at_witness = true;
  std::optional<std::chrono::steady_clock::time_point> deadline;
};

struct PgdResult {
  std::optional<Tensor> witness;
  std::vector<double> witness_margins;
  Tensor best;               // input with the lowest exact objective seen
  double best_value = std::numeric_limits<double>::infinity();
  int restarts_run = 0;
  int evaluations = 0;
};

namespace detail {

/// The query graph with binarizer sigmoids flattened to `slope`, or nullopt when the
/// query has no binarizer. Steep sigmoids underflow to zero gradient away from the
/// threshold, which stalls sign-gradient search.
inline std::optional<ComputeGraph> search_graph(const VerificationQuery& q, double slope) {
  if (!q.uses_binarizer || !(slope > 0.0) || slope == q.slope) return std::nullopt;
  ComputeGraph g = q.graph;
  for (std::size_t id = 0; id < g.size(); ++id) {
    Node& n = g.mutable_node(id);
    if (n.kind == OpKind::Sigmoid && n.slope == q.slope) n.slope = slope;
  }
  return g;
}

inline void project(std::vector<double>& x, const Box& box) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], box.lo[i], box.hi[i]);
}

}  // namespace detail

/// Sign-gradient descent on the scalarized margins within `box`. The first restart
/// starts at `start` (or the box midpoint); later ones sample uniformly in the box.
/// Candidates are judged by their exact margins.
inline PgdResult pgd_minimize(const VerificationQuery& q, const Box& box, const PgdOptions& opt,
                              const std::vector<double>* start = nullptr) {
  if (opt.steps < 1) throw std::invalid_argument("PGD needs at least one step");
  const auto ids = q.margin_nodes();
  const Shape in_shape = q.graph.input_shape();
  std::mt19937_64 rng(opt.seed);
  double radius = 0.0;
  for (std::size_t i = 0; i < box.dims(); ++i) radius = std::max(radius, box.width(i) / 2);
  const double step = opt.step_size > 0.0 ? opt.step_size : radius * opt.step_fraction;

  const auto surrogate = detail::search_graph(q, opt.surrogate_slope);
  const ComputeGraph& grad_graph = surrogate ? *surrogate : q.graph;

  PgdResult res;
  std::vector<double> margins(ids.size());
  std::vector<double> soft(ids.size());
  // Evaluates x; `vals` receives the activations gradients are taken on. False if a
  // forward pass faults.
  auto assess = [&](const std::vector<double>& x, Activations& vals) {
    try {
      vals = evaluate(q.graph, Tensor(in_shape, x));
      for (std::size_t k = 0; k < ids.size(); ++k) margins[k] = vals[ids[k]].item();
      if (surrogate) vals = evaluate(*surrogate, Tensor(in_shape, x));
    } catch (const EvaluationError&) {
      return false;
    }
    ++res.evaluations;
    for (std::size_t k = 0; k < ids.size(); ++k) soft[k] = vals[ids[k]].item();
    const double exact = scalarize(margins, 0.0);
    if (exact < res.best_value) {
      res.best_value = exact;
      res.best = Tensor(in_shape, x);
    }
    if (exact <= 0.0 && !res.witness && q.region.contains(x)) {
      res.witness = Tensor(in_shape, x);
      res.witness_margins = margins;
    }
    return true;
  };

  for (int r = 0; r < opt.restarts; ++r) {
    if (opt.deadline && std::chrono::steady_clock::now() >= *opt.deadline) break;
    std::vector<double> x(box.dims());
    if (r == 0) {
      x = start ? *start : box.midpoint();
    } else {
      for (std::size_t i = 0; i < x.size(); ++i)
        x[i] = box.lo[i] + (box.hi[i] - box.lo[i]) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    }
    detail::project(x, box);
    ++res.restarts_run;
    Activations vals;
    if (!assess(x, vals)) continue;
    if (res.witness && opt.stop_at_witness) break;
    if (step == 0.0) continue;
    for (int s = 0; s < opt.steps; ++s) {
      const auto w = scalarize_weights(soft, opt.temperature);
      std::vector<std::pair<NodeId, Tensor>> seeds;
      for (std::size_t k = 0; k < ids.size(); ++k)
        if (w[k] != 0.0) seeds.emplace_back(ids[k], Tensor::scalar(w[k]));
      const Tensor grad = backward(grad_graph, vals, seeds).input;
      bool moved = false;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double g = grad[i];
        if (g == 0.0 || box.lo[i] == box.hi[i]) continue;
        const double nx = std::clamp(x[i] - (g > 0 ? step : -step), box.lo[i], box.hi[i]);
        moved |= nx != x[i];
        x[i] = nx;
      }
      if (!moved) break;
      if (!assess(x, vals)) break;
      if (res.witness && opt.stop_at_witness) return res;
      if (opt.deadline && std::chrono::steady_clock::now() >= *opt.deadline) return res;
    }
    if (res.witness && opt.stop_at_witness) break;
  }
  return res;
}

/// Counterexample search over the whole query region, step size a fraction of the
/// largest radius unless given.
inline PgdResult pgd_region(const VerificationQuery& q, PgdOptions opt = {}) {
  if (opt.step_size <= 0.0 && !q.region.radius.empty())
    opt.step_size = *std::max_element(q.region.radius.begin(), q.region.radius.end()) * opt.step_fraction;
  return pgd_minimize(q, q.region.box(), opt, &q.region.center.storage());
}

inline std::optional<Tensor> pgd_search(const VerificationQuery& q, const PgdOptions& opt = {}) {
  return pgd_region(q, opt).witness;
}

}  // namespace odv
