#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <future>
#include <optional>
#include <queue>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "odv/bounds.hpp"
#include "odv/encoder.hpp"
#include "odv/falsifier.hpp"

namespace odv {

enum class VerdictStatus { Verified, Falsified, Unknown };
enum class UnknownReason { None, IncompleteEncoding, DepthExhausted, Timeout };

inline std::string_view to_string(VerdictStatus s) {
  switch (s) {
    case VerdictStatus::Verified: return "verified";
    case VerdictStatus::Falsified: return "falsified";
    case VerdictStatus::Unknown: return "unknown";
  }
  return "?";
}

inline std::string_view to_string(UnknownReason r) {
  switch (r) {
    case UnknownReason::None: return "none";
    case UnknownReason::IncompleteEncoding: return "incomplete-encoding";
    case UnknownReason::DepthExhausted: return "depth-exhausted";
    case UnknownReason::Timeout: return "timeout";
  }
  return "?";
}

struct VerifyStats {
  std::size_t subproblems = 0;
  std::size_t max_depth = 0;
  std::size_t exhausted_leaves = 0;
  std::size_t evaluations = 0;
  double wall_seconds = 0.0;
  bool incomplete_encoding = false;   // smooth binarizer in the query
  bool guard_band_exercised = false;  // some lower bound fell in (0, guard]
  std::vector<double> root_lower;     // per-margin lower bounds over the whole region
};

struct Verdict {
  VerdictStatus status = VerdictStatus::Unknown;
  UnknownReason reason = UnknownReason::None;
  std::optional<Tensor> witness;
  std::vector<double> margins;  // exact margins at the witness
  std::vector<BoundingBox> detections;
  VerifyStats stats;
};

struct Subproblem {
  Box box;
  std::size_t depth = 0;
  std::vector<std::size_t> pending;  // margins not yet certified on an ancestor
};

struct VerifyOptions {
  double min_width = 1e-6;
  std::size_t max_depth = 40;
  double guard_band = 1e-9;
  PgdOptions attack;                     // initial search over the whole region
  PgdOptions local{20, 1, 0.0, 0.5};     // per-subproblem search
  bool local_attack = true;
  BoundOptions bounds;
  std::size_t threads = 1;
  std::size_t max_subproblems = 0;        // 0: unlimited; exceeding it reports a timeout
  std::optional<double> timeout_seconds;  // overrides the query's budget
};

/// Bisects the widest dimension (lowest index on ties) at its midpoint. Empty when no
/// dimension is wider than `min_width`.
inline std::optional<std::pair<Subproblem, Subproblem>> split(const Subproblem& s, double min_width) {
  std::size_t dim = 0;
  double widest = -1.0;
  for (std::size_t i = 0; i < s.box.dims(); ++i)
    if (s.box.width(i) > widest) {
      widest = s.box.width(i);
      dim = i;
    }
  if (!(widest > min_width)) return std::nullopt;
  const double mid = s.box.lo[dim] + (s.box.hi[dim] - s.box.lo[dim]) / 2;
  Subproblem a = s, b = s;
  a.box.hi[dim] = mid;
  b.box.lo[dim] = mid;
  a.depth = b.depth = s.depth + 1;
  return std::make_pair(std::move(a), std::move(b));
}

/// Merge of two sibling verdicts; `a` is the one explored first.
inline Verdict combine(const Verdict& a, const Verdict& b) {
  if (a.status == VerdictStatus::Falsified) return a;
  if (b.status == VerdictStatus::Falsified) return b;
  if (a.status == VerdictStatus::Verified && b.status == VerdictStatus::Verified) return a;
  Verdict out;
  out.status = VerdictStatus::Unknown;
  out.reason = std::max(a.status == VerdictStatus::Unknown ? a.reason : UnknownReason::None,
                        b.status == VerdictStatus::Unknown ? b.reason : UnknownReason::None);
  return out;
}

namespace detail {

struct Outcome {
  std::optional<Tensor> witness;
  std::vector<double> witness_margins;
  std::vector<std::size_t> pending;
  std::vector<double> lower;  // by margin index, NaN where not bounded
  bool guard_hit = false;
  std::size_t evaluations = 0;
};

inline bool try_candidate(const VerificationQuery& q, const std::vector<double>& x, Outcome& out) {
  if (!q.region.contains(x)) return false;
  ++out.evaluations;
  std::vector<double> m;
  try {
    m = evaluate_margins(q, Tensor(q.graph.input_shape(), x));
  } catch (const EvaluationError&) {
    return false;
  }
  for (double v : m)
    if (v <= 0.0) {
      out.witness = Tensor(q.graph.input_shape(), x);
      out.witness_margins = m;
      return true;
    }
  return false;
}

inline Outcome process(const VerificationQuery& q, const std::vector<NodeId>& ids, const Subproblem& s,
                       const VerifyOptions& opt, std::uint64_t seed,
                       std::optional<std::chrono::steady_clock::time_point> deadline) {
  Outcome out;
  out.lower.assign(ids.size(), std::numeric_limits<double>::quiet_NaN());
  if (try_candidate(q, s.box.midpoint(), out)) return out;

  const auto bounds = compute_bounds(q.graph, s.box, opt.bounds);
  std::size_t worst = s.pending.front();
  std::vector<double> worst_coeff;
  for (std::size_t k : s.pending) {
    auto lin = backward_linear_bounds(q.graph, bounds, ids[k], opt.bounds).front();
    const auto iv = concretize(lin, s.box);
    const double lo = std::max(iv.lo, bounds.lower[ids[k]][0]);
    out.lower[k] = lo;
    if (lo > opt.guard_band) continue;
    if (lo > 0.0) out.guard_hit = true;
    out.pending.push_back(k);
    if (worst_coeff.empty() || lo < out.lower[worst]) {
      worst = k;
      worst_coeff = std::move(lin.lower_coeff);
    }
  }
  if (out.pending.empty()) return out;

  // The corner minimizing the weakest margin's linear lower bound.
  std::vector<double> corner(s.box.dims());
  for (std::size_t i = 0; i < corner.size(); ++i) corner[i] = worst_coeff[i] > 0.0 ? s.box.lo[i] : s.box.hi[i];
  if (try_candidate(q, corner, out)) return out;

  if (opt.local_attack) {
    PgdOptions local = opt.local;
    local.seed = seed;
    local.deadline = deadline;
    auto r = pgd_minimize(q, s.box, local, &corner);
    out.evaluations += static_cast<std::size_t>(r.evaluations);
    if (r.witness) {
      out.witness = std::move(r.witness);
      out.witness_margins = std::move(r.witness_margins);
    }
  }
  return out;
}

inline std::vector<BoundingBox> decode_detections(const VerificationQuery& q, const Tensor& x) {
  std::vector<BoundingBox> out;
  if (!q.graph.has_output(q.head.boxes_output)) return out;
  const auto outs = forward(q.graph, x);
  const std::size_t n = outs.at(q.head.boxes_output).size() / 4;
  for (std::size_t i = 0; i < n; ++i) out.push_back(q.head.decode_box(outs, i));
  return out;
}

}  // namespace detail

/// Falsifier first, then root bounds, then best-first input splitting until every
/// leaf is certified, a witness turns up, the budget runs out, or the width floor is hit.
inline Verdict verify(const VerificationQuery& q, const VerifyOptions& opt = {}) {
  q.check();
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const double budget = opt.timeout_seconds.value_or(q.timeout_seconds);
  Verdict v;
  v.stats.incomplete_encoding = q.uses_binarizer;
  auto finish = [&](Verdict& r) -> Verdict {
    r.stats.wall_seconds = std::chrono::duration<double>(clock::now() - t0).count();
    if (r.witness) r.detections = detail::decode_detections(q, *r.witness);
    return std::move(r);
  };
  auto falsified = [&](Tensor w, std::vector<double> m) {
    v.status = VerdictStatus::Falsified;
    v.reason = UnknownReason::None;
    v.witness = std::move(w);
    v.margins = std::move(m);
    return finish(v);
  };
  if (!(budget > 0.0)) {
    v.reason = UnknownReason::Timeout;
    return finish(v);
  }
  const auto deadline = t0 + std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(budget));
  const auto ids = q.margin_nodes();

  {
    detail::Outcome centre;
    if (detail::try_candidate(q, q.region.center.storage(), centre))
      return falsified(*centre.witness, centre.witness_margins);
    PgdOptions attack = opt.attack;
    attack.deadline = deadline;
    auto r = pgd_region(q, attack);
    v.stats.evaluations += static_cast<std::size_t>(r.evaluations) + 1;
    if (r.witness) return falsified(*r.witness, r.witness_margins);
  }

  struct Item {
    Subproblem sub;
    std::size_t seq;
  };
  auto wider = [](const Item& a, const Item& b) {
    const double wa = a.sub.box.max_width(), wb = b.sub.box.max_width();
    return wa != wb ? wa < wb : a.seq > b.seq;
  };
  std::priority_queue<Item, std::vector<Item>, decltype(wider)> queue(wider);
  std::size_t seq = 0;
  Subproblem root{q.region.box(), 0, {}};
  for (std::size_t k = 0; k < ids.size(); ++k) root.pending.push_back(k);
  queue.push({std::move(root), seq++});
  bool exhausted = false;
  const std::size_t threads = std::max<std::size_t>(1, opt.threads);

  while (!queue.empty()) {
    if (clock::now() >= deadline || (opt.max_subproblems && v.stats.subproblems >= opt.max_subproblems)) {
      v.reason = UnknownReason::Timeout;
      return finish(v);
    }
    std::vector<Item> batch;
    while (!queue.empty() && batch.size() < threads) {
      batch.push_back(queue.top());
      queue.pop();
    }
    std::vector<detail::Outcome> outcomes(batch.size());
    auto run = [&](std::size_t i) {
      return detail::process(q, ids, batch[i].sub, opt, opt.local.seed ^ (0x9e3779b97f4a7c15ULL * (batch[i].seq + 1)),
                             deadline);
    };
    if (batch.size() == 1) {
      outcomes[0] = run(0);
    } else {
      std::vector<std::future<detail::Outcome>> fut;
      for (std::size_t i = 0; i < batch.size(); ++i) fut.push_back(std::async(std::launch::async, run, i));
      for (std::size_t i = 0; i < batch.size(); ++i) outcomes[i] = fut[i].get();
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto& o = outcomes[i];
      const Subproblem& s = batch[i].sub;
      ++v.stats.subproblems;
      v.stats.max_depth = std::max(v.stats.max_depth, s.depth);
      v.stats.evaluations += o.evaluations;
      v.stats.guard_band_exercised |= o.guard_hit;
      if (s.depth == 0) v.stats.root_lower = o.lower;
      if (o.witness) return falsified(std::move(*o.witness), std::move(o.witness_margins));
      if (o.pending.empty()) continue;
      std::optional<std::pair<Subproblem, Subproblem>> kids;
      if (s.depth < opt.max_depth) {
        Subproblem narrowed{s.box, s.depth, o.pending};
        kids = split(narrowed, opt.min_width);
      }
      if (!kids) {
        exhausted = true;
        ++v.stats.exhausted_leaves;
        continue;
      }
      queue.push({std::move(kids->first), seq++});
      queue.push({std::move(kids->second), seq++});
    }
  }
  if (exhausted) {
    v.reason = UnknownReason::DepthExhausted;
  } else {
    v.status = VerdictStatus::Verified;
  }
  return finish(v);
}

/// Exact base-16 rendering of a double, as printf's %a.
inline std::string hex_float(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", x);
  return buf;
}

inline double parse_hex_float(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw std::invalid_argument("not a floating-point literal: " + s);
  return v;
}

inline nlohmann::json box_json(const BoundingBox& b) { return {b.x, b.y, b.w, b.h}; }

/// Verdict document. Everything except stats.wall_seconds is deterministic.
inline nlohmann::json verdict_to_json(const Verdict& v, const VerificationQuery& q, const VerifyOptions& opt) {
  nlohmann::json j;
  j["verdict"] = to_string(v.status);
  j["reason"] = to_string(v.reason);
  if (v.witness) {
    auto& w = j["witness"] = nlohmann::json::array();
    for (double x : v.witness->values()) w.push_back(hex_float(x));
    auto& m = j["margins"] = nlohmann::json::object();
    for (std::size_t k = 0; k < q.margins.size(); ++k) m[q.margins[k]] = v.margins[k];
    auto& d = j["detections"] = nlohmann::json::array();
    for (const auto& b : v.detections) d.push_back(box_json(b));
  }
  auto& s = j["stats"];
  s["subproblems"] = v.stats.subproblems;
  s["max_depth"] = v.stats.max_depth;
  s["exhausted_leaves"] = v.stats.exhausted_leaves;
  s["evaluations"] = v.stats.evaluations;
  s["wall_seconds"] = v.stats.wall_seconds;
  s["incomplete_encoding"] = v.stats.incomplete_encoding;
  s["guard_band_exercised"] = v.stats.guard_band_exercised;
  auto& rl = s["root_lower"] = nlohmann::json::array();
  for (double x : v.stats.root_lower) rl.push_back(std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x));
  auto& c = j["config"];
  c["kind"] = to_string(q.kind);
  c["margins"] = q.margins;
  c["tau"] = q.tau;
  c["slope"] = q.slope;
  c["timeout_seconds"] = opt.timeout_seconds.value_or(q.timeout_seconds);
  c["max_subproblems"] = opt.max_subproblems;
  c["min_width"] = opt.min_width;
  c["max_depth"] = opt.max_depth;
  c["guard_band"] = opt.guard_band;
  c["attack"] = {{"steps", opt.attack.steps}, {"restarts", opt.attack.restarts}, {"seed", opt.attack.seed}};
  return j;
}

inline Tensor witness_from_json(const nlohmann::json& j, const Shape& shape) {
  std::vector<double> x;
  for (const auto& s : j.at("witness")) x.push_back(parse_hex_float(s.get<std::string>()));
  return Tensor(shape, std::move(x));
}

}  // namespace odv
