#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "odv/bounds.hpp"
#include "odv/eval.hpp"
#include "odv/graph.hpp"

namespace odv {

/// Axis-aligned box: top-left corner (x, y), width w, height h, in normalized units.
struct BoundingBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  bool operator==(const BoundingBox&) const = default;
};

struct GroundTruth {
  BoundingBox box;
  int label = 0;
};

using GroundTruthSet = std::vector<GroundTruth>;

/// Intersection-over-union by the direct formulas. Returns 0 for an empty union.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double ih = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Layout of a detector's outputs: `num_boxes` predictions, each with four box
/// coordinates, `num_classes` logits and one objectness score, stored box-major in
/// three named graph outputs.
struct DetectionHeadSpec {
  std::size_t num_boxes = 1;
  std::size_t num_classes = 1;
  std::string boxes_output = "boxes";
  std::string logits_output = "logits";
  std::string objectness_output = "objectness";

  void check(const ComputeGraph& g) const {
    if (num_boxes == 0) throw std::invalid_argument("detection head needs at least one box");
    auto expect = [&](const std::string& name, std::size_t size) {
      if (!g.has_output(name)) throw std::invalid_argument("model has no output '" + name + "'");
      if (numel(g.node(g.output(name)).shape) != size)
        throw std::invalid_argument("output '" + name + "' has " + std::to_string(numel(g.node(g.output(name)).shape)) +
                                    " elements, head expects " + std::to_string(size));
    };
    expect(boxes_output, 4 * num_boxes);
    if (num_classes > 0) expect(logits_output, num_classes * num_boxes);
    expect(objectness_output, num_boxes);
  }

  BoundingBox decode_box(const std::map<std::string, Tensor>& outs, std::size_t i) const {
    const Tensor& b = outs.at(boxes_output);
    return {b[4 * i], b[4 * i + 1], b[4 * i + 2], b[4 * i + 3]};
  }
};

/// max(a, b) = b + ReLU(a - b).
inline NodeId lower_max(ComputeGraph& g, NodeId a, NodeId b) {
  if (g.node(a).shape != g.node(b).shape) throw std::invalid_argument("max operands differ in shape");
  return g.add_add(b, g.add_relu(g.add_sub(a, b)));
}

/// min(a, b) = a - ReLU(a - b).
inline NodeId lower_min(ComputeGraph& g, NodeId a, NodeId b) {
  if (g.node(a).shape != g.node(b).shape) throw std::invalid_argument("min operands differ in shape");
  return g.add_sub(a, g.add_relu(g.add_sub(a, b)));
}

/// S(x) = 1 / (1 + exp(-slope * x)), a smooth stand-in for the unit step.
inline NodeId build_binarizer(ComputeGraph& g, NodeId x, double slope) {
  if (!(slope > 0.0)) throw std::invalid_argument("binarizer slope must be positive");
  return g.add_sigmoid(x, slope);
}

struct IoUSubgraphHandle {
  NodeId x1, y1, x2, y2;  // intersection corners
  NodeId w, h;            // intersection extent, clamped at zero
  NodeId inter, uni, area_gt, area_det;
  NodeId margin;          // inter - tau * uni
  double tau;
};

/// Appends the IoU margin of a detection (four scalar nodes x, y, w, h) against a fixed
/// ground-truth box. The margin is positive iff IoU > tau.
inline IoUSubgraphHandle build_iou_margin(ComputeGraph& g, const std::array<NodeId, 4>& det,
                                          const BoundingBox& gt, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("IoU threshold must lie in (0, 1)");
  if (!(gt.w > 0.0 && gt.h > 0.0)) throw std::invalid_argument("ground-truth box has zero area");
  for (NodeId id : det)
    if (numel(g.node(id).shape) != 1) throw std::invalid_argument("detection coordinates must be scalars");

  const auto [xd, yd, wd, hd] = det;
  IoUSubgraphHandle h{};
  h.tau = tau;
  const NodeId xg = g.add_scalar(gt.x), yg = g.add_scalar(gt.y);
  const NodeId xg2 = g.add_scalar(gt.x + gt.w), yg2 = g.add_scalar(gt.y + gt.h);
  const NodeId xd2 = g.add_add(xd, wd), yd2 = g.add_add(yd, hd);

  h.x1 = lower_max(g, xg, xd);
  h.y1 = lower_max(g, yg, yd);
  h.x2 = lower_min(g, xg2, xd2);
  h.y2 = lower_min(g, yg2, yd2);
  h.w = g.add_relu(g.add_sub(h.x2, h.x1));
  h.h = g.add_relu(g.add_sub(h.y2, h.y1));
  h.inter = g.add_mul(h.w, h.h);
  h.area_gt = g.add_scalar(gt.w * gt.h);
  h.area_det = g.add_mul(wd, hd);
  h.uni = g.add_sub(g.add_add(h.area_gt, h.area_det), h.inter);
  h.margin = g.add_sub(h.inter, g.add_scale(h.uni, tau));
  return h;
}

struct MatchingHeadHandle {
  std::vector<std::vector<NodeId>> z;  // z[i][j]: detection i matches ground truth j
  double slope = 0.0;
  std::vector<NodeId> row_sums;
  std::vector<NodeId> col_sums;
  NodeId at_least_one = 0;            // sum(z) - 0.5
  std::vector<NodeId> row_margins;    // 0.5 - |row_sum - 1|
  std::vector<NodeId> col_margins;    // 0.5 - |col_sum - 1|
};

namespace detail {

inline NodeId sum_scalars(ComputeGraph& g, const std::vector<NodeId>& xs) {
  return xs.size() == 1 ? xs.front() : g.add_sum(g.add_concat(xs));
}

/// 0.5 - |s - 1| with |v| = ReLU(v) + ReLU(-v).
inline NodeId unit_band_margin(ComputeGraph& g, NodeId s) {
  const NodeId d = g.add_scale(s, 1.0, -1.0);
  const NodeId abs = g.add_add(g.add_relu(d), g.add_relu(g.add_scale(d, -1.0)));
  return g.add_scale(abs, -1.0, 0.5);
}

}  // namespace detail

/// Binarized match matrix z_ij = S(slope * (A_I - tau * A_U)) between detections and
/// ground truths, with the at-least-one and exact-matching margins.
inline MatchingHeadHandle build_matching_head(ComputeGraph& g, const std::vector<std::array<NodeId, 4>>& dets,
                                              const GroundTruthSet& gts, double tau, double slope) {
  if (dets.empty() || gts.empty()) throw std::invalid_argument("matching head needs detections and ground truths");
  MatchingHeadHandle m;
  m.slope = slope;
  m.z.assign(dets.size(), std::vector<NodeId>(gts.size()));
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t j = 0; j < gts.size(); ++j)
      m.z[i][j] = build_binarizer(g, build_iou_margin(g, dets[i], gts[j].box, tau).margin, slope);

  std::vector<NodeId> all;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    m.row_sums.push_back(detail::sum_scalars(g, m.z[i]));
    all.insert(all.end(), m.z[i].begin(), m.z[i].end());
  }
  for (std::size_t j = 0; j < gts.size(); ++j) {
    std::vector<NodeId> col;
    for (std::size_t i = 0; i < dets.size(); ++i) col.push_back(m.z[i][j]);
    m.col_sums.push_back(detail::sum_scalars(g, col));
  }
  m.at_least_one = g.add_scale(detail::sum_scalars(g, all), 1.0, -0.5);
  for (NodeId s : m.row_sums) m.row_margins.push_back(detail::unit_band_margin(g, s));
  for (NodeId s : m.col_sums) m.col_margins.push_back(detail::unit_band_margin(g, s));
  return m;
}

struct CountHeadHandle {
  NodeId count;
  NodeId lower_margin;  // count - d + 0.5
  NodeId upper_margin;  // d - count + 0.5
};

/// Soft count of positive detections, sum_i S(slope * (objectness_i - theta)), with the
/// two margins asserting |count - d| < 0.5.
inline CountHeadHandle build_count_head(ComputeGraph& g, const std::vector<NodeId>& objectness, std::size_t d,
                                        double slope, double theta = 0.5) {
  if (objectness.empty()) throw std::invalid_argument("count head needs objectness scores");
  std::vector<NodeId> positives;
  for (NodeId o : objectness) positives.push_back(build_binarizer(g, g.add_scale(o, 1.0, -theta), slope));
  CountHeadHandle c;
  c.count = detail::sum_scalars(g, positives);
  const double dd = static_cast<double>(d);
  c.lower_margin = g.add_scale(c.count, 1.0, 0.5 - dd);
  c.upper_margin = g.add_scale(c.count, -1.0, dd + 0.5);
  return c;
}

enum class AttackKind { Misclassification, Mislocalization, Misdetection };

inline std::string_view to_string(AttackKind k) {
  switch (k) {
    case AttackKind::Misclassification: return "misclassification";
    case AttackKind::Mislocalization: return "mislocalization";
    case AttackKind::Misdetection: return "misdetection";
  }
  return "?";
}

inline AttackKind attack_kind_from_string(std::string_view s) {
  for (auto k : {AttackKind::Misclassification, AttackKind::Mislocalization, AttackKind::Misdetection})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown attack kind '" + std::string(s) + "'");
}

/// Model plus property layers, input region, and the scalar margins whose joint
/// positivity over the region is the property.
struct VerificationQuery {
  ComputeGraph graph;
  InputRegion region;
  std::vector<std::string> margins;
  AttackKind kind = AttackKind::Mislocalization;
  double timeout_seconds = 300.0;
  double tau = 0.5;
  double slope = 1000.0;
  double theta = 0.5;
  bool uses_binarizer = false;
  DetectionHeadSpec head;
  GroundTruthSet ground_truths;
  std::vector<std::pair<std::size_t, std::size_t>> assignment;  // (box, ground truth)

  std::vector<NodeId> margin_nodes() const {
    std::vector<NodeId> ids;
    for (const auto& m : margins) ids.push_back(graph.output(m));
    return ids;
  }

  void check() const {
    if (margins.empty()) throw std::invalid_argument("query has no margins");
    for (NodeId id : margin_nodes())
      if (numel(graph.node(id).shape) != 1) throw std::invalid_argument("margin node is not scalar");
    if (region.center.size() != numel(graph.input_shape()))
      throw std::invalid_argument("region does not match the model input");
    auto diags = validate(graph);
    if (!diags.empty()) throw std::invalid_argument("query graph invalid: " + diags.front());
  }
};

struct EncodeOptions {
  double epsilon = 0.0;
  double tau = 0.5;
  double slope = 1000.0;
  double theta = 0.5;
  double timeout_seconds = 300.0;
  bool clip_unit = true;
  std::vector<std::size_t> pixels;  // empty: perturb every input element
};

/// Greedy highest-IoU pairing of predicted boxes with ground truths.
inline std::vector<std::pair<std::size_t, std::size_t>> greedy_assignment(const std::vector<BoundingBox>& boxes,
                                                                           const GroundTruthSet& gts) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::vector<bool> box_used(boxes.size(), false), gt_used(gts.size(), false);
  for (std::size_t round = 0; round < std::min(boxes.size(), gts.size()); ++round) {
    double best = -1.0;
    std::size_t bi = 0, gj = 0;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (box_used[i]) continue;
      for (std::size_t j = 0; j < gts.size(); ++j) {
        if (gt_used[j]) continue;
        const double v = iou(boxes[i], gts[j].box);
        if (v > best) {
          best = v;
          bi = i;
          gj = j;
        }
      }
    }
    box_used[bi] = gt_used[gj] = true;
    out.emplace_back(bi, gj);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
  return out;
}

namespace detail {

struct HeadNodes {
  std::vector<std::array<NodeId, 4>> boxes;
  std::vector<std::vector<NodeId>> logits;
  std::vector<NodeId> objectness;
};

inline HeadNodes slice_head(ComputeGraph& g, const DetectionHeadSpec& head) {
  HeadNodes h;
  const NodeId b = g.output(head.boxes_output);
  const NodeId o = g.output(head.objectness_output);
  for (std::size_t i = 0; i < head.num_boxes; ++i) {
    std::array<NodeId, 4> c{};
    for (std::size_t k = 0; k < 4; ++k) c[k] = g.add_slice(b, 4 * i + k, 4 * i + k + 1);
    h.boxes.push_back(c);
    h.objectness.push_back(g.add_slice(o, i, i + 1));
    std::vector<NodeId> l;
    if (head.num_classes > 0) {
      const NodeId lg = g.output(head.logits_output);
      for (std::size_t c2 = 0; c2 < head.num_classes; ++c2)
        l.push_back(g.add_slice(lg, i * head.num_classes + c2, i * head.num_classes + c2 + 1));
    }
    h.logits.push_back(std::move(l));
  }
  return h;
}

}  // namespace detail

/// Builds the verification query for one attack kind on one sample.
inline VerificationQuery encode_query(AttackKind kind, const ComputeGraph& model, const DetectionHeadSpec& head,
                                      const Tensor& image, const GroundTruthSet& gts, const EncodeOptions& opt) {
  if (!(opt.tau > 0.0 && opt.tau < 1.0)) throw std::invalid_argument("IoU threshold must lie in (0, 1)");
  if (!(opt.slope > 0.0)) throw std::invalid_argument("binarizer slope must be positive");
  head.check(model);
  if (gts.empty() && kind != AttackKind::Misdetection)
    throw std::invalid_argument("ground truths are required for " + std::string(to_string(kind)));
  for (const auto& gt : gts)
    if (head.num_classes > 0 && (gt.label < 0 || static_cast<std::size_t>(gt.label) >= head.num_classes))
      throw std::invalid_argument("ground-truth label outside the model's class set");

  VerificationQuery q;
  q.graph = model;
  q.region = InputRegion::linf(image, opt.epsilon, opt.clip_unit, opt.pixels);
  q.kind = kind;
  q.timeout_seconds = opt.timeout_seconds;
  q.tau = opt.tau;
  q.slope = opt.slope;
  q.theta = opt.theta;
  q.head = head;
  q.ground_truths = gts;

  const auto clean = forward(model, image);
  std::vector<BoundingBox> predicted;
  for (std::size_t i = 0; i < head.num_boxes; ++i) predicted.push_back(head.decode_box(clean, i));
  q.assignment = greedy_assignment(predicted, gts);
  if (kind != AttackKind::Misdetection && q.assignment.size() < gts.size())
    throw std::invalid_argument("model predicts fewer boxes than there are ground truths");

  ComputeGraph& g = q.graph;
  auto nodes = detail::slice_head(g, head);
  auto add_margin = [&](const std::string& name, NodeId id) {
    g.set_output(name, id);
    q.margins.push_back(name);
  };
  auto add_class_margins = [&](std::size_t box, std::size_t gt_index) {
    if (head.num_classes < 2) return;
    const auto& logits = nodes.logits[box];
    const auto truth = static_cast<std::size_t>(gts[gt_index].label);
    for (std::size_t c = 0; c < head.num_classes; ++c) {
      if (c == truth) continue;
      add_margin("class_gt" + std::to_string(gt_index) + "_vs" + std::to_string(c),
                 g.add_sub(logits[truth], logits[c]));
    }
  };

  switch (kind) {
    case AttackKind::Misclassification:
      for (const auto& [box, gt] : q.assignment) add_class_margins(box, gt);
      if (q.margins.empty()) throw std::invalid_argument("misclassification needs at least two classes");
      break;
    case AttackKind::Mislocalization: {
      std::vector<NodeId> ious;
      for (const auto& [box, gt] : q.assignment)
        ious.push_back(build_iou_margin(g, nodes.boxes[box], gts[gt].box, opt.tau).margin);
      if (ious.size() == 1) {
        add_margin("iou_gt0", ious.front());
      } else {
        NodeId best = ious.front();
        for (std::size_t k = 1; k < ious.size(); ++k) best = lower_max(g, best, ious[k]);
        add_margin("max_iou", best);
      }
      for (const auto& [box, gt] : q.assignment) add_class_margins(box, gt);
      break;
    }
    case AttackKind::Misdetection: {
      auto count = build_count_head(g, nodes.objectness, gts.size(), opt.slope, opt.theta);
      add_margin("count_lower", count.lower_margin);
      add_margin("count_upper", count.upper_margin);
      if (head.num_boxes > 1 && gts.size() > 1) {
        std::vector<std::array<NodeId, 4>> dets;
        for (const auto& [box, gt] : q.assignment) dets.push_back(nodes.boxes[box]);
        GroundTruthSet matched;
        for (const auto& [box, gt] : q.assignment) matched.push_back(gts[gt]);
        auto m = build_matching_head(g, dets, matched, opt.tau, opt.slope);
        for (std::size_t i = 0; i < m.row_margins.size(); ++i) add_margin("match_row" + std::to_string(i), m.row_margins[i]);
        for (std::size_t j = 0; j < m.col_margins.size(); ++j) add_margin("match_col" + std::to_string(j), m.col_margins[j]);
      }
      q.uses_binarizer = true;
      break;
    }
  }
  q.check();
  return q;
}

/// Margin values of the query at one input.
inline std::vector<double> evaluate_margins(const VerificationQuery& q, const Tensor& input) {
  auto vals = evaluate(q.graph, input);
  std::vector<double> out;
  for (NodeId id : q.margin_nodes()) out.push_back(vals[id].item());
  return out;
}

namespace detail {

inline std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

/// VNN-LIB text: input declarations with the region's box bounds, one output variable
/// per margin, and the negated margin conjunction as the satisfiability target.
inline std::string export_vnnlib(const VerificationQuery& q) {
  const Box box = q.region.box();
  std::ostringstream os;
  os << "; kind " << to_string(q.kind) << ", " << box.dims() << " inputs, " << q.margins.size() << " margins\n";
  for (std::size_t m = 0; m < q.margins.size(); ++m) os << "; Y_" << m << " = " << q.margins[m] << "\n";
  os << "\n";
  for (std::size_t i = 0; i < box.dims(); ++i) os << "(declare-const X_" << i << " Real)\n";
  for (std::size_t m = 0; m < q.margins.size(); ++m) os << "(declare-const Y_" << m << " Real)\n";
  os << "\n";
  for (std::size_t i = 0; i < box.dims(); ++i) {
    os << "(assert (>= X_" << i << " " << detail::shortest(box.lo[i]) << "))\n";
    os << "(assert (<= X_" << i << " " << detail::shortest(box.hi[i]) << "))\n";
  }
  os << "\n";
  if (q.margins.size() == 1) {
    os << "(assert (<= Y_0 0.0))\n";
  } else {
    os << "(assert (or\n";
    for (std::size_t m = 0; m < q.margins.size(); ++m) os << "  (and (<= Y_" << m << " 0.0))\n";
    os << "))\n";
  }
  return os.str();
}

}  // namespace odv
