#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "odv/encoder.hpp"
#include "toy_models.hpp"

namespace odv {
namespace {

// Independent oracle: the textbook intersection/union formulas on plain doubles.
struct DirectIoU {
  double inter, uni, margin;
};

DirectIoU direct_iou_margin(const BoundingBox& d, const BoundingBox& gt, double tau) {
  const double x1 = d.x > gt.x ? d.x : gt.x;
  const double y1 = d.y > gt.y ? d.y : gt.y;
  const double x2 = (d.x + d.w) < (gt.x + gt.w) ? d.x + d.w : gt.x + gt.w;
  const double y2 = (d.y + d.h) < (gt.y + gt.h) ? d.y + d.h : gt.y + gt.h;
  const double wi = x2 - x1 > 0 ? x2 - x1 : 0.0;
  const double hi = y2 - y1 > 0 ? y2 - y1 : 0.0;
  const double inter = wi * hi;
  const double uni = gt.w * gt.h + d.w * d.h - inter;
  return {inter, uni, inter - tau * uni};
}

struct IoUGraph {
  ComputeGraph g;
  IoUSubgraphHandle h;
};

IoUGraph iou_graph(const BoundingBox& gt, double tau) {
  IoUGraph r;
  NodeId in = r.g.add_input({4});
  std::array<NodeId, 4> det{};
  for (std::size_t k = 0; k < 4; ++k) det[k] = r.g.add_slice(in, k, k + 1);
  r.h = build_iou_margin(r.g, det, gt, tau);
  return r;
}

Tensor as_input(const BoundingBox& b) { return Tensor::vector({b.x, b.y, b.w, b.h}); }

TEST(Lowering, MaxMinExamples) {
  ComputeGraph g;
  NodeId in = g.add_input({2});
  NodeId a = g.add_slice(in, 0, 1), b = g.add_slice(in, 1, 2);
  NodeId mx = lower_max(g, a, b), mn = lower_min(g, a, b);
  auto vals = evaluate(g, Tensor::vector({3, 5}));
  EXPECT_EQ(vals[mx].item(), 5.0);
  vals = evaluate(g, Tensor::vector({4, 4}));
  EXPECT_EQ(vals[mx].item(), 4.0);
  vals = evaluate(g, Tensor::vector({-2, -7}));
  EXPECT_EQ(vals[mn].item(), -7.0);
}

TEST(Lowering, WithinOneUlpOfBuiltins) {
  ComputeGraph g;
  NodeId in = g.add_input({2});
  NodeId a = g.add_slice(in, 0, 1), b = g.add_slice(in, 1, 2);
  NodeId mx = lower_max(g, a, b), mn = lower_min(g, a, b);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  // b + ReLU(a - b) rounds twice; the error stays within one ulp of the largest operand.
  auto ulp_close = [](double got, double want, double x, double y) {
    const double mag = std::max({std::abs(x), std::abs(y), std::abs(x - y)});
    return std::abs(got - want) <= std::nextafter(mag, INFINITY) - mag;
  };
  for (int i = 0; i < 10000; ++i) {
    const double x = u(rng), y = u(rng);
    auto vals = evaluate(g, Tensor::vector({x, y}));
    EXPECT_TRUE(ulp_close(vals[mx].item(), std::max(x, y), x, y)) << x << " " << y;
    EXPECT_TRUE(ulp_close(vals[mn].item(), std::min(x, y), x, y)) << x << " " << y;
  }
}

TEST(Lowering, RejectsShapeMismatch) {
  ComputeGraph g;
  NodeId in = g.add_input({3});
  NodeId a = g.add_slice(in, 0, 1), b = g.add_slice(in, 1, 3);
  EXPECT_THROW(lower_max(g, a, b), std::invalid_argument);
  EXPECT_THROW(lower_min(g, a, b), std::invalid_argument);
}

TEST(IoUMargin, WorkedExamples) {
  {
    BoundingBox box{0.2, 0.2, 0.4, 0.4};
    auto r = iou_graph(box, 0.5);
    auto vals = evaluate(r.g, as_input(box));
    EXPECT_NEAR(vals[r.h.inter].item(), 0.16, 1e-12);
    EXPECT_NEAR(vals[r.h.uni].item(), 0.16, 1e-12);
    EXPECT_NEAR(vals[r.h.margin].item(), 0.08, 1e-12);
  }
  {
    auto r = iou_graph({0.5, 0.5, 0.2, 0.2}, 0.5);
    auto vals = evaluate(r.g, as_input({0, 0, 0.2, 0.2}));
    EXPECT_EQ(vals[r.h.inter].item(), 0.0);
    EXPECT_NEAR(vals[r.h.uni].item(), 0.08, 1e-12);
    EXPECT_NEAR(vals[r.h.margin].item(), -0.04, 1e-12);
  }
  {
    auto r = iou_graph({1, 1, 2, 2}, 0.5);
    auto vals = evaluate(r.g, as_input({0, 0, 2, 2}));
    EXPECT_NEAR(vals[r.h.inter].item(), 1.0, 1e-12);
    EXPECT_NEAR(vals[r.h.uni].item(), 7.0, 1e-12);
    EXPECT_NEAR(vals[r.h.inter].item() / vals[r.h.uni].item(), 1.0 / 7.0, 1e-12);
    EXPECT_NEAR(vals[r.h.margin].item(), -2.5, 1e-12);
  }
}

TEST(IoUMargin, RejectsDegenerateInputs) {
  EXPECT_THROW(iou_graph({0.1, 0.1, 0.0, 0.3}, 0.5), std::invalid_argument);
  EXPECT_THROW(iou_graph({0.1, 0.1, 0.2, 0.3}, 1.0), std::invalid_argument);
  EXPECT_THROW(iou_graph({0.1, 0.1, 0.2, 0.3}, 0.0), std::invalid_argument);
}

TEST(IoUMargin, MatchesDirectFormulaOnRandomPairs) {
  std::mt19937_64 rng(1234);
  std::uniform_real_distribution<double> pos(0.0, 1.0), ext(0.0, 0.6), tau_d(0.05, 0.95);
  for (int i = 0; i < 10000; ++i) {
    BoundingBox gt{pos(rng), pos(rng), 0.01 + ext(rng), 0.01 + ext(rng)};
    BoundingBox det{pos(rng), pos(rng), ext(rng), ext(rng)};
    if (i % 10 == 0) det = {gt.x + 0.05 * (pos(rng) - 0.5), gt.y, gt.w, gt.h * (0.8 + 0.4 * pos(rng))};
    const double tau = tau_d(rng);
    auto r = iou_graph(gt, tau);
    auto vals = evaluate(r.g, as_input(det));
    auto want = direct_iou_margin(det, gt, tau);
    const double inter = vals[r.h.inter].item(), uni = vals[r.h.uni].item();
    ASSERT_NEAR(vals[r.h.margin].item(), want.margin, 1e-9);
    ASSERT_NEAR(uni, gt.area() + det.area() - inter, 1e-9);
    ASSERT_GE(inter, 0.0);
    ASSERT_LE(inter, std::min(gt.area(), det.area()) + 1e-9);
    ASSERT_GE(vals[r.h.w].item(), 0.0);
    ASSERT_GE(vals[r.h.h].item(), 0.0);
  }
}

TEST(Binarizer, ValuesAndSymmetry) {
  ComputeGraph g;
  NodeId x = g.add_input({1});
  NodeId s = build_binarizer(g, x, 1000.0);
  EXPECT_EQ(evaluate(g, Tensor::scalar(0.0))[s].item(), 0.5);
  EXPECT_NEAR(evaluate(g, Tensor::scalar(-0.005))[s].item(), 1.0 / (1.0 + std::exp(5.0)), 1e-15);
  EXPECT_NEAR(1.0 / (1.0 + std::exp(5.0)), 0.00669, 1e-5);
  double prev = -1.0;
  for (int i = -1000; i <= 1000; ++i) {
    const double v = i * 1e-5;
    const double sv = sigmoid(1000.0, v);
    EXPECT_GT(sv, prev);
    EXPECT_NEAR(sv + sigmoid(1000.0, -v), 1.0, 1e-12);
    EXPECT_GT(sv, 0.0);
    EXPECT_LT(sv, 1.0);
    prev = sv;
  }
  EXPECT_THROW(build_binarizer(g, x, 0.0), std::invalid_argument);
  EXPECT_THROW(build_binarizer(g, x, -1.0), std::invalid_argument);
}

TEST(Binarizer, SharperWithSlope) {
  // Distance to the unit step at x = +-0.01 shrinks as the slope grows.
  double prev = 1.0;
  for (double slope : {1.0, 10.0, 100.0, 1000.0}) {
    const double gap = std::max(1.0 - sigmoid(slope, 0.01), sigmoid(slope, -0.01));
    EXPECT_LT(gap, prev);
    prev = gap;
  }
}

struct HeadGraph {
  ComputeGraph g;
  std::vector<std::array<NodeId, 4>> dets;
};

HeadGraph boxes_as_input(std::size_t n) {
  HeadGraph r;
  NodeId in = r.g.add_input({4 * n});
  for (std::size_t i = 0; i < n; ++i) {
    std::array<NodeId, 4> d{};
    for (std::size_t k = 0; k < 4; ++k) d[k] = r.g.add_slice(in, 4 * i + k, 4 * i + k + 1);
    r.dets.push_back(d);
  }
  return r;
}

TEST(MatchingHead, SingleExactMatch) {
  auto r = boxes_as_input(1);
  GroundTruthSet gts{{{0.2, 0.2, 0.4, 0.4}, 0}};
  auto m = build_matching_head(r.g, r.dets, gts, 0.5, 1000.0);
  auto vals = evaluate(r.g, Tensor::vector({0.2, 0.2, 0.4, 0.4}));
  // margin 0.08 * slope 1000 = 80
  EXPECT_NEAR(vals[m.z[0][0]].item(), 1.0 / (1.0 + std::exp(-80.0)), 1e-15);
  EXPECT_NEAR(vals[m.at_least_one].item(), 0.5, 1e-12);
}

TEST(MatchingHead, DisjointBoxes) {
  auto r = boxes_as_input(1);
  GroundTruthSet gts{{{0.5, 0.5, 0.2, 0.2}, 0}};
  auto m = build_matching_head(r.g, r.dets, gts, 0.5, 1000.0);
  auto vals = evaluate(r.g, Tensor::vector({0, 0, 0.2, 0.2}));
  // margin -0.04 * 1000 = -40
  EXPECT_NEAR(vals[m.z[0][0]].item(), 1.0 / (1.0 + std::exp(40.0)), 1e-20);
  EXPECT_NEAR(vals[m.at_least_one].item(), -0.5, 1e-12);
}

TEST(MatchingHead, TwoDetectionsTwoGroundTruths) {
  auto r = boxes_as_input(2);
  GroundTruthSet gts{{{0.1, 0.1, 0.2, 0.2}, 0}, {{0.6, 0.6, 0.3, 0.3}, 1}};
  auto m = build_matching_head(r.g, r.dets, gts, 0.5, 1000.0);
  auto vals = evaluate(r.g, Tensor::vector({0.1, 0.1, 0.2, 0.2, 0.6, 0.6, 0.3, 0.3}));
  // smaller box: self margin 0.02, so z = S(20) and the sums sit 2e-9 below 1
  for (NodeId s : m.row_sums) EXPECT_NEAR(vals[s].item(), 1.0, 1e-8);
  for (NodeId s : m.col_sums) EXPECT_NEAR(vals[s].item(), 1.0, 1e-8);
  for (NodeId s : m.row_margins) EXPECT_NEAR(vals[s].item(), 0.5, 1e-8);
  for (NodeId s : m.col_margins) EXPECT_NEAR(vals[s].item(), 0.5, 1e-8);
  EXPECT_LT(vals[m.z[0][1]].item(), 1e-8);
  EXPECT_LT(vals[m.z[1][0]].item(), 1e-8);
}

struct CountGraph {
  ComputeGraph g;
  CountHeadHandle c;
};

CountGraph count_graph(std::size_t n, std::size_t d) {
  CountGraph r;
  NodeId in = r.g.add_input({n});
  std::vector<NodeId> obj;
  for (std::size_t i = 0; i < n; ++i) obj.push_back(r.g.add_slice(in, i, i + 1));
  r.c = build_count_head(r.g, obj, d, 1000.0, 0.5);
  return r;
}

TEST(CountHead, OnePositiveOfTwo) {
  auto r = count_graph(2, 1);
  auto vals = evaluate(r.g, Tensor::vector({0.9, 0.1}));
  EXPECT_NEAR(vals[r.c.count].item(), 1.0, 1e-12);
  EXPECT_NEAR(vals[r.c.lower_margin].item(), 0.5, 1e-12);
  EXPECT_NEAR(vals[r.c.upper_margin].item(), 0.5, 1e-12);
}

TEST(CountHead, TooManyPositives) {
  auto r = count_graph(2, 1);
  auto vals = evaluate(r.g, Tensor::vector({0.9, 0.9}));
  EXPECT_NEAR(vals[r.c.count].item(), 2.0, 1e-12);
  EXPECT_NEAR(vals[r.c.upper_margin].item(), -0.5, 1e-12);
}

TEST(CountHead, NoObjects) {
  auto r = count_graph(2, 0);
  auto vals = evaluate(r.g, Tensor::vector({0.01, 0.02}));
  EXPECT_NEAR(vals[r.c.count].item(), 0.0, 1e-12);
  EXPECT_NEAR(vals[r.c.lower_margin].item(), 0.5, 1e-12);
  EXPECT_NEAR(vals[r.c.upper_margin].item(), 0.5, 1e-12);
}

TEST(EncodeQuery, MisclassificationMargins) {
  auto model = testing::affine_detector(4, {0.2, 0.2, 0.4, 0.4}, {0.1, 0.3, 0.9}, {0.9}, 0.0);
  DetectionHeadSpec head{1, 3};
  GroundTruthSet gts{{{0.2, 0.2, 0.4, 0.4}, 2}};
  EncodeOptions opt;
  opt.epsilon = 0.05;
  auto q = encode_query(AttackKind::Misclassification, model, head, Tensor::vector({0.5, 0.5, 0.5, 0.5}), gts, opt);
  ASSERT_EQ(q.margins.size(), 2u);
  auto m = evaluate_margins(q, q.region.center);
  EXPECT_NEAR(m[0], 0.8, 1e-12);
  EXPECT_NEAR(m[1], 0.6, 1e-12);
}

TEST(EncodeQuery, MislocalizationCenterMarginIsCleanIoUMargin) {
  const BoundingBox predicted{0.25, 0.2, 0.4, 0.35};
  auto model = testing::affine_detector(6, {predicted.x, predicted.y, predicted.w, predicted.h}, {}, {0.8}, 0.0);
  DetectionHeadSpec head{1, 0};
  GroundTruthSet gts{{{0.2, 0.2, 0.4, 0.4}, 0}};
  EncodeOptions opt;
  opt.epsilon = 0.01;
  auto q = encode_query(AttackKind::Mislocalization, model, head, Tensor(Shape{6}, 0.5), gts, opt);
  ASSERT_EQ(q.margins, std::vector<std::string>{"iou_gt0"});
  auto want = direct_iou_margin(predicted, gts[0].box, 0.5);
  EXPECT_NEAR(evaluate_margins(q, q.region.center)[0], want.margin, 1e-12);
  EXPECT_FALSE(q.uses_binarizer);
}

TEST(EncodeQuery, RejectsBadParameters) {
  auto model = testing::affine_detector(2, {0.2, 0.2, 0.4, 0.4}, {0.1, 0.9}, {0.9}, 0.0);
  DetectionHeadSpec head{1, 2};
  GroundTruthSet gts{{{0.2, 0.2, 0.4, 0.4}, 1}};
  EncodeOptions opt;
  opt.tau = 1.5;
  EXPECT_THROW(encode_query(AttackKind::Mislocalization, model, head, Tensor(Shape{2}, 0.5), gts, opt),
               std::invalid_argument);
  EXPECT_THROW(attack_kind_from_string("teleportation"), std::invalid_argument);
  opt.tau = 0.5;
  GroundTruthSet bad_label{{{0.2, 0.2, 0.4, 0.4}, 5}};
  EXPECT_THROW(encode_query(AttackKind::Misclassification, model, head, Tensor(Shape{2}, 0.5), bad_label, opt),
               std::invalid_argument);
}

TEST(EncodeQuery, MisdetectionWithoutObjects) {
  auto model = testing::affine_detector(3, {0.1, 0.1, 0.2, 0.2, 0.5, 0.5, 0.2, 0.2}, {}, {0.05, 0.1}, 0.0);
  DetectionHeadSpec head{2, 0};
  EncodeOptions opt;
  auto q = encode_query(AttackKind::Misdetection, model, head, Tensor(Shape{3}, 0.5), {}, opt);
  EXPECT_TRUE(q.uses_binarizer);
  for (double m : evaluate_margins(q, q.region.center)) EXPECT_NEAR(m, 0.5, 1e-12);
}

// A correctly detecting model yields strictly positive margins at the region centre for
// every attack kind.
TEST(EncodeQuery, CenterConsistencyOnCorrectModels) {
  std::mt19937_64 rng(808);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 3, classes = 3;
    GroundTruthSet gts;
    std::vector<double> boxes, logits, obj;
    for (std::size_t i = 0; i < n; ++i) {
      // disjoint columns so each prediction overlaps exactly one truth
      const double x0 = (static_cast<double>(i) + 0.1) / static_cast<double>(n);
      BoundingBox gt{x0, 0.1 + 0.3 * u(rng), 0.5 / static_cast<double>(n), 0.2 + 0.3 * u(rng)};
      const int label = static_cast<int>(testing::pick(rng, 0, classes - 1));
      gts.push_back({gt, label});
      boxes.insert(boxes.end(), {gt.x + 0.02 * gt.w * (u(rng) - 0.5), gt.y, gt.w * (0.95 + 0.1 * u(rng)), gt.h});
      for (std::size_t c = 0; c < classes; ++c) logits.push_back(static_cast<int>(c) == label ? 2.0 : -1.0 + u(rng));
      obj.push_back(0.7 + 0.3 * u(rng));
    }
    std::shuffle(gts.begin(), gts.end(), rng);
    auto model = testing::affine_detector(5, boxes, logits, obj, 0.01, trial);
    DetectionHeadSpec head{n, classes};
    EncodeOptions opt;
    opt.epsilon = 0.01;
    Tensor image = testing::random_tensor(rng, {5}, 0.5);
    for (auto& v : image.storage()) v += 0.5;
    for (auto kind : {AttackKind::Misclassification, AttackKind::Mislocalization, AttackKind::Misdetection}) {
      auto q = encode_query(kind, model, head, image, gts, opt);
      for (double m : evaluate_margins(q, q.region.center)) EXPECT_GT(m, 0.0) << to_string(kind) << " trial " << trial;
    }
  }
}

TEST(Vnnlib, BoundsAndNegatedConjunction) {
  ComputeGraph g;
  NodeId x = g.add_input({2});
  g.set_output("m0", g.add_sum(x));
  VerificationQuery q;
  q.graph = g;
  q.region = InputRegion::linf(Tensor::vector({0.5, 0.5}), 0.1);
  q.margins = {"m0"};
  const std::string text = export_vnnlib(q);
  EXPECT_NE(text.find("(assert (>= X_0 0.4))"), std::string::npos) << text;
  EXPECT_NE(text.find("(assert (<= X_0 0.6))"), std::string::npos) << text;
  EXPECT_NE(text.find("(assert (>= X_1 0.4))"), std::string::npos);
  EXPECT_NE(text.find("(assert (<= Y_0 0.0))"), std::string::npos);
  EXPECT_EQ(text.find("(or"), std::string::npos);
  EXPECT_EQ(text, export_vnnlib(q));

  q.graph.set_output("m1", q.graph.add_relu(x));
  q.graph.set_output("m1", q.graph.add_slice(q.graph.output("m1"), 0, 1));
  q.margins.push_back("m1");
  const std::string two = export_vnnlib(q);
  EXPECT_NE(two.find("(assert (or\n  (and (<= Y_0 0.0))\n  (and (<= Y_1 0.0))\n))"), std::string::npos) << two;
}

}  // namespace
}  // namespace odv
