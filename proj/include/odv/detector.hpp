#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "odv/dataset.hpp"
#include "odv/encoder.hpp"
#include "odv/eval.hpp"
#include "odv/graph.hpp"

namespace odv {

struct DetectorConfig {
  std::size_t channels = 4;
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t hidden = 32;
  std::size_t boxes = 1;
  std::size_t classes = 3;
  double learning_rate = 0.1;
  std::size_t epochs = 1500;
  double box_weight = 4.0;
  double smooth_l1_beta = 0.05;
  std::uint64_t seed = 0;

  DetectionHeadSpec head() const { return {boxes, classes}; }

  nlohmann::json to_json() const {
    return {{"channels", channels}, {"kernel", kernel},         {"stride", stride},
            {"hidden", hidden},     {"boxes", boxes},           {"classes", classes},
            {"learning_rate", learning_rate}, {"epochs", epochs}, {"box_weight", box_weight},
            {"smooth_l1_beta", smooth_l1_beta}, {"seed", seed}};
  }

  static DetectorConfig from_json(const nlohmann::json& j) {
    DetectorConfig c;
    c.channels = j.at("channels");
    c.kernel = j.at("kernel");
    c.stride = j.at("stride");
    c.hidden = j.at("hidden");
    c.boxes = j.at("boxes");
    c.classes = j.at("classes");
    c.learning_rate = j.at("learning_rate");
    c.epochs = j.at("epochs");
    c.box_weight = j.at("box_weight");
    c.smooth_l1_beta = j.at("smooth_l1_beta");
    c.seed = j.at("seed");
    return c;
  }
};

/// Conv -> ReLU -> Affine -> ReLU, then three affine heads. Boxes and objectness pass
/// through Sigmoid(1) so they land in (0, 1).
inline ComputeGraph build_detector(const DetectorConfig& cfg, std::size_t height, std::size_t width) {
  if (cfg.boxes == 0) throw std::invalid_argument("detector needs at least one box");
  std::mt19937_64 rng(cfg.seed);
  auto init = [&](Shape shape, std::size_t fan_in, double gain) {
    Tensor t(std::move(shape));
    const double a = gain * std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-a, a);
    for (double& v : t.storage()) v = u(rng);
    return t;
  };
  ComputeGraph g;
  NodeId x = g.add_input({1, height, width});
  NodeId c = g.add_relu(g.add_conv2d(x, init({cfg.channels, 1, cfg.kernel, cfg.kernel}, cfg.kernel * cfg.kernel, 1.0),
                                     Tensor({cfg.channels}), cfg.stride, cfg.kernel / 2));
  const std::size_t flat = numel(g.node(c).shape);
  NodeId h = g.add_relu(g.add_affine(c, init({cfg.hidden, flat}, flat, 1.0), Tensor({cfg.hidden})));
  auto head = [&](std::size_t out, double bias) {
    return g.add_affine(h, init({out, cfg.hidden}, cfg.hidden, 0.3), Tensor({out}, bias));
  };
  g.set_output("boxes", g.add_sigmoid(head(4 * cfg.boxes, 0.0), 1.0));
  if (cfg.classes > 0) g.set_output("logits", head(cfg.boxes * cfg.classes, 0.0));
  g.set_output("objectness", g.add_sigmoid(head(cfg.boxes, 0.0), 1.0));
  return g;
}

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t epoch, const std::string& what)
      : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

struct TrainMetrics {
  double mean_iou = 0.0;
  double class_accuracy = 0.0;
  double objectness_accuracy = 0.0;
  double final_loss = 0.0;
  std::vector<double> loss_history;  // every 100 epochs

  nlohmann::json to_json() const {
    return {{"mean_iou", mean_iou},
            {"class_accuracy", class_accuracy},
            {"objectness_accuracy", objectness_accuracy},
            {"final_loss", final_loss},
            {"loss_history", loss_history}};
  }
};

struct TrainResult {
  ComputeGraph model;
  TrainMetrics metrics;
};

namespace detail {

struct SampleLoss {
  double loss = 0.0;
  std::vector<std::pair<NodeId, Tensor>> seeds;
};

/// Box i is trained towards object i (objects sorted left to right); boxes beyond
/// the object count are trained towards objectness 0.
inline SampleLoss detector_loss(const ComputeGraph& g, const DetectorConfig& cfg, const Activations& vals,
                                const GroundTruthSet& objects) {
  SampleLoss out;
  const NodeId boxes = g.output("boxes"), obj = g.output("objectness");
  const NodeId obj_logit = g.node(obj).inputs[0];
  Tensor gb(g.node(boxes).shape), go(g.node(obj_logit).shape);
  Tensor gl;
  if (cfg.classes > 0) gl = Tensor(g.node(g.output("logits")).shape);
  const double beta = cfg.smooth_l1_beta;
  for (std::size_t i = 0; i < cfg.boxes; ++i) {
    const bool assigned = i < objects.size();
    const double o = vals[obj][i], t = assigned ? 1.0 : 0.0;
    const double oc = std::clamp(o, 1e-12, 1.0 - 1e-12);
    out.loss -= t * std::log(oc) + (1.0 - t) * std::log(1.0 - oc);
    go[i] = o - t;
    if (!assigned) continue;
    const auto& b = objects[i].box;
    const double target[4] = {b.x, b.y, b.w, b.h};
    for (std::size_t k = 0; k < 4; ++k) {
      const double d = vals[boxes][4 * i + k] - target[k];
      if (std::abs(d) < beta) {
        out.loss += cfg.box_weight * 0.5 * d * d / beta;
        gb[4 * i + k] = cfg.box_weight * d / beta;
      } else {
        out.loss += cfg.box_weight * (std::abs(d) - 0.5 * beta);
        gb[4 * i + k] = cfg.box_weight * (d > 0 ? 1.0 : -1.0);
      }
    }
    if (cfg.classes > 0) {
      const Tensor& l = vals[g.output("logits")];
      const std::size_t base = i * cfg.classes;
      double mx = l[base];
      for (std::size_t c = 1; c < cfg.classes; ++c) mx = std::max(mx, l[base + c]);
      double z = 0.0;
      for (std::size_t c = 0; c < cfg.classes; ++c) z += std::exp(l[base + c] - mx);
      const auto label = static_cast<std::size_t>(objects[i].label);
      out.loss += std::log(z) + mx - l[base + label];
      for (std::size_t c = 0; c < cfg.classes; ++c)
        gl[base + c] = std::exp(l[base + c] - mx) / z - (c == label ? 1.0 : 0.0);
    }
  }
  out.seeds.emplace_back(boxes, std::move(gb));
  out.seeds.emplace_back(obj_logit, std::move(go));
  if (cfg.classes > 0) out.seeds.emplace_back(g.output("logits"), std::move(gl));
  return out;
}

}  // namespace detail

inline TrainMetrics evaluate_detector(const ComputeGraph& g, const DetectorConfig& cfg, const Dataset& ds) {
  TrainMetrics m;
  std::size_t pairs = 0, correct = 0, obj_total = 0, obj_correct = 0;
  double loss = 0.0;
  for (const auto& s : ds.samples) {
    auto vals = evaluate(g, s.image);
    loss += detail::detector_loss(g, cfg, vals, s.objects).loss;
    const auto outs = forward(g, s.image);
    for (std::size_t i = 0; i < cfg.boxes; ++i) {
      const bool assigned = i < s.objects.size();
      obj_correct += (outs.at("objectness")[i] >= 0.5) == assigned;
      ++obj_total;
      if (!assigned) continue;
      m.mean_iou += iou(cfg.head().decode_box(outs, i), s.objects[i].box);
      ++pairs;
      if (cfg.classes > 0) {
        const Tensor& l = outs.at("logits");
        std::size_t best = 0;
        for (std::size_t c = 1; c < cfg.classes; ++c)
          if (l[i * cfg.classes + c] > l[i * cfg.classes + best]) best = c;
        correct += static_cast<int>(best) == s.objects[i].label;
      }
    }
  }
  if (pairs) {
    m.mean_iou /= static_cast<double>(pairs);
    m.class_accuracy = static_cast<double>(correct) / static_cast<double>(pairs);
  }
  if (obj_total) m.objectness_accuracy = static_cast<double>(obj_correct) / static_cast<double>(obj_total);
  if (!ds.samples.empty()) m.final_loss = loss / static_cast<double>(ds.samples.size());
  return m;
}

/// Full-batch gradient descent with a fixed step size.
inline TrainResult train_detector(const DetectorConfig& cfg, const Dataset& ds) {
  if (ds.samples.empty()) throw std::invalid_argument("training set is empty");
  ComputeGraph g = build_detector(cfg, ds.config.height, ds.config.width);
  cfg.head().check(g);
  std::vector<double> history;
  const double scale = 1.0 / static_cast<double>(ds.samples.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<Tensor> gw(g.size()), gbias(g.size());
    double loss = 0.0;
    for (const auto& s : ds.samples) {
      Activations vals;
      try {
        vals = evaluate(g, s.image);
      } catch (const EvaluationError& e) {
        throw TrainingError(epoch, e.what());
      }
      auto sl = detail::detector_loss(g, cfg, vals, s.objects);
      loss += sl.loss;
      auto grads = backward(g, vals, sl.seeds, true);
      for (std::size_t id = 0; id < g.size(); ++id) {
        auto acc = [&](std::vector<Tensor>& dst, const Tensor& src) {
          if (src.empty()) return;
          if (dst[id].empty()) dst[id] = Tensor(src.shape());
          for (std::size_t k = 0; k < src.size(); ++k) dst[id][k] += src[k];
        };
        acc(gw, grads.weight[id]);
        acc(gbias, grads.bias[id]);
      }
    }
    loss *= scale;
    if (!std::isfinite(loss)) throw TrainingError(epoch, "non-finite loss");
    if (epoch % 100 == 0) history.push_back(loss);
    for (std::size_t id = 0; id < g.size(); ++id) {
      Node& n = g.mutable_node(id);
      for (std::size_t k = 0; k < gw[id].size(); ++k) n.weight[k] -= cfg.learning_rate * scale * gw[id][k];
      for (std::size_t k = 0; k < gbias[id].size(); ++k) n.bias[k] -= cfg.learning_rate * scale * gbias[id][k];
    }
  }
  TrainResult r{std::move(g), {}};
  r.metrics = evaluate_detector(r.model, cfg, ds);
  r.metrics.loss_history = std::move(history);
  return r;
}

}  // namespace odv
