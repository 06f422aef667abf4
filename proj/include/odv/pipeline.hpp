#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "odv/dataset.hpp"
#include "odv/encoder.hpp"
#include "odv/model_io.hpp"
#include "odv/verifier.hpp"

namespace odv {

struct SweepEntry {
  double epsilon = 0.0;
  Verdict verdict;
};

struct SweepOptions {
  std::vector<double> probes{1e-4, 1e-3, 1e-2};
  double expand_factor = 3.0;   // upward steps when no probe is falsified
  double max_epsilon = 0.5;
  double shrink_factor = 10.0;  // downward steps when no probe is verified
  double min_epsilon = 1e-7;
  bool bisect = true;
  double relative_width = 0.25;  // stop once (hi - lo) / lo <= this
  VerifyOptions verify{.max_subproblems = 1000, .timeout_seconds = 120.0};
};

struct SweepResult {
  std::vector<SweepEntry> entries;  // in the order they were run
  std::optional<double> verified_max;     // largest verified epsilon below falsified_min
  std::optional<double> falsified_min;
  bool coherent = true;  // no verified epsilon above a falsified one

  /// Smallest non-verified radius above verified_max and largest non-falsified radius
  /// below falsified_min; equal to the bracket when no Unknown lies inside it.
  std::pair<std::optional<double>, std::optional<double>> edges() const {
    std::optional<double> up, down;
    for (const auto& e : entries) {
      if (verified_max && e.epsilon > *verified_max && e.verdict.status != VerdictStatus::Verified &&
          (!up || e.epsilon < *up))
        up = e.epsilon;
      if (falsified_min && e.epsilon < *falsified_min && e.verdict.status != VerdictStatus::Falsified &&
          (!down || e.epsilon > *down))
        down = e.epsilon;
    }
    return {up, down};
  }

  /// Both edges of the verified/falsified transition resolved to `relative_width`.
  bool edges_resolved(double relative_width) const {
    const auto [up, down] = edges();
    return up && down && (*up - *verified_max) / *verified_max <= relative_width &&
           (*falsified_min - *down) / *down <= relative_width;
  }

  /// The whole bracket is within `relative_width`.
  bool localized(double relative_width) const {
    return verified_max && falsified_min && (*falsified_min - *verified_max) / *verified_max <= relative_width;
  }

  std::vector<const SweepEntry*> sorted() const {
    std::vector<const SweepEntry*> out;
    for (const auto& e : entries) out.push_back(&e);
    std::stable_sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->epsilon < b->epsilon; });
    return out;
  }
};

inline void summarize(SweepResult& r) {
  r.verified_max.reset();
  r.falsified_min.reset();
  for (const auto& e : r.entries)
    if (e.verdict.status == VerdictStatus::Falsified && (!r.falsified_min || e.epsilon < *r.falsified_min))
      r.falsified_min = e.epsilon;
  r.coherent = true;
  for (const auto& e : r.entries) {
    if (e.verdict.status != VerdictStatus::Verified) continue;
    if (r.falsified_min && e.epsilon >= *r.falsified_min) {
      r.coherent = false;
      continue;
    }
    if (!r.verified_max || e.epsilon > *r.verified_max) r.verified_max = e.epsilon;
  }
}

/// Verdicts over a range of radii for one sample: probes, then outward steps until both
/// sides are seen, then geometric bisection of each edge of the verified/falsified
/// bracket. Unknown verdicts inside the bracket split it into two edges.
inline SweepResult epsilon_sweep(const ComputeGraph& model, const DetectionHeadSpec& head, const Sample& sample,
                                 AttackKind kind, EncodeOptions enc, const SweepOptions& opt) {
  SweepResult r;
  auto run = [&](double eps) {
    for (const auto& e : r.entries)
      if (e.epsilon == eps) return;
    enc.epsilon = eps;
    auto q = encode_query(kind, model, head, sample.image, sample.objects, enc);
    r.entries.push_back({eps, verify(q, opt.verify)});
    summarize(r);
  };
  auto probes = opt.probes;
  std::sort(probes.begin(), probes.end());
  for (double e : probes) run(e);

  if (!r.falsified_min && !probes.empty()) {
    for (double e = probes.back() * opt.expand_factor; !r.falsified_min; e *= opt.expand_factor) {
      run(std::min(e, opt.max_epsilon));
      if (e >= opt.max_epsilon) break;
    }
  }
  if (!r.verified_max && !probes.empty()) {
    const double ceiling = r.falsified_min.value_or(probes.front());
    for (double e = std::min(probes.front(), ceiling) / opt.shrink_factor; !r.verified_max && e >= opt.min_epsilon;
         e /= opt.shrink_factor)
      run(e);
  }
  if (opt.bisect) {
    while (r.verified_max && r.falsified_min && r.coherent) {
      const auto [up, down] = r.edges();
      const double gap_lo = std::log(*up / *r.verified_max), gap_hi = std::log(*r.falsified_min / *down);
      const bool lo_open = (*up - *r.verified_max) / *r.verified_max > opt.relative_width;
      const bool hi_open = (*r.falsified_min - *down) / *down > opt.relative_width;
      if (!lo_open && !hi_open) break;
      const std::size_t before = r.entries.size();
      if (lo_open && (!hi_open || gap_lo >= gap_hi)) {
        run(std::sqrt(*r.verified_max * *up));
      } else {
        run(std::sqrt(*down * *r.falsified_min));
      }
      if (r.entries.size() == before) break;
    }
  }
  return r;
}

// ---- overlays ----

struct Rgb {
  unsigned char r, g, b;
};

inline constexpr Rgb kGreen{0, 255, 0};
inline constexpr Rgb kRed{255, 0, 0};

struct Overlay {
  BoundingBox box;
  Rgb colour;
};

/// Grayscale [1, H, W] image upscaled by `scale` with box outlines, as binary PPM.
inline std::string render_ppm(const Tensor& image, std::size_t height, std::size_t width,
                              const std::vector<Overlay>& boxes, std::size_t scale = 8) {
  const std::size_t H = height * scale, W = width * scale;
  std::vector<Rgb> px(H * W);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const double v = std::clamp(image[(r / scale) * width + (c / scale)], 0.0, 1.0);
      const auto g = static_cast<unsigned char>(std::lround(v * 200.0));  // keep pure colours distinct
      px[r * W + c] = {g, g, g};
    }
  auto to_px = [](double v, std::size_t n) {
    return static_cast<std::ptrdiff_t>(std::lround(v * static_cast<double>(n)));
  };
  for (const auto& o : boxes) {
    const auto x0 = std::clamp<std::ptrdiff_t>(to_px(o.box.x, W), 0, static_cast<std::ptrdiff_t>(W) - 1);
    const auto y0 = std::clamp<std::ptrdiff_t>(to_px(o.box.y, H), 0, static_cast<std::ptrdiff_t>(H) - 1);
    const auto x1 = std::clamp<std::ptrdiff_t>(to_px(o.box.x + o.box.w, W) - 1, x0, static_cast<std::ptrdiff_t>(W) - 1);
    const auto y1 = std::clamp<std::ptrdiff_t>(to_px(o.box.y + o.box.h, H) - 1, y0, static_cast<std::ptrdiff_t>(H) - 1);
    for (auto c = x0; c <= x1; ++c) px[static_cast<std::size_t>(y0) * W + static_cast<std::size_t>(c)] =
        px[static_cast<std::size_t>(y1) * W + static_cast<std::size_t>(c)] = o.colour;
    for (auto r = y0; r <= y1; ++r) px[static_cast<std::size_t>(r) * W + static_cast<std::size_t>(x0)] =
        px[static_cast<std::size_t>(r) * W + static_cast<std::size_t>(x1)] = o.colour;
  }
  std::ostringstream os;
  os << "P6\n" << W << " " << H << "\n255\n";
  for (const auto& p : px) os.put(static_cast<char>(p.r)).put(static_cast<char>(p.g)).put(static_cast<char>(p.b));
  return os.str();
}

// ---- report ----

struct ReportContext {
  const ComputeGraph* model = nullptr;
  DetectionHeadSpec head;
  const Sample* sample = nullptr;
  std::size_t sample_index = 0;
  std::size_t height = 0, width = 0;
  AttackKind kind = AttackKind::Mislocalization;
  EncodeOptions encode;
  std::uint64_t seed = 0;
};

/// Stable digest of every parameter bit in the graph.
inline std::string model_digest(const ComputeGraph& g) {
  std::vector<unsigned char> bytes;
  auto put = [&](double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<unsigned char>(bits >> (8 * i)));
  };
  for (const Node& n : g.nodes()) {
    bytes.push_back(static_cast<unsigned char>(n.kind));
    for (double v : n.weight.values()) put(v);
    for (double v : n.bias.values()) put(v);
    for (double v : n.value.values()) put(v);
    put(n.slope);
  }
  return hex64(fnv1a64(bytes));
}

inline nlohmann::json boxes_json(const std::vector<BoundingBox>& boxes) {
  auto a = nlohmann::json::array();
  for (const auto& b : boxes) a.push_back(box_json(b));
  return a;
}

inline std::string epsilon_tag(double eps) {
  std::ostringstream os;
  os.precision(6);
  os << eps;
  return os.str();
}

/// Writes report.json plus clean.ppm and one witness_<eps>.ppm per falsified radius.
/// Returns the report document.
inline nlohmann::json emit_report(const ReportContext& ctx, const SweepResult& sweep,
                                  const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const auto& s = *ctx.sample;
  std::vector<Overlay> gt_overlays;
  for (const auto& o : s.objects) gt_overlays.push_back({o.box, kGreen});
  std::ofstream(out_dir / "clean.ppm", std::ios::binary | std::ios::trunc)
      << render_ppm(s.image, ctx.height, ctx.width, gt_overlays);

  const auto clean = forward(*ctx.model, s.image);
  std::vector<BoundingBox> clean_boxes;
  for (std::size_t i = 0; i < ctx.head.num_boxes; ++i) clean_boxes.push_back(ctx.head.decode_box(clean, i));

  nlohmann::json canon;
  canon["model_digest"] = model_digest(*ctx.model);
  canon["seed"] = ctx.seed;
  canon["sample"] = {{"index", ctx.sample_index}, {"ground_truth", nlohmann::json::array()}, {"clean_detections", boxes_json(clean_boxes)}};
  for (const auto& o : s.objects)
    canon["sample"]["ground_truth"].push_back({{"box", box_json(o.box)}, {"label", o.label}});
  canon["query"] = {{"kind", to_string(ctx.kind)}, {"tau", ctx.encode.tau}, {"slope", ctx.encode.slope},
                    {"theta", ctx.encode.theta}, {"pixels", ctx.encode.pixels}};
  auto& rows = canon["sweep"] = nlohmann::json::array();
  nlohmann::json timing = nlohmann::json::array();
  for (const SweepEntry* e : sweep.sorted()) {
    const Verdict& v = e->verdict;
    nlohmann::json row{{"epsilon", e->epsilon},
                       {"epsilon_hex", hex_float(e->epsilon)},
                       {"verdict", to_string(v.status)},
                       {"reason", to_string(v.reason)},
                       {"subproblems", v.stats.subproblems},
                       {"incomplete_encoding", v.stats.incomplete_encoding}};
    if (v.status == VerdictStatus::Verified) {
      row["certificate"] = {{"root_lower", v.stats.root_lower},
                            {"max_depth", v.stats.max_depth},
                            {"guard_band_exercised", v.stats.guard_band_exercised}};
    }
    if (v.witness) {
      const std::string file = "witness_" + epsilon_tag(e->epsilon) + ".ppm";
      std::vector<Overlay> ov = gt_overlays;
      for (const auto& d : v.detections) ov.push_back({d, kRed});
      std::ofstream(out_dir / file, std::ios::binary | std::ios::trunc)
          << render_ppm(*v.witness, ctx.height, ctx.width, ov);
      nlohmann::json w{{"image", file}, {"margins", v.margins}, {"detections", boxes_json(v.detections)}};
      auto& ious = w["iou_vs_gt"] = nlohmann::json::array();
      for (const auto& d : v.detections) {
        double best = 0.0;
        for (const auto& o : s.objects) best = std::max(best, iou(d, o.box));
        ious.push_back(best);
      }
      auto& hex = w["input_hex"] = nlohmann::json::array();
      for (double x : v.witness->values()) hex.push_back(hex_float(x));
      row["witness"] = std::move(w);
    }
    rows.push_back(std::move(row));
    timing.push_back({{"epsilon", e->epsilon}, {"wall_seconds", v.stats.wall_seconds}});
  }
  auto opt_json = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  const auto [up, down] = sweep.edges();
  canon["transition"] = {{"verified_max", opt_json(sweep.verified_max)},
                         {"falsified_min", opt_json(sweep.falsified_min)},
                         {"first_unverified", opt_json(up)},
                         {"last_unfalsified", opt_json(down)},
                         {"coherent", sweep.coherent}};
  nlohmann::json report{{"schema_version", 1}, {"canonical", canon}, {"timing", timing}};
  std::ofstream(out_dir / "report.json", std::ios::trunc) << report.dump(2) << "\n";
  return report;
}

/// Bytes of the hash-stable part of a report.
inline std::string canonical_bytes(const nlohmann::json& report) { return report.at("canonical").dump(); }

}  // namespace odv
