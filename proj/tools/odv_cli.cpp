#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "odv/bounds.hpp"
#include "odv/dataset.hpp"
#include "odv/detector.hpp"
#include "odv/encoder.hpp"
#include "odv/falsifier.hpp"
#include "odv/model_io.hpp"
#include "odv/pipeline.hpp"
#include "odv/verifier.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitError = 3;
constexpr int kExitUsage = 64;

struct Globals {
  std::uint64_t seed = 0;
  double timeout = 300.0;
  double tau = 0.5;
  double epsilon = 0.0;
  double slope = 1000.0;
  std::vector<std::size_t> pixels;
  std::string dump_bounds;
};

struct QueryArgs {
  std::string model;
  std::string data;
  std::size_t index = 0;
  std::string kind = "mislocalization";
  std::string out = "odv_out";
  std::size_t threads = 1;
  std::size_t max_subproblems = 0;
};

int exit_code(odv::VerdictStatus s) {
  switch (s) {
    case odv::VerdictStatus::Verified: return 0;
    case odv::VerdictStatus::Falsified: return 1;
    case odv::VerdictStatus::Unknown: return 2;
  }
  return 2;
}

void write_file(const fs::path& p, const std::string& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << bytes;
}

struct Loaded {
  odv::ComputeGraph model;
  odv::DetectionHeadSpec head;
  odv::Dataset data;
};

Loaded load_inputs(const QueryArgs& a) {
  auto lm = odv::load_model_with_metadata(a.model);
  Loaded l{std::move(lm.graph), {}, odv::load_dataset(a.data)};
  if (lm.metadata.contains("detector")) {
    l.head = odv::DetectorConfig::from_json(lm.metadata["detector"]).head();
  } else {
    l.head.num_boxes = lm.metadata.value("num_boxes", std::size_t{1});
    l.head.num_classes = lm.metadata.value("num_classes", std::size_t{3});
  }
  if (a.index >= l.data.samples.size())
    throw std::invalid_argument("sample index " + std::to_string(a.index) + " out of range (" +
                                std::to_string(l.data.samples.size()) + " samples)");
  return l;
}

odv::EncodeOptions encode_options(const Globals& g) {
  odv::EncodeOptions e;
  e.epsilon = g.epsilon;
  e.tau = g.tau;
  e.slope = g.slope;
  e.timeout_seconds = g.timeout;
  e.pixels = g.pixels;
  return e;
}

odv::VerificationQuery make_query(const Loaded& l, const QueryArgs& a, const Globals& g) {
  const auto& s = l.data.samples[a.index];
  return odv::encode_query(odv::attack_kind_from_string(a.kind), l.model, l.head, s.image, s.objects,
                           encode_options(g));
}

odv::VerifyOptions verify_options(const QueryArgs& a, const Globals& g) {
  odv::VerifyOptions o;
  o.threads = a.threads;
  o.max_subproblems = a.max_subproblems;
  o.attack.seed = g.seed;
  o.local.seed = g.seed + 1;
  return o;
}

void dump_bounds(const odv::VerificationQuery& q, const std::string& path) {
  const auto b = odv::compute_bounds(q.graph, q.region);
  json nodes = json::array();
  for (const auto& n : q.graph.nodes()) {
    json lo = json::array(), hi = json::array();
    for (double v : b.lower[n.id].values()) lo.push_back(v);
    for (double v : b.upper[n.id].values()) hi.push_back(v);
    nodes.push_back({{"id", n.id}, {"kind", std::string(odv::to_string(n.kind))}, {"lower", lo}, {"upper", hi}});
  }
  write_file(path, json{{"nodes", nodes}}.dump(2) + "\n");
}

void print_verdict(const odv::Verdict& v) {
  std::cout << odv::to_string(v.status);
  if (v.status == odv::VerdictStatus::Unknown) std::cout << " (" << odv::to_string(v.reason) << ")";
  std::cout << "  subproblems=" << v.stats.subproblems << "\n";
}

void write_witness_artifacts(const Loaded& l, const QueryArgs& a, const odv::Verdict& v, const fs::path& dir) {
  const auto& s = l.data.samples[a.index];
  std::vector<odv::Overlay> ov;
  for (const auto& o : s.objects) ov.push_back({o.box, odv::kGreen});
  for (const auto& d : v.detections) ov.push_back({d, odv::kRed});
  write_file(dir / "witness.ppm", odv::render_ppm(*v.witness, l.data.config.height, l.data.config.width, ov));
}

int cmd_gen_data(const Globals& g, odv::DatasetConfig cfg, const std::string& out) {
  cfg.seed = g.seed;
  auto ds = odv::generate_dataset(cfg);
  odv::save_dataset(ds, out);
  std::cout << "wrote " << ds.samples.size() << " samples to " << out << "\n";
  return 0;
}

int cmd_train(const Globals& g, odv::DetectorConfig cfg, const std::string& data, const std::string& out) {
  cfg.seed = g.seed;
  const auto ds = odv::load_dataset(data);
  auto r = odv::train_detector(cfg, ds);
  json meta{{"detector", cfg.to_json()}, {"dataset", ds.config.to_json()}, {"metrics", r.metrics.to_json()}};
  odv::save_model(r.model, out, meta);
  fs::path metrics = out;
  metrics.replace_extension(".metrics.json");
  write_file(metrics, r.metrics.to_json().dump(2) + "\n");
  std::cout << "mean_iou=" << r.metrics.mean_iou << " class_accuracy=" << r.metrics.class_accuracy
            << " objectness_accuracy=" << r.metrics.objectness_accuracy << "\n";
  return 0;
}

int cmd_verify(const Globals& g, const QueryArgs& a) {
  const auto l = load_inputs(a);
  const auto q = make_query(l, a, g);
  if (!g.dump_bounds.empty()) dump_bounds(q, g.dump_bounds);
  const auto opt = verify_options(a, g);
  const auto v = odv::verify(q, opt);
  const fs::path dir = a.out;
  write_file(dir / "verdict.json", odv::verdict_to_json(v, q, opt).dump(2) + "\n");
  if (v.witness) write_witness_artifacts(l, a, v, dir);
  print_verdict(v);
  return exit_code(v.status);
}

int cmd_attack(const Globals& g, const QueryArgs& a, std::size_t steps, std::size_t restarts) {
  const auto l = load_inputs(a);
  const auto q = make_query(l, a, g);
  odv::PgdOptions p;
  p.steps = steps;
  p.restarts = restarts;
  p.seed = g.seed;
  const auto r = odv::pgd_region(q, p);
  odv::Verdict v;
  v.stats.evaluations = r.evaluations;
  if (r.witness) {
    v.status = odv::VerdictStatus::Falsified;
    v.witness = r.witness;
    v.margins = r.witness_margins;
    v.detections = odv::detail::decode_detections(q, *r.witness);
    write_witness_artifacts(l, a, v, a.out);
  }
  json j = odv::verdict_to_json(v, q, odv::VerifyOptions{});
  j["best_value"] = r.best_value;
  write_file(fs::path(a.out) / "attack.json", j.dump(2) + "\n");
  std::cout << (r.witness ? "Falsified" : "Unknown") << "  best=" << r.best_value << "\n";
  return r.witness ? 1 : 2;
}

int cmd_sweep(const Globals& g, const QueryArgs& a, const std::vector<double>& probes, bool report) {
  const auto l = load_inputs(a);
  odv::SweepOptions so;
  if (!probes.empty()) so.probes = probes;
  so.verify.threads = a.threads;
  if (a.max_subproblems) so.verify.max_subproblems = a.max_subproblems;
  so.verify.timeout_seconds = g.timeout;
  so.verify.attack.seed = g.seed;
  so.verify.local.seed = g.seed + 1;
  const auto kind = odv::attack_kind_from_string(a.kind);
  const auto enc = encode_options(g);
  const auto& s = l.data.samples[a.index];
  const auto r = odv::epsilon_sweep(l.model, l.head, s, kind, enc, so);
  for (const auto* e : r.sorted()) {
    std::printf("eps=%-12.6g %s", e->epsilon, std::string(odv::to_string(e->verdict.status)).c_str());
    if (e->verdict.status == odv::VerdictStatus::Unknown)
      std::printf(" (%s)", std::string(odv::to_string(e->verdict.reason)).c_str());
    std::printf("\n");
  }
  odv::ReportContext ctx{&l.model, l.head, &s, a.index, l.data.config.height, l.data.config.width, kind, enc, g.seed};
  if (report) {
    odv::emit_report(ctx, r, a.out);
    std::cout << "report written to " << a.out << "\n";
  } else {
    json rows = json::array();
    for (const auto* e : r.sorted())
      rows.push_back({{"epsilon", e->epsilon},
                      {"verdict", odv::to_string(e->verdict.status)},
                      {"reason", odv::to_string(e->verdict.reason)}});
    auto opt_json = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    write_file(fs::path(a.out) / "sweep.json",
               json{{"entries", rows},
                    {"verified_max", opt_json(r.verified_max)},
                    {"falsified_min", opt_json(r.falsified_min)},
                    {"coherent", r.coherent}}
                       .dump(2) +
                   "\n");
  }
  return 0;
}

int cmd_export(const Globals& g, const QueryArgs& a, const std::string& out) {
  const auto l = load_inputs(a);
  write_file(out, odv::export_vnnlib(make_query(l, a, g)));
  std::cout << "wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Verification of small object detectors"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--timeout", g.timeout, "Verification budget in seconds")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--tau", g.tau, "IoU threshold")
      ->check(CLI::Validator(
          [](std::string& s) {
            const double t = std::stod(s);
            return t > 0.0 && t < 1.0 ? std::string{} : "tau must lie in (0, 1)";
          },
          "(0,1)"))
      ->capture_default_str();
  app.add_option("--epsilon", g.epsilon, "L-infinity radius")->check(CLI::NonNegativeNumber);
  app.add_option("--slope", g.slope, "Binarizer slope")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--pixels", g.pixels, "Perturbed input indices")->delimiter(',');
  app.add_option("--dump-bounds", g.dump_bounds, "Write per-node intervals of the root region to this file");

  odv::DatasetConfig dcfg;
  std::string data_out;
  bool overlap = false;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic shape dataset");
  gen->add_option("--out", data_out, "Output directory")->required();
  gen->add_option("--height", dcfg.height)->capture_default_str();
  gen->add_option("--width", dcfg.width)->capture_default_str();
  gen->add_option("--samples", dcfg.samples)->capture_default_str();
  gen->add_option("--objects", dcfg.objects)->capture_default_str();
  gen->add_option("--min-objects", dcfg.min_objects, "0 for exactly --objects")->capture_default_str();
  gen->add_option("--min-side", dcfg.min_side)->capture_default_str();
  gen->add_option("--max-side", dcfg.max_side)->capture_default_str();
  gen->add_option("--noise", dcfg.noise)->capture_default_str();
  gen->add_flag("--allow-overlap", overlap);

  odv::DetectorConfig tcfg;
  std::string train_data, model_out;
  auto* train = app.add_subcommand("train", "Train a toy detector");
  train->add_option("--data", train_data)->required();
  train->add_option("--out", model_out, "Model path (stem, .json or .bin)")->required();
  train->add_option("--epochs", tcfg.epochs)->capture_default_str();
  train->add_option("--lr", tcfg.learning_rate)->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--boxes", tcfg.boxes)->capture_default_str();
  train->add_option("--channels", tcfg.channels)->capture_default_str();
  train->add_option("--hidden", tcfg.hidden)->capture_default_str();

  QueryArgs qa;
  auto add_query = [&](CLI::App* sub) {
    sub->add_option("--model", qa.model)->required();
    sub->add_option("--data", qa.data)->required();
    sub->add_option("--index", qa.index, "Sample index")->capture_default_str();
    sub->add_option("--kind", qa.kind)
        ->check(CLI::IsMember({"misclassification", "mislocalization", "misdetection"}))
        ->capture_default_str();
    sub->add_option("--threads", qa.threads)->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--max-subproblems", qa.max_subproblems, "0 for unlimited")->capture_default_str();
  };
  auto* ver = app.add_subcommand("verify", "Branch-and-bound verification of one query");
  add_query(ver);
  ver->add_option("--out", qa.out, "Artifact directory")->capture_default_str();

  std::size_t steps = 200, restarts = 10;
  auto* att = app.add_subcommand("attack", "Gradient search for a counterexample");
  add_query(att);
  att->add_option("--out", qa.out, "Artifact directory")->capture_default_str();
  att->add_option("--steps", steps)->capture_default_str();
  att->add_option("--restarts", restarts)->capture_default_str();

  std::vector<double> probes;
  auto* sw = app.add_subcommand("sweep", "Verdicts over a range of radii");
  add_query(sw);
  sw->add_option("--out", qa.out, "Artifact directory")->capture_default_str();
  sw->add_option("--probes", probes, "Initial radii")->delimiter(',');

  auto* rep = app.add_subcommand("report", "Sweep plus JSON report and overlays");
  add_query(rep);
  rep->add_option("--out", qa.out, "Report directory")->capture_default_str();
  rep->add_option("--probes", probes, "Initial radii")->delimiter(',');

  std::string vnn_out;
  auto* exp = app.add_subcommand("export-vnnlib", "Write the query as a VNN-LIB property");
  add_query(exp);
  exp->add_option("--out", vnn_out, "Output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitUsage;
  }

  try {
    if (*gen) {
      dcfg.non_overlap = !overlap;
      return cmd_gen_data(g, dcfg, data_out);
    }
    if (*train) return cmd_train(g, tcfg, train_data, model_out);
    if (*ver) return cmd_verify(g, qa);
    if (*att) return cmd_attack(g, qa, steps, restarts);
    if (*sw) return cmd_sweep(g, qa, probes, false);
    if (*rep) return cmd_sweep(g, qa, probes, true);
    if (*exp) return cmd_export(g, qa, vnn_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitUsage;
}
