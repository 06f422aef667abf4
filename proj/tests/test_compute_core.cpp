#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "odv/eval.hpp"
#include "odv/model_io.hpp"
#include "random_graphs.hpp"

namespace odv {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("odv_core_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TEST(Forward, AffineArithmetic) {
  ComputeGraph g;
  NodeId x = g.add_input({1});
  g.set_output("y", g.add_scale(x, 2.0, -1.0));
  EXPECT_EQ(forward(g, Tensor::scalar(0.5)).at("y").item(), 0.0);
}

TEST(Forward, SteepSigmoidAtZeroIsHalf) {
  ComputeGraph g;
  NodeId x = g.add_input({1});
  g.set_output("y", g.add_sigmoid(x, 1000.0));
  EXPECT_EQ(forward(g, Tensor::scalar(0.0)).at("y").item(), 0.5);
}

TEST(Forward, IdentityConvolution) {
  ComputeGraph g;
  NodeId x = g.add_input({2, 3, 3});
  Tensor k({2, 2, 1, 1}, {1, 0, 0, 1});
  g.set_output("y", g.add_conv2d(x, k, Tensor({2}), 1, 0));
  std::mt19937_64 rng(3);
  Tensor in = testing::random_tensor(rng, {2, 3, 3}, 1.0);
  EXPECT_TRUE(forward(g, in).at("y").bit_equal(in));
}

TEST(Forward, ShapeMismatchRejected) {
  ComputeGraph g;
  NodeId x = g.add_input({3});
  g.set_output("y", g.add_relu(x));
  EXPECT_THROW(forward(g, Tensor::vector({1.0, 2.0})), std::invalid_argument);
}

TEST(Forward, NonFiniteIntermediateNamesNode) {
  ComputeGraph g;
  NodeId x = g.add_input({1});
  NodeId big = g.add_scale(x, 1e300);
  NodeId sq = g.add_mul(big, big);
  g.set_output("y", sq);
  try {
    forward(g, Tensor::scalar(10.0));
    FAIL() << "expected an evaluation fault";
  } catch (const EvaluationError& e) {
    EXPECT_EQ(e.node(), sq);
  }
}

TEST(Forward, Deterministic) {
  std::mt19937_64 rng(11);
  auto g = testing::random_graph(rng);
  Tensor in = testing::random_tensor(rng, g.input_shape(), 1.0);
  EXPECT_TRUE(forward(g, in).at("out").bit_equal(forward(g, in).at("out")));
}

TEST(Gradient, SigmoidAtZero) {
  for (double s : {1.0, 10.0, 1000.0}) {
    ComputeGraph g;
    NodeId x = g.add_input({1});
    NodeId y = g.add_sigmoid(x, s);
    EXPECT_DOUBLE_EQ(gradient(g, y, Tensor::scalar(0.0)).item(), s / 4.0);
  }
}

TEST(Gradient, ReluPiecewise) {
  ComputeGraph g;
  NodeId x = g.add_input({1});
  NodeId y = g.add_relu(x);
  EXPECT_EQ(gradient(g, y, Tensor::scalar(3.0)).item(), 1.0);
  EXPECT_EQ(gradient(g, y, Tensor::scalar(-3.0)).item(), 0.0);
  EXPECT_EQ(gradient(g, y, Tensor::scalar(0.0)).item(), 0.0);
}

TEST(Gradient, SquareViaMul) {
  ComputeGraph g;
  NodeId x = g.add_input({1});
  NodeId y = g.add_mul(x, x);
  EXPECT_EQ(gradient(g, y, Tensor::scalar(1.5)).item(), 3.0);
}

TEST(Gradient, NonScalarRejected) {
  ComputeGraph g;
  NodeId x = g.add_input({2});
  NodeId y = g.add_relu(x);
  EXPECT_THROW(gradient(g, y, Tensor::vector({1.0, 2.0})), std::invalid_argument);
}

bool away_from_kinks(const ComputeGraph& g, const Activations& vals, double margin) {
  for (const Node& n : g.nodes()) {
    if (n.kind != OpKind::ReLU) continue;
    for (double v : vals[n.inputs[0]].values())
      if (std::abs(v) < margin) return false;
  }
  return true;
}

TEST(Gradient, MatchesCentralDifferencesOnRandomGraphs) {
  std::mt19937_64 rng(2024);
  int checked = 0;
  while (checked < 50) {
    auto g = testing::random_graph(rng);
    Tensor x;
    bool ok = false;
    for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
      x = testing::random_tensor(rng, g.input_shape(), 1.0);
      ok = away_from_kinks(g, evaluate(g, x), 1e-3);
    }
    if (!ok) continue;
    const NodeId y = g.output("y");
    Tensor grad = gradient(g, y, x);
    const double h = 1e-5;
    for (std::size_t i = 0; i < x.size(); ++i) {
      Tensor xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double fd = (evaluate(g, xp)[y].item() - evaluate(g, xm)[y].item()) / (2 * h);
      const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
      EXPECT_LE(std::abs(fd - grad[i]) / denom, 1e-4) << "graph " << checked << " coord " << i;
    }
    ++checked;
  }
}

TEST(Validate, WellFormedGraphHasNoDiagnostics) {
  std::mt19937_64 rng(5);
  EXPECT_TRUE(validate(testing::random_graph(rng)).empty());
}

TEST(Validate, ReportsCycle) {
  ComputeGraph g;
  NodeId x = g.add_input({1});
  NodeId a = g.add_relu(x);
  NodeId b = g.add_relu(a);
  g.mutable_node(a).inputs = {b};
  auto diags = validate(g);
  ASSERT_FALSE(diags.empty());
  EXPECT_NE(std::find(diags.begin(), diags.end(), "cycle at node " + std::to_string(a)), diags.end());
}

TEST(Validate, ReportsMulShapeMismatch) {
  ComputeGraph g;
  NodeId x = g.add_input({2});
  NodeId y = g.add_input({3});
  NodeId m = g.add_relu(x);
  g.mutable_node(m).kind = OpKind::Mul;
  g.mutable_node(m).inputs = {x, y};
  auto diags = validate(g);
  ASSERT_EQ(diags.size(), 1u);
  EXPECT_NE(diags[0].find("shape mismatch"), std::string::npos);
  EXPECT_THROW(g.add_mul(x, y), std::invalid_argument);
}

TEST(Validate, RejectsBadSlopeAndSlice) {
  ComputeGraph g;
  NodeId x = g.add_input({4});
  EXPECT_THROW(g.add_sigmoid(x, 0.0), std::invalid_argument);
  EXPECT_THROW(g.add_sigmoid(x, -2.0), std::invalid_argument);
  EXPECT_THROW(g.add_slice(x, 2, 5), std::invalid_argument);
}

TEST(ModelIo, RoundTripIsBitExact) {
  auto dir = scratch_dir("roundtrip");
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    testing::RandomGraphOptions opt;
    opt.max_depth = 3;
    auto g = testing::random_graph(rng, opt);
    save_model(g, dir / "m.json");
    auto loaded = load_model(dir / "m.json");
    ASSERT_EQ(loaded.size(), g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Node &a = g.node(i), &b = loaded.node(i);
      EXPECT_EQ(a.kind, b.kind);
      EXPECT_EQ(a.inputs, b.inputs);
      EXPECT_EQ(a.shape, b.shape);
      EXPECT_TRUE(a.weight.bit_equal(b.weight));
      EXPECT_TRUE(a.bias.bit_equal(b.bias));
      EXPECT_TRUE(a.value.bit_equal(b.value));
      EXPECT_EQ(std::bit_cast<std::uint64_t>(a.slope), std::bit_cast<std::uint64_t>(b.slope));
    }
    EXPECT_EQ(loaded.outputs(), g.outputs());
  }
}

TEST(ModelIo, ForwardOutputsSurviveSerialization) {
  auto dir = scratch_dir("forward");
  std::mt19937_64 rng(7);
  auto g = testing::random_graph(rng);
  save_model(g, dir / "m");
  auto loaded = load_model(dir / "m.json");
  for (int i = 0; i < 100; ++i) {
    Tensor x = testing::random_tensor(rng, g.input_shape(), 2.0);
    EXPECT_TRUE(forward(g, x).at("out").bit_equal(forward(loaded, x).at("out")));
  }
}

TEST(ModelIo, EmptyGraphIsIdentity) {
  auto dir = scratch_dir("empty");
  ComputeGraph g;
  NodeId x = g.add_input({3});
  g.set_output("y", x);
  save_model(g, dir / "id.json");
  auto loaded = load_model(dir / "id.json");
  Tensor in = Tensor::vector({0.25, -1.0, 3.0});
  EXPECT_TRUE(forward(loaded, in).at("y").bit_equal(in));
}

void rewrite_manifest(const fs::path& p, const std::function<void(nlohmann::json&)>& edit) {
  nlohmann::json m;
  std::ifstream(p) >> m;
  edit(m);
  std::ofstream(p) << m.dump(2);
}

ModelFormatError::Kind load_error_kind(const fs::path& p, std::string* message = nullptr) {
  try {
    load_model(p);
  } catch (const ModelFormatError& e) {
    if (message) *message = e.what();
    return e.kind();
  }
  ADD_FAILURE() << "load unexpectedly succeeded";
  return ModelFormatError::Kind::Io;
}

class ModelIoErrors : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    ComputeGraph g;
    NodeId x = g.add_input({2});
    NodeId a = g.add_affine(x, Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2}, {0.5, -0.5}));
    g.set_output("y", g.add_relu(a));
    save_model(g, dir_ / "m.json");
  }
  fs::path dir_;
};

TEST_F(ModelIoErrors, VersionMismatch) {
  rewrite_manifest(dir_ / "m.json", [](auto& m) { m["format_version"] = 2; });
  EXPECT_EQ(load_error_kind(dir_ / "m.json"), ModelFormatError::Kind::VersionMismatch);
}

TEST_F(ModelIoErrors, ChecksumFailure) {
  std::fstream f(dir_ / "m.bin", std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(3);
  f.put('\x7f');
  f.close();
  EXPECT_EQ(load_error_kind(dir_ / "m.json"), ModelFormatError::Kind::ChecksumMismatch);
}

TEST_F(ModelIoErrors, DanglingReference) {
  rewrite_manifest(dir_ / "m.json", [](auto& m) { m["nodes"][2]["inputs"] = {7}; });
  EXPECT_EQ(load_error_kind(dir_ / "m.json"), ModelFormatError::Kind::DanglingReference);
}

TEST_F(ModelIoErrors, MissingWeightOffsetNamesTensor) {
  rewrite_manifest(dir_ / "m.json", [](auto& m) { m["nodes"][1]["bias"]["offset"] = 4096; });
  std::string msg;
  EXPECT_EQ(load_error_kind(dir_ / "m.json", &msg), ModelFormatError::Kind::MissingWeight);
  EXPECT_NE(msg.find("node1.bias"), std::string::npos) << msg;
}

}  // namespace
}  // namespace odv
