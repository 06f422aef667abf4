#pragma once

// Small hand-built detectors for encoder and verifier tests.

#include <random>

#include "odv/encoder.hpp"
#include "random_graphs.hpp"

namespace odv::testing {

/// A detector whose outputs are affine in the input: bias = the given clean outputs,
/// weights uniform in [-sensitivity, sensitivity]. Box and objectness outputs are raw
/// affine values (no squashing) so clean values are exactly the biases at a zero input.
inline ComputeGraph affine_detector(std::size_t input_size, const std::vector<double>& boxes,
                                    const std::vector<double>& logits, const std::vector<double>& objectness,
                                    double sensitivity, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  ComputeGraph g;
  NodeId x = g.add_input({input_size});
  auto head = [&](const std::vector<double>& bias) {
    return g.add_affine(x, random_tensor(rng, {bias.size(), input_size}, sensitivity), Tensor::vector(bias));
  };
  g.set_output("boxes", head(boxes));
  if (!logits.empty()) g.set_output("logits", head(logits));
  g.set_output("objectness", head(objectness));
  return g;
}

}  // namespace odv::testing
