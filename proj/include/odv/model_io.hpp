#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "odv/graph.hpp"

namespace odv {

inline constexpr int kModelFormatVersion = 1;

/// Load failures. `kind` distinguishes the causes callers may want to react to.
class ModelFormatError : public std::runtime_error {
 public:
  enum class Kind { Io, Parse, VersionMismatch, ChecksumMismatch, DanglingReference, MissingWeight, Invalid };
  ModelFormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

namespace detail {

inline void append_le(std::vector<unsigned char>& blob, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) blob.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

inline double read_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline nlohmann::json write_tensor(const Tensor& t, std::vector<unsigned char>& blob) {
  nlohmann::json j;
  j["shape"] = t.shape();
  j["offset"] = blob.size();
  j["length"] = t.size();
  for (double v : t.values()) append_le(blob, v);
  return j;
}

inline Tensor read_tensor(const nlohmann::json& j, const std::vector<unsigned char>& blob,
                          const std::string& name) {
  Shape shape = j.at("shape").get<Shape>();
  auto offset = j.at("offset").get<std::uint64_t>();
  auto length = j.at("length").get<std::uint64_t>();
  if (length != numel(shape))
    throw ModelFormatError(ModelFormatError::Kind::Invalid,
                           "tensor '" + name + "' length disagrees with its shape");
  if (offset > blob.size() || length * 8 > blob.size() - offset)
    throw ModelFormatError(ModelFormatError::Kind::MissingWeight,
                           "tensor '" + name + "' references bytes [" + std::to_string(offset) + ", " +
                               std::to_string(offset + length * 8) + ") beyond the " +
                               std::to_string(blob.size()) + "-byte weight blob");
  std::vector<double> data(length);
  for (std::size_t i = 0; i < length; ++i) data[i] = read_le(blob.data() + offset + 8 * i);
  return Tensor(std::move(shape), std::move(data));
}

inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

}  // namespace detail

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian doubles). `path` may
/// name either file or the bare stem. `metadata` is stored verbatim in the manifest.
inline void save_model(const ComputeGraph& graph, const std::filesystem::path& path,
                       const nlohmann::json& metadata = nlohmann::json::object()) {
  auto manifest_path = path;
  manifest_path.replace_extension(".json");
  auto blob_path = detail::blob_path_for(manifest_path);

  std::vector<unsigned char> blob;
  nlohmann::json nodes = nlohmann::json::array();
  for (const Node& n : graph.nodes()) {
    nlohmann::json j;
    j["id"] = n.id;
    j["kind"] = std::string(to_string(n.kind));
    j["inputs"] = n.inputs;
    j["shape"] = n.shape;
    switch (n.kind) {
      case OpKind::Const: j["value"] = detail::write_tensor(n.value, blob); break;
      case OpKind::Affine:
        j["weight"] = detail::write_tensor(n.weight, blob);
        j["bias"] = detail::write_tensor(n.bias, blob);
        break;
      case OpKind::Conv2D:
        j["weight"] = detail::write_tensor(n.weight, blob);
        j["bias"] = detail::write_tensor(n.bias, blob);
        j["stride"] = n.stride;
        j["padding"] = n.padding;
        break;
      case OpKind::Sigmoid: {
        // Slopes go through the blob so they round-trip bit-exactly.
        j["slope"] = detail::write_tensor(Tensor::scalar(n.slope), blob);
        break;
      }
      case OpKind::Slice:
        j["begin"] = n.begin;
        j["end"] = n.end;
        break;
      default: break;
    }
    nodes.push_back(std::move(j));
  }
  nlohmann::json outputs = nlohmann::json::array();
  for (const auto& [name, id] : graph.outputs()) outputs.push_back({{"name", name}, {"node", id}});

  nlohmann::json manifest;
  manifest["format_version"] = kModelFormatVersion;
  manifest["weights"] = blob_path.filename().string();
  manifest["weights_bytes"] = blob.size();
  manifest["checksum_fnv1a64"] = hex64(fnv1a64(blob));
  manifest["inputs"] = graph.inputs();
  manifest["outputs"] = std::move(outputs);
  manifest["nodes"] = std::move(nodes);
  manifest["metadata"] = metadata;

  {
    std::ofstream out(blob_path, std::ios::binary);
    if (!out) throw ModelFormatError(ModelFormatError::Kind::Io, "cannot write " + blob_path.string());
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  }
  std::ofstream out(manifest_path);
  if (!out) throw ModelFormatError(ModelFormatError::Kind::Io, "cannot write " + manifest_path.string());
  out << manifest.dump(2) << '\n';
}

struct LoadedModel {
  ComputeGraph graph;
  nlohmann::json metadata;
};

inline LoadedModel load_model_with_metadata(const std::filesystem::path& path) {
  using K = ModelFormatError::Kind;
  auto manifest_path = path;
  manifest_path.replace_extension(".json");
  std::ifstream in(manifest_path);
  if (!in) throw ModelFormatError(K::Io, "cannot open manifest " + manifest_path.string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw ModelFormatError(K::Parse, "malformed manifest: " + std::string(e.what()));
  }

  try {
    if (!m.contains("format_version") || m["format_version"].get<int>() != kModelFormatVersion)
      throw ModelFormatError(K::VersionMismatch,
                             "unsupported format_version " +
                                 (m.contains("format_version") ? m["format_version"].dump() : "<absent>") +
                                 ", expected " + std::to_string(kModelFormatVersion));

    auto blob_path = manifest_path.parent_path() / m.at("weights").get<std::string>();
    std::ifstream bin(blob_path, std::ios::binary);
    if (!bin) throw ModelFormatError(K::Io, "cannot open weights " + blob_path.string());
    std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    if (hex64(fnv1a64(blob)) != m.at("checksum_fnv1a64").get<std::string>())
      throw ModelFormatError(K::ChecksumMismatch, "weight blob checksum mismatch for " + blob_path.string());

    const auto& jnodes = m.at("nodes");
    const std::size_t count = jnodes.size();
    LoadedModel loaded;
    ComputeGraph& g = loaded.graph;
    for (std::size_t k = 0; k < count; ++k) {
      const auto& j = jnodes[k];
      Node n;
      auto kind = op_kind_from_string(j.at("kind").get<std::string>());
      if (!kind) throw ModelFormatError(K::Invalid, "node " + std::to_string(k) + " has unknown kind");
      n.kind = *kind;
      n.inputs = j.at("inputs").get<std::vector<NodeId>>();
      for (NodeId i : n.inputs)
        if (i >= count)
          throw ModelFormatError(K::DanglingReference, "node " + std::to_string(k) +
                                                           " references missing node " + std::to_string(i));
      n.shape = j.at("shape").get<Shape>();
      const std::string tag = "node" + std::to_string(k);
      if (j.contains("value")) n.value = detail::read_tensor(j["value"], blob, tag + ".value");
      if (j.contains("weight")) n.weight = detail::read_tensor(j["weight"], blob, tag + ".weight");
      if (j.contains("bias")) n.bias = detail::read_tensor(j["bias"], blob, tag + ".bias");
      if (j.contains("slope")) n.slope = detail::read_tensor(j["slope"], blob, tag + ".slope").item();
      n.stride = j.value("stride", std::size_t{1});
      n.padding = j.value("padding", std::size_t{0});
      n.begin = j.value("begin", std::size_t{0});
      n.end = j.value("end", std::size_t{0});
      g.push_unchecked(std::move(n));
    }
    g.set_inputs_unchecked(m.at("inputs").get<std::vector<NodeId>>());
    for (const auto& o : m.at("outputs")) {
      auto id = o.at("node").get<NodeId>();
      if (id >= count)
        throw ModelFormatError(K::DanglingReference, "output '" + o.at("name").get<std::string>() +
                                                         "' references missing node " + std::to_string(id));
      g.set_output(o.at("name").get<std::string>(), id);
    }
    auto diags = validate(g);
    if (!diags.empty()) throw ModelFormatError(K::Invalid, "invalid graph: " + diags.front());
    loaded.metadata = m.value("metadata", nlohmann::json::object());
    return loaded;
  } catch (const nlohmann::json::exception& e) {
    throw ModelFormatError(K::Parse, "malformed manifest: " + std::string(e.what()));
  }
}

inline ComputeGraph load_model(const std::filesystem::path& path) {
  return load_model_with_metadata(path).graph;
}

}  // namespace odv
