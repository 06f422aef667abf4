#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "odv/encoder.hpp"
#include "odv/tensor.hpp"

namespace odv {

enum class ShapeKind { Square = 0, Cross = 1, Diagonal = 2 };

inline constexpr std::array<std::string_view, 3> kShapeNames{"square", "cross", "diagonal"};

struct DatasetConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t min_side = 5;
  std::size_t max_side = 8;
  std::size_t objects = 1;      // per image, at most
  std::size_t min_objects = 0;  // 0: exactly `objects`; otherwise uniform in [min_objects, objects]
  bool non_overlap = true;
  double noise = 0.05;      // background values uniform in [0, noise]
  std::size_t samples = 32;
  std::uint64_t seed = 0;

  void check() const {
    if (objects == 0) throw std::invalid_argument("need at least one object per image");
    if (min_objects > objects) throw std::invalid_argument("min_objects exceeds objects");
    if (min_side < 3 || min_side > max_side) throw std::invalid_argument("invalid shape side range");
    if (max_side > height || max_side > width)
      throw std::invalid_argument("shape side " + std::to_string(max_side) + " does not fit a " +
                                  std::to_string(height) + "x" + std::to_string(width) + " image");
    if (!(noise >= 0.0 && noise <= 1.0)) throw std::invalid_argument("noise amplitude must lie in [0, 1]");
  }

  nlohmann::json to_json() const {
    return {{"height", height}, {"width", width},     {"min_side", min_side}, {"max_side", max_side},
            {"objects", objects}, {"min_objects", min_objects}, {"non_overlap", non_overlap}, {"noise", noise}, {"samples", samples},
            {"seed", seed}};
  }
};

struct Sample {
  Tensor image;  // [1, H, W]
  GroundTruthSet objects;
};

struct Dataset {
  DatasetConfig config;
  std::vector<Sample> samples;
};

/// Draws one shape with its top-left corner at pixel (x, y) and returns its exact
/// normalized box.
inline GroundTruth place_shape(Tensor& image, std::size_t height, std::size_t width, ShapeKind kind, std::size_t x,
                               std::size_t y, std::size_t side) {
  if (x + side > width || y + side > height) throw std::invalid_argument("shape does not fit inside the image");
  auto px = [&](std::size_t r, std::size_t c) -> double& { return image[(y + r) * width + (x + c)]; };
  const std::size_t mid = side / 2;
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      bool on = false;
      switch (kind) {
        case ShapeKind::Square: on = r == 0 || c == 0 || r + 1 == side || c + 1 == side; break;
        case ShapeKind::Cross: on = r == mid || c == mid; break;
        case ShapeKind::Diagonal: on = r == c || r == c + 1 || c == r + 1; break;
      }
      if (on) px(r, c) = 1.0;
    }
  const auto H = static_cast<double>(height), W = static_cast<double>(width), s = static_cast<double>(side);
  return {{static_cast<double>(x) / W, static_cast<double>(y) / H, s / W, s / H}, static_cast<int>(kind)};
}

inline Dataset generate_dataset(const DatasetConfig& cfg) {
  cfg.check();
  std::mt19937_64 rng(cfg.seed);
  auto uniform_int = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  Dataset ds{cfg, {}};
  for (std::size_t n = 0; n < cfg.samples; ++n) {
    Sample s{Tensor({1, cfg.height, cfg.width}), {}};
    std::uniform_real_distribution<double> bg(0.0, cfg.noise);
    const std::size_t count = cfg.min_objects ? uniform_int(cfg.min_objects, cfg.objects) : cfg.objects;
    // redraw the whole image when an early shape leaves no room for a later one
    bool complete = false;
    for (int image_attempt = 0; image_attempt < 100 && !complete; ++image_attempt) {
      s.objects.clear();
      for (double& v : s.image.storage()) v = cfg.noise > 0.0 ? bg(rng) : 0.0;
      complete = true;
      for (std::size_t k = 0; k < count && complete; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
          const auto kind = static_cast<ShapeKind>(uniform_int(0, 2));
          const std::size_t side = uniform_int(cfg.min_side, cfg.max_side);
          const std::size_t x = uniform_int(0, cfg.width - side), y = uniform_int(0, cfg.height - side);
          const double W = static_cast<double>(cfg.width), H = static_cast<double>(cfg.height);
          // one pixel of clearance so non-overlapping boxes stay disjoint after drawing
          const BoundingBox padded{(static_cast<double>(x) - 1) / W, (static_cast<double>(y) - 1) / H,
                                   static_cast<double>(side + 2) / W, static_cast<double>(side + 2) / H};
          if (cfg.non_overlap && std::any_of(s.objects.begin(), s.objects.end(),
                                             [&](const GroundTruth& o) { return iou(o.box, padded) > 0.0; }))
            continue;
          s.objects.push_back(place_shape(s.image, cfg.height, cfg.width, kind, x, y, side));
          placed = true;
        }
        complete = placed;
      }
    }
    if (!complete) throw std::runtime_error("could not place " + std::to_string(count) + " non-overlapping shapes");
    std::sort(s.objects.begin(), s.objects.end(),
              [](const GroundTruth& a, const GroundTruth& b) { return a.box.x != b.box.x ? a.box.x < b.box.x : a.box.y < b.box.y; });
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

/// images.bin (little-endian f64, sample-major) and annotations.json.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream bin(dir / "images.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw std::runtime_error("cannot write " + (dir / "images.bin").string());
    for (const auto& s : ds.samples)
      for (double v : s.image.values()) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        unsigned char bytes[8];
        for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
        bin.write(reinterpret_cast<const char*>(bytes), 8);
      }
  }
  nlohmann::json a;
  a["format_version"] = 1;
  a["config"] = ds.config.to_json();
  a["classes"] = kShapeNames;
  a["image_shape"] = {1, ds.config.height, ds.config.width};
  auto& list = a["samples"] = nlohmann::json::array();
  for (std::size_t n = 0; n < ds.samples.size(); ++n) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : ds.samples[n].objects)
      objs.push_back({{"box", {o.box.x, o.box.y, o.box.w, o.box.h}}, {"label", o.label}, {"class", kShapeNames[static_cast<std::size_t>(o.label)]}});
    list.push_back({{"index", n}, {"objects", objs}});
  }
  std::ofstream(dir / "annotations.json", std::ios::trunc) << a.dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream af(dir / "annotations.json");
  if (!af) throw std::runtime_error("cannot read " + (dir / "annotations.json").string());
  nlohmann::json a = nlohmann::json::parse(af);
  Dataset ds;
  const auto& c = a.at("config");
  ds.config.height = c.at("height");
  ds.config.width = c.at("width");
  ds.config.min_side = c.at("min_side");
  ds.config.max_side = c.at("max_side");
  ds.config.objects = c.at("objects");
  ds.config.min_objects = c.value("min_objects", std::size_t{0});
  ds.config.non_overlap = c.at("non_overlap");
  ds.config.noise = c.at("noise");
  ds.config.samples = c.at("samples");
  ds.config.seed = c.at("seed");
  const std::size_t per = ds.config.height * ds.config.width;
  std::ifstream bin(dir / "images.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot read " + (dir / "images.bin").string());
  for (const auto& e : a.at("samples")) {
    Sample s{Tensor({1, ds.config.height, ds.config.width}), {}};
    for (std::size_t i = 0; i < per; ++i) {
      unsigned char bytes[8];
      if (!bin.read(reinterpret_cast<char*>(bytes), 8)) throw std::runtime_error("images.bin is truncated");
      std::uint64_t bits = 0;
      for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(bytes[k]) << (8 * k);
      s.image[i] = std::bit_cast<double>(bits);
    }
    for (const auto& o : e.at("objects")) {
      const auto& b = o.at("box");
      s.objects.push_back({{b[0], b[1], b[2], b[3]}, o.at("label")});
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace odv
