#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "caac/scene.hpp"

namespace caac {

struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Configuration of one dataset file (one split).
struct DatasetConfig {
  std::size_t n_scenes = 0;
  std::size_t height = 32;
  std::size_t width = 32;
  double pixel_size_km = 0.1;
  std::uint64_t seed_start = 0;  // scene i uses seed seed_start + i
  SceneParams scene;
  std::vector<ViewGeometry> geometries;  // radiances stored per scene
  double noise_sigma = 0.0;
  bool apply_3d = false;

  void validate() const;
};

struct Scene {
  std::uint64_t seed = 0;
  CotField cot;
  std::vector<RadianceField> radiances;
};

struct Dataset {
  DatasetConfig config;
  std::vector<Scene> scenes;
};

/// Deterministic generation: scene i = generate_cot_field(seed_start + i),
/// rendered at each configured geometry (3D effects / noise per config).
Dataset generate_dataset(const DatasetConfig& config);

/// CAACDS1 container: 8-byte magic "CAACDS1\n", one UTF-8 JSON metadata
/// line terminated by '\n', then little-endian float32 payloads in declared
/// order (per scene: tau field, then each reflectance field). A sibling
/// "<path>.manifest.json" records seeds and geometries.
void write_dataset(const Dataset& ds, const std::filesystem::path& path);

Dataset load_dataset(const std::filesystem::path& path);

/// Seed set from a dataset's manifest (for split-disjointness audits).
std::vector<std::uint64_t> manifest_seeds(const std::filesystem::path& dataset_path);

/// Hard error if any seed appears in more than one split.
void check_disjoint_seeds(const std::vector<std::vector<std::uint64_t>>& splits);

std::filesystem::path manifest_path(const std::filesystem::path& dataset_path);

}  // namespace caac
