#pragma once

#include <filesystem>
#include <string>

#include "caac/baselines.hpp"
#include "caac/model.hpp"
#include "caac/scene.hpp"
#include "caac/trainer.hpp"

namespace caac {

/// Configuration/usage problems; the CLI maps these to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One JSON document configuring the whole pipeline. Unknown keys are
/// rejected; omitted keys take the documented defaults.
struct RunConfig {
  SceneParams scene;

  struct Data {
    std::size_t height = 32;
    std::size_t width = 32;
    double pixel_size_km = 0.1;
    std::size_t n_train = 800;
    std::size_t n_val = 100;
    std::size_t n_test = 100;
    std::uint64_t seed = 0;  // split seed ranges derived from this
    std::vector<ViewGeometry> geometries;  // stored per scene; default 1
    double noise_sigma = 0.0;
    bool apply_3d = false;
  } data;

  CaacConfig model;
  TrainConfig train;
  PixelMlp::Config mlp;

  /// Per-split dataset configs with disjoint seed ranges
  /// (train: [seed, seed+n_train), val, test following).
  DatasetConfig split_config(const std::string& split) const;

  /// Resolved JSON with every default materialized (sorted keys).
  std::string resolved_json() const;
  std::string hash() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig parse_run_config_file(const std::filesystem::path& path);

}  // namespace caac
