#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "caac/baselines.hpp"
#include "caac/dataset.hpp"
#include "caac/model.hpp"
#include "caac/rng.hpp"

namespace caac {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class AngleStrategy { Multi, Fixed };

struct AngleRange {
  double lo = 0.0;
  double hi = 0.0;
};

struct AngleRanges {
  AngleRange sza{0.0, 60.0};
  AngleRange vza{0.0, 45.0};
  AngleRange raz{0.0, 360.0};
};

struct TrainConfig {
  int epochs = 20;
  std::size_t batch_size = 8;
  double lr = 3e-4;
  std::uint64_t seed = 0;
  AngleStrategy strategy = AngleStrategy::Multi;
  ViewGeometry fixed_geometry;  // used when strategy == Fixed
  AngleRanges ranges;
  double noise_sigma = 0.02;
  bool apply_3d = true;
  double cloud_top_km = 1.0;

  void validate() const;
};

/// Multi strategy: each angle uniform over its range. Fixed strategy: the
/// configured geometry, always.
ViewGeometry sample_geometry(Rng& rng, AngleStrategy strategy,
                             const AngleRanges& ranges,
                             const ViewGeometry& fixed,
                             double cloud_top_km);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::vector<std::vector<double>> best_params;  // snapshot at best val loss
  double best_val_loss = 0.0;
  int best_epoch = 0;
};

/// Online multi-angle training: every epoch re-renders each scene at a
/// freshly sampled geometry (with 3D effects and noise per config), then
/// runs forward/loss/backward/adam. Deterministic in (seed, config,
/// dataset). Throws TrainError with the offending batch seeds on a
/// non-finite loss.
TrainResult train(Regressor& model, const Dataset& train_ds,
                  const Dataset& val_ds, const TrainConfig& config);

// ---- evaluation ----

struct AngleGrid {
  std::vector<double> szas{0, 15, 30, 45, 60};
  std::vector<double> vzas{0, 15, 30, 45};
  std::vector<double> razs{0};
  double cloud_top_km = 1.0;

  std::vector<ViewGeometry> geometries() const;
};

/// Parses "sza=0:60:15,vza=0:45:15[,raz=a:b:c]"; each entry is either a
/// single value or an inclusive start:stop:step sweep.
AngleGrid parse_angle_grid(const std::string& spec);

struct Retrieved {
  CotField cot;
  std::vector<std::uint8_t> saturated;  // may be empty (never saturates)
};

/// A retrieval method under evaluation. The ground truth is passed only so
/// the oracle plumbing check can exist; real retrievers must ignore it.
class Retriever {
 public:
  virtual ~Retriever() = default;
  virtual std::string name() const = 0;
  virtual Retrieved retrieve(const RadianceField& r,
                             const CotField& truth) const = 0;
};

class RegressorRetriever : public Retriever {
 public:
  RegressorRetriever(const Regressor& model, std::string name)
      : model_(&model), name_(std::move(name)) {}
  std::string name() const override { return name_; }
  Retrieved retrieve(const RadianceField& r,
                     const CotField& truth) const override;

 private:
  const Regressor* model_;
  std::string name_;
};

class IpaRetriever : public Retriever {
 public:
  explicit IpaRetriever(const IpaLut& lut) : lut_(&lut) {}
  std::string name() const override { return "ipa"; }
  Retrieved retrieve(const RadianceField& r,
                     const CotField& truth) const override;

 private:
  const IpaLut* lut_;
};

/// Feeds the truth straight through; pipeline plumbing check only.
class OracleRetriever : public Retriever {
 public:
  std::string name() const override { return "oracle"; }
  Retrieved retrieve(const RadianceField& r,
                     const CotField& truth) const override;
};

struct BinStat {
  double lo = 0.0, hi = 0.0;
  double rmse_tau = 0.0, mae_tau = 0.0, rmse_log = 0.0, mean_rel = 0.0;
  std::size_t n_pixels = 0;
};

struct GeomStat {
  ViewGeometry geom;
  double rmse_tau = 0.0, rmse_log = 0.0;
};

struct Metrics {
  std::string method;
  double rmse_tau = 0.0;
  double mae_tau = 0.0;
  double rmse_log = 0.0;
  double mean_rel = 0.0;  // over pixels with truth tau > 0.1
  double flatness = 1.0;  // worst sza-bin RMSE / best sza-bin RMSE
  double saturation_fraction = 0.0;
  std::vector<BinStat> sza_bins;  // 10-degree bins
  std::vector<BinStat> vza_bins;  // 15-degree bins
  std::vector<GeomStat> per_geometry;
  std::size_t n_pixels = 0;
  std::string testset_id;
};

struct EvalOptions {
  bool apply_3d = true;
  double noise_sigma = 0.02;
  std::uint64_t seed = 9090;
  /// Worker threads; 0 = CAAC_THREADS env or hardware concurrency.
  std::size_t threads = 0;
};

/// Stable identifier of a testset: hash of its seeds and generation knobs.
std::string dataset_id(const Dataset& ds);

/// Renders every test scene at every grid geometry, retrieves, and
/// aggregates metrics overall and per angle bin. Deterministic; parallel
/// across (scene, geometry) with a fixed reduction order.
Metrics evaluate(const Retriever& retriever, const Dataset& testset,
                 const AngleGrid& grid, const EvalOptions& opts);

struct ComparisonRow {
  std::string method;
  double rmse_tau = 0.0;
  double rmse_log = 0.0;
  double ratio_to_ref = 0.0;  // rmse_tau(method) / rmse_tau(reference)
  double flatness = 0.0;
};

struct Comparison {
  std::string reference;
  std::string testset_id;
  std::vector<ComparisonRow> rows;
};

/// All inputs must carry the same testset id; the reference defaults to
/// the method named "caac" (first entry if absent).
Comparison compare(const std::vector<Metrics>& metrics,
                   const std::string& reference = "caac");

std::string comparison_table(const Comparison& c);

// ---- CSV interfaces ----

void write_history_csv(const std::filesystem::path& path,
                       const std::vector<EpochRecord>& history,
                       const std::string& config_hash);

void write_metrics_csv(const std::filesystem::path& path, const Metrics& m,
                       const std::string& config_hash);

Metrics read_metrics_csv(const std::filesystem::path& path);

void write_comparison_csv(const std::filesystem::path& path,
                          const Comparison& c);

std::size_t worker_threads(std::size_t requested);

}  // namespace caac
