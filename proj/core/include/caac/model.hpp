#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "caac/scene.hpp"
#include "caac/tensor.hpp"

namespace caac {

struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class AngleMode { Additive, Concat, Off };

std::string angle_mode_name(AngleMode m);
AngleMode angle_mode_from_name(const std::string& s);

struct CaacConfig {
  std::size_t patch = 4;
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t d_ff = 64;
  std::size_t angle_mlp = 32;
  AngleMode angle_mode = AngleMode::Additive;
  bool positional = true;   // fixed sinusoidal codes over token index
  bool predict_log = true;  // network target is log1p(tau)
  double tau_max = 158.0;

  void validate() const;
};

/// Common surface of the learned retrievers (CAAC and the pixel MLP):
/// a differentiable forward to log1p(tau) per pixel plus a decoded
/// prediction.
class Regressor {
 public:
  virtual ~Regressor() = default;

  virtual std::vector<Tensor> params() const = 0;
  virtual std::vector<std::pair<std::string, Tensor>> named_params() const = 0;

  /// Differentiable forward pass; returns an [H*W]-element tensor of
  /// log1p(tau) predictions recorded on the given tape.
  virtual Tensor forward_log(Tape& tape, const RadianceField& r) const = 0;

  /// Decoded prediction: tau = clamp(expm1(y), 0, tau_max).
  CotField predict(const RadianceField& r) const;

  virtual double tau_cap() const = 0;
  virtual std::string kind() const = 0;
};

/// Attention weights captured during a forward pass, for inspection/tests.
struct ForwardTrace {
  // attention[layer][head] is a [T x T] row-stochastic matrix.
  std::vector<std::vector<Tensor>> attention;
};

/// Patch-token self-attention encoder conditioned on viewing geometry via
/// an angle-code MLP; emits per-pixel log1p(tau).
class CaacModel : public Regressor {
 public:
  CaacModel(CaacConfig config, std::uint64_t init_seed);

  const CaacConfig& config() const { return cfg_; }

  std::vector<Tensor> params() const override;
  std::vector<std::pair<std::string, Tensor>> named_params() const override;
  std::size_t param_count() const;

  /// Geometry features [cos sza, sin sza, cos vza, sin vza, cos raz,
  /// sin raz] through a 2-layer MLP to a [1 x d_model] code. Zero (and
  /// unused) when angle_mode is Off.
  Tensor angle_code(Tape& tape, const ViewGeometry& geom) const;

  /// Non-overlapping patches, flattened and linearly projected, plus the
  /// sinusoidal positional code when enabled. [T x d_model].
  Tensor tokenize(Tape& tape, const RadianceField& r) const;

  /// One pre-norm encoder block (multi-head self-attention + feed-forward,
  /// residual around each).
  Tensor encoder_block(Tape& tape, const Tensor& tokens, std::size_t layer,
                       ForwardTrace* trace = nullptr) const;

  Tensor forward_log(Tape& tape, const RadianceField& r) const override;
  Tensor forward_log_traced(Tape& tape, const RadianceField& r,
                            ForwardTrace* trace) const;

  double tau_cap() const override { return cfg_.tau_max; }
  std::string kind() const override { return "caac"; }

  /// Replaces parameter values (checkpoint load / best-snapshot restore).
  void load_param_values(const std::vector<std::vector<double>>& values);

 private:
  struct Layer {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor ff_w1, ff_b1, ff_w2, ff_b2;
  };

  CaacConfig cfg_;
  Tensor patch_w_, patch_b_;
  Tensor angle_w1_, angle_b1_, angle_w2_, angle_b2_;
  std::vector<Layer> layers_;
  Tensor lnf_gain_, lnf_bias_;
  Tensor head_w_, head_b_;
  std::vector<double> positional_;  // [max tokens seen so far] lazily unused
};

std::vector<double> angle_features(const ViewGeometry& geom);

/// Pointwise input reparameterization shared by the learned retrievers:
/// log1p(r / (1.02 - r)) - 1, a monotone map under which the two-stream
/// inversion is nearly linear (centered near the corpus mean).
double embed_reflectance(double r);

/// Scale of the additive sinusoidal positional code (kept below the patch
/// embedding magnitude so content dominates the tokens).
inline constexpr double kPositionScale = 0.25;

/// Nominal ground sampling distance assumed by the view-alignment
/// preprocessing when the sensor does not report one.
inline constexpr double kNominalPixelSizeKm = 0.1;

/// Undo the view-parallax pixel shift implied by the geometry (cloud-top
/// height, vza, raz) so patches align with the cloud column underneath.
/// Toroidal, integer-pixel, the exact inverse of the renderer's shift.
/// Part of the angle conditioning: skipped when angle_mode is off.
std::vector<double> align_to_nadir(const RadianceField& r);

/// Fixed sinusoidal positional code for token index t, width d.
std::vector<double> sinusoidal_position(std::size_t t, std::size_t d);

/// Mean over pixels of (y - log1p(tau))^2.
Tensor loss_mse_log(Tape& tape, const Tensor& pred_log,
                    const CotField& target);

/// Parameter snapshot helpers (used for best-val checkpointing).
std::vector<std::vector<double>> snapshot_params(const Regressor& model);

// ---- CAACCKPT1 checkpoint container ----

struct CheckpointInfo {
  std::string model_kind;           // "caac" | "mlp"
  std::string config_json;          // model config, serialized
  std::string provenance_json;      // free-form training provenance
};

void save_checkpoint(const Regressor& model, const CheckpointInfo& info,
                     const std::filesystem::path& path);

struct LoadedCheckpoint {
  CheckpointInfo info;
  std::vector<std::pair<std::string, Shape>> param_layout;
  std::vector<std::vector<double>> values;
};

LoadedCheckpoint read_checkpoint(const std::filesystem::path& path);

CaacConfig caac_config_from_json_string(const std::string& s);
std::string caac_config_to_json_string(const CaacConfig& c);

/// Rebuilds a CAAC model from a checkpoint (errors on kind mismatch).
std::unique_ptr<CaacModel> load_caac_checkpoint(
    const std::filesystem::path& path);

}  // namespace caac
