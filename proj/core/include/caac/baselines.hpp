#pragma once

#include <cstdint>
#include <vector>

#include "caac/model.hpp"
#include "caac/scene.hpp"

namespace caac {

struct LutError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Forward-model lookup table: reflectance over a tau x mu0 grid, strictly
/// increasing along the tau axis of every mu0 row.
struct IpaLut {
  std::vector<double> tau_grid;   // ascending, tau_grid[0] == 0
  std::vector<double> mu0_grid;   // ascending
  std::vector<double> table;      // |mu0_grid| x |tau_grid|, row-major
  double g = 0.85;

  double entry(std::size_t mu0_idx, std::size_t tau_idx) const {
    return table[mu0_idx * tau_grid.size() + tau_idx];
  }
};

/// Default grids: 256 tau knots (0 then log-spaced to tau_max), 64 mu0
/// knots over [cos 70 deg, 1].
std::vector<double> default_tau_grid(double tau_max = 158.0,
                                     std::size_t knots = 256);
std::vector<double> default_mu0_grid(std::size_t knots = 64);

/// Fills the table via ipa_reflectance and validates monotonicity.
IpaLut build_lut(double g, std::vector<double> tau_grid,
                 std::vector<double> mu0_grid);

struct IpaRetrieval {
  CotField cot;
  std::vector<std::uint8_t> saturated;  // 1 where R >= the row maximum
};

/// Per-pixel inversion: bracketing mu0 rows, binary search + linear
/// interpolation in tau along each, linear blend across mu0. R <= 0 maps
/// to tau = 0; R at or above the row maximum saturates to tau_max.
IpaRetrieval retrieve_ipa(const RadianceField& r, const IpaLut& lut);

/// Angle-blind (optionally angle-aware) per-pixel MLP regressor mapping a
/// single pixel's reflectance to log1p(tau). Widths 32, 32.
class PixelMlp : public Regressor {
 public:
  struct Config {
    bool angle_features = true;  // append the 6 geometry features
    std::size_t hidden = 32;
    double tau_max = 158.0;
  };

  PixelMlp(Config config, std::uint64_t init_seed);

  const Config& config() const { return cfg_; }

  std::vector<Tensor> params() const override;
  std::vector<std::pair<std::string, Tensor>> named_params() const override;
  Tensor forward_log(Tape& tape, const RadianceField& r) const override;
  double tau_cap() const override { return cfg_.tau_max; }
  std::string kind() const override { return "mlp"; }

  void load_param_values(const std::vector<std::vector<double>>& values);

  static Config config_from_json_string(const std::string& s);
  static std::string config_to_json_string(const Config& c);

 private:
  Config cfg_;
  Tensor w1_, b1_, w2_, b2_, w3_, b3_;
};

std::unique_ptr<PixelMlp> load_mlp_checkpoint(
    const std::filesystem::path& path);

}  // namespace caac
