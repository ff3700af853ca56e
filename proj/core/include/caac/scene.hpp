#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace caac {

struct SceneError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Solar/viewing geometry of one observation. Angles in degrees.
struct ViewGeometry {
  double sza_deg = 30.0;   // solar zenith, [0, 70]
  double vza_deg = 0.0;    // viewing zenith, [0, 60]
  double raz_deg = 0.0;    // relative azimuth, [0, 360)
  double cloud_top_km = 1.0;

  void validate() const;
  double mu0() const;  // cos(sza)
};

/// Knobs of the synthetic scene generator and the 3D-effect perturbations.
struct SceneParams {
  double beta = 3.0;        // isotropic power spectrum ~ k^-beta
  double mu_ln = 2.0794415416798357;  // ln 8
  double sigma_ln = 0.8;
  double g = 0.85;          // scattering asymmetry
  double kappa = 0.3;       // shadow/illumination gain
  double eta = 0.5;         // radiative smoothing scale
  double f_clear = 0.2;     // clear-sky pixel fraction
  double tau_max = 158.0;

  void validate() const;
};

/// Ground-truth cloud optical thickness on a regular pixel grid.
struct CotField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> tau;  // row-major, H*W
  double pixel_size_km = 0.1;

  double mean_tau() const;
};

/// Top-of-scene reflectance in [0,1] plus the geometry it was rendered under.
struct RadianceField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> reflectance;  // row-major, H*W
  ViewGeometry geometry;
  double noise_sigma = 0.0;
};

/// Lognormal cloud field from spectral synthesis of a k^-beta Gaussian
/// random field; a fraction f_clear of pixels (contiguous low regions of
/// the same field) is zeroed; values clipped to [0, tau_max].
CotField generate_cot_field(std::uint64_t seed, std::size_t height,
                            std::size_t width, const SceneParams& params,
                            double pixel_size_km = 0.1);

/// Two-stream conservative-scattering reflectance:
/// R = (1-g)*tau / (2*mu0 + (1-g)*tau). Strictly increasing in tau.
double ipa_reflectance(double tau, double mu0, double g);

/// Closed-form inverse of ipa_reflectance (test oracle and LUT reference).
double ipa_reflectance_inverse(double r, double mu0, double g);

/// Per-pixel two-stream rendering with mu0 = cos(sza); no cross-pixel
/// coupling, no noise.
RadianceField render_ipa(const CotField& cot, const ViewGeometry& geom,
                         const SceneParams& params);

/// Cross-pixel perturbations, applied in order: sun-azimuth shadowing,
/// radiative smoothing (Gaussian blur, sigma = eta*sqrt(mean tau) px),
/// view parallax (integer toroidal shift), then clamp to [0,1].
RadianceField apply_3d_effects(const RadianceField& r, const CotField& cot,
                               const ViewGeometry& geom,
                               const SceneParams& params);

/// I.i.d. Gaussian noise, clamped to [0,1]; deterministic in seed.
RadianceField add_noise(const RadianceField& r, double sigma,
                        std::uint64_t seed);

/// Full deterministic scene rendering used by training and evaluation:
/// render_ipa, optional 3D effects, optional noise.
RadianceField render_scene(const CotField& cot, const ViewGeometry& geom,
                           const SceneParams& params, bool with_3d,
                           double noise_sigma, std::uint64_t noise_seed);

/// Toroidal separable Gaussian blur (kernel normalized to sum 1, so the
/// field mean is preserved).
void gaussian_blur_toroidal(std::vector<double>& field, std::size_t h,
                            std::size_t w, double sigma_px);

/// Parallax shift count: round(cloud_top_km * tan(vza) / pixel_size_km).
long parallax_shift_px(const ViewGeometry& geom, double pixel_size_km);

}  // namespace caac
