#include "caac/scene.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>

#include "caac/fft.hpp"
#include "caac/rng.hpp"

namespace caac {

namespace {

constexpr double kDegToRad = M_PI / 180.0;

double clamp01(double v) { return std::min(std::max(v, 0.0), 1.0); }

}  // namespace

void ViewGeometry::validate() const {
  if (sza_deg < 0.0 || sza_deg > 70.0)
    throw SceneError("solar zenith must lie in [0, 70] deg");
  if (vza_deg < 0.0 || vza_deg > 60.0)
    throw SceneError("viewing zenith must lie in [0, 60] deg");
  if (raz_deg < 0.0 || raz_deg >= 360.0)
    throw SceneError("relative azimuth must lie in [0, 360) deg");
  if (!(cloud_top_km > 0.0))
    throw SceneError("cloud top height must be positive");
}

double ViewGeometry::mu0() const { return std::cos(sza_deg * kDegToRad); }

void SceneParams::validate() const {
  if (!(beta > 0.0)) throw SceneError("spectral slope beta must be positive");
  if (sigma_ln < 0.0) throw SceneError("sigma_ln must be nonnegative");
  if (g < 0.0 || g >= 1.0) throw SceneError("asymmetry g must lie in [0, 1)");
  if (f_clear < 0.0 || f_clear >= 1.0)
    throw SceneError("f_clear must lie in [0, 1)");
  if (!(tau_max > 0.0)) throw SceneError("tau_max must be positive");
}

double CotField::mean_tau() const {
  if (tau.empty()) return 0.0;
  return std::accumulate(tau.begin(), tau.end(), 0.0) /
         static_cast<double>(tau.size());
}

CotField generate_cot_field(std::uint64_t seed, std::size_t height,
                            std::size_t width, const SceneParams& params,
                            double pixel_size_km) {
  params.validate();
  if (!is_power_of_two(height) || !is_power_of_two(width) || height < 8 ||
      width < 8) {
    throw SceneError("scene dimensions must be powers of two >= 8");
  }
  const std::size_t n = height * width;

  // White noise -> spectral k^(-beta/2) filter -> real field.
  Rng rng(mix_seed(seed));
  std::vector<std::complex<double>> buf(n);
  for (std::size_t i = 0; i < n; ++i) buf[i] = {rng.normal(), 0.0};
  fft_2d(buf, height, width, false);
  for (std::size_t r = 0; r < height; ++r) {
    const double ky = (r <= height / 2) ? static_cast<double>(r)
                                        : static_cast<double>(r) -
                                              static_cast<double>(height);
    for (std::size_t c = 0; c < width; ++c) {
      const double kx = (c <= width / 2) ? static_cast<double>(c)
                                         : static_cast<double>(c) -
                                               static_cast<double>(width);
      const double k2 = kx * kx + ky * ky;
      if (k2 == 0.0) {
        buf[r * width + c] = 0.0;
      } else {
        buf[r * width + c] *= std::pow(k2, -params.beta / 4.0);
      }
    }
  }
  fft_2d(buf, height, width, true);

  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = buf[i].real();

  // Normalize to zero mean, unit variance so sigma_ln acts as the log-std.
  double mean = std::accumulate(z.begin(), z.end(), 0.0) /
                static_cast<double>(n);
  double var = 0.0;
  for (double v : z) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double inv_std = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
  for (double& v : z) v = (v - mean) * inv_std;

  CotField out;
  out.height = height;
  out.width = width;
  out.pixel_size_km = pixel_size_km;
  out.tau.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.tau[i] = std::exp(params.mu_ln + params.sigma_ln * z[i]);
  }

  // Thresholding the (correlated) field carves contiguous clear regions.
  if (params.f_clear > 0.0) {
    std::vector<double> sorted(z);
    std::sort(sorted.begin(), sorted.end());
    const std::size_t cut = static_cast<std::size_t>(
        params.f_clear * static_cast<double>(n));
    if (cut > 0) {
      const double threshold = sorted[cut - 1];
      for (std::size_t i = 0; i < n; ++i)
        if (z[i] <= threshold) out.tau[i] = 0.0;
    }
  }

  for (double& t : out.tau) t = std::min(std::max(t, 0.0), params.tau_max);
  return out;
}

double ipa_reflectance(double tau, double mu0, double g) {
  const double a = (1.0 - g) * tau;
  return a / (2.0 * mu0 + a);
}

double ipa_reflectance_inverse(double r, double mu0, double g) {
  if (r <= 0.0) return 0.0;
  if (r >= 1.0)
    throw SceneError("reflectance >= 1 is outside the two-stream range");
  return 2.0 * mu0 * r / ((1.0 - g) * (1.0 - r));
}

RadianceField render_ipa(const CotField& cot, const ViewGeometry& geom,
                         const SceneParams& params) {
  geom.validate();
  const double mu0 = geom.mu0();
  RadianceField out;
  out.height = cot.height;
  out.width = cot.width;
  out.geometry = geom;
  out.reflectance.resize(cot.tau.size());
  for (std::size_t i = 0; i < cot.tau.size(); ++i) {
    out.reflectance[i] = ipa_reflectance(cot.tau[i], mu0, params.g);
  }
  return out;
}

void gaussian_blur_toroidal(std::vector<double>& field, std::size_t h,
                            std::size_t w, double sigma_px) {
  if (sigma_px <= 0.0) return;
  const long radius = std::max(1L, static_cast<long>(std::ceil(4.0 * sigma_px)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (long k = -radius; k <= radius; ++k) {
    const double v = std::exp(-0.5 * (k * k) / (sigma_px * sigma_px));
    kernel[k + radius] = v;
    sum += v;
  }
  for (double& v : kernel) v /= sum;

  const long lh = static_cast<long>(h), lw = static_cast<long>(w);
  std::vector<double> tmp(field.size());
  // rows
  for (long r = 0; r < lh; ++r) {
    for (long c = 0; c < lw; ++c) {
      double acc = 0.0;
      for (long k = -radius; k <= radius; ++k) {
        const long cc = ((c + k) % lw + lw) % lw;
        acc += kernel[k + radius] * field[r * lw + cc];
      }
      tmp[r * lw + c] = acc;
    }
  }
  // columns
  for (long r = 0; r < lh; ++r) {
    for (long c = 0; c < lw; ++c) {
      double acc = 0.0;
      for (long k = -radius; k <= radius; ++k) {
        const long rr = ((r + k) % lh + lh) % lh;
        acc += kernel[k + radius] * tmp[rr * lw + c];
      }
      field[r * lw + c] = acc;
    }
  }
}

long parallax_shift_px(const ViewGeometry& geom, double pixel_size_km) {
  return std::lround(geom.cloud_top_km * std::tan(geom.vza_deg * kDegToRad) /
                     pixel_size_km);
}

RadianceField apply_3d_effects(const RadianceField& r, const CotField& cot,
                               const ViewGeometry& geom,
                               const SceneParams& params) {
  if (r.height != cot.height || r.width != cot.width) {
    throw SceneError("radiance/cot shape mismatch in apply_3d_effects");
  }
  RadianceField out = r;
  const long lh = static_cast<long>(r.height), lw = static_cast<long>(r.width);

  // (1) shadow/illumination: directional derivative of tau along the sun
  // azimuth (+x), normalized to unit max-abs per scene.
  const double tan_sza = std::tan(geom.sza_deg * kDegToRad);
  if (params.kappa != 0.0 && tan_sza != 0.0) {
    std::vector<double> s(cot.tau.size());
    double max_abs = 0.0;
    for (long row = 0; row < lh; ++row) {
      for (long col = 0; col < lw; ++col) {
        const long cp = (col + 1) % lw;
        const long cm = (col - 1 + lw) % lw;
        const double d = 0.5 * (cot.tau[row * lw + cp] - cot.tau[row * lw + cm]);
        s[row * lw + col] = d;
        max_abs = std::max(max_abs, std::abs(d));
      }
    }
    if (max_abs > 0.0) {
      const double gain = params.kappa * tan_sza / max_abs;
      for (std::size_t i = 0; i < out.reflectance.size(); ++i) {
        out.reflectance[i] *= 1.0 + gain * s[i];
      }
    }
  }

  // (2) radiative smoothing
  const double sigma_px = params.eta * std::sqrt(std::max(cot.mean_tau(), 0.0));
  gaussian_blur_toroidal(out.reflectance, r.height, r.width, sigma_px);

  // (3) view parallax: integer shift along the view azimuth, toroidal.
  const long shift = parallax_shift_px(geom, cot.pixel_size_km);
  if (shift != 0) {
    const double raz_rad = geom.raz_deg * kDegToRad;
    const long dx = std::lround(static_cast<double>(shift) * std::cos(raz_rad));
    const long dy = std::lround(static_cast<double>(shift) * std::sin(raz_rad));
    if (dx != 0 || dy != 0) {
      std::vector<double> shifted(out.reflectance.size());
      for (long row = 0; row < lh; ++row) {
        for (long col = 0; col < lw; ++col) {
          const long sr = ((row + dy) % lh + lh) % lh;
          const long sc = ((col + dx) % lw + lw) % lw;
          shifted[sr * lw + sc] = out.reflectance[row * lw + col];
        }
      }
      out.reflectance = std::move(shifted);
    }
  }

  // (4) clamp
  for (double& v : out.reflectance) v = clamp01(v);
  return out;
}

RadianceField add_noise(const RadianceField& r, double sigma,
                        std::uint64_t seed) {
  if (sigma < 0.0) throw SceneError("noise sigma must be nonnegative");
  RadianceField out = r;
  out.noise_sigma = sigma;
  if (sigma == 0.0) return out;
  Rng rng(mix_seed(seed));
  for (double& v : out.reflectance) {
    v = clamp01(v + sigma * rng.normal());
  }
  return out;
}

RadianceField render_scene(const CotField& cot, const ViewGeometry& geom,
                           const SceneParams& params, bool with_3d,
                           double noise_sigma, std::uint64_t noise_seed) {
  RadianceField r = render_ipa(cot, geom, params);
  if (with_3d) r = apply_3d_effects(r, cot, geom, params);
  if (noise_sigma > 0.0) r = add_noise(r, noise_sigma, noise_seed);
  return r;
}

}  // namespace caac
