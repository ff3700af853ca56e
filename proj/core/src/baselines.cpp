#include "caac/baselines.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "caac/rng.hpp"

namespace caac {

using nlohmann::json;

std::vector<double> default_tau_grid(double tau_max, std::size_t knots) {
  // knot 0 at exactly zero, the rest log-spaced from tau_min to tau_max
  const double tau_min = 1e-2;
  std::vector<double> grid(knots);
  grid[0] = 0.0;
  const double log_lo = std::log(tau_min), log_hi = std::log(tau_max);
  for (std::size_t i = 1; i < knots; ++i) {
    const double f = static_cast<double>(i - 1) / static_cast<double>(knots - 2);
    grid[i] = std::exp(log_lo + f * (log_hi - log_lo));
  }
  return grid;
}

std::vector<double> default_mu0_grid(std::size_t knots) {
  const double lo = std::cos(70.0 * M_PI / 180.0);
  std::vector<double> grid(knots);
  for (std::size_t i = 0; i < knots; ++i) {
    grid[i] = lo + (1.0 - lo) * static_cast<double>(i) /
                       static_cast<double>(knots - 1);
  }
  return grid;
}

IpaLut build_lut(double g, std::vector<double> tau_grid,
                 std::vector<double> mu0_grid) {
  if (tau_grid.empty() || mu0_grid.empty()) {
    throw LutError("LUT grids must be nonempty");
  }
  if (!std::is_sorted(tau_grid.begin(), tau_grid.end()) ||
      !std::is_sorted(mu0_grid.begin(), mu0_grid.end())) {
    throw LutError("LUT grids must be ascending");
  }
  IpaLut lut;
  lut.g = g;
  lut.tau_grid = std::move(tau_grid);
  lut.mu0_grid = std::move(mu0_grid);
  lut.table.resize(lut.tau_grid.size() * lut.mu0_grid.size());
  for (std::size_t mi = 0; mi < lut.mu0_grid.size(); ++mi) {
    for (std::size_t ti = 0; ti < lut.tau_grid.size(); ++ti) {
      lut.table[mi * lut.tau_grid.size() + ti] =
          ipa_reflectance(lut.tau_grid[ti], lut.mu0_grid[mi], g);
    }
    for (std::size_t ti = 1; ti < lut.tau_grid.size(); ++ti) {
      if (!(lut.entry(mi, ti) > lut.entry(mi, ti - 1))) {
        throw LutError("LUT not strictly increasing along tau axis");
      }
    }
  }
  return lut;
}

namespace {

/// Inverts one mu0 row; returns tau, sets saturated when r >= the row max.
double invert_row(const IpaLut& lut, std::size_t mi, double r,
                  bool& saturated) {
  const auto& taus = lut.tau_grid;
  const std::size_t n = taus.size();
  if (r <= 0.0) return 0.0;
  if (r >= lut.entry(mi, n - 1)) {
    saturated = true;
    return taus.back();
  }
  // binary search for the bracketing pair along the strictly increasing row
  std::size_t lo = 0, hi = n - 1;
  while (hi - lo > 1) {
    const std::size_t mid = (lo + hi) / 2;
    if (lut.entry(mi, mid) <= r) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  const double r0 = lut.entry(mi, lo), r1 = lut.entry(mi, hi);
  const double f = (r - r0) / (r1 - r0);
  return taus[lo] + f * (taus[hi] - taus[lo]);
}

}  // namespace

IpaRetrieval retrieve_ipa(const RadianceField& r, const IpaLut& lut) {
  const double mu0 = r.geometry.mu0();
  const auto& mg = lut.mu0_grid;
  if (mu0 < mg.front() - 1e-12 || mu0 > mg.back() + 1e-12) {
    throw LutError("mu0 " + std::to_string(mu0) + " outside LUT range [" +
                   std::to_string(mg.front()) + ", " +
                   std::to_string(mg.back()) + "]");
  }
  std::size_t lo = 0;
  if (mg.size() > 1) {
    auto it = std::upper_bound(mg.begin(), mg.end(), mu0);
    lo = static_cast<std::size_t>(
        std::clamp<std::ptrdiff_t>(it - mg.begin() - 1, 0,
                                   static_cast<std::ptrdiff_t>(mg.size()) - 2));
  }
  const std::size_t hi = mg.size() > 1 ? lo + 1 : lo;
  const double w =
      (hi == lo) ? 0.0
                 : std::clamp((mu0 - mg[lo]) / (mg[hi] - mg[lo]), 0.0, 1.0);

  IpaRetrieval out;
  out.cot.height = r.height;
  out.cot.width = r.width;
  out.cot.pixel_size_km = 0.1;
  out.cot.tau.resize(r.reflectance.size());
  out.saturated.assign(r.reflectance.size(), 0);
  for (std::size_t i = 0; i < r.reflectance.size(); ++i) {
    const double rv = r.reflectance[i];
    bool sat_lo = false, sat_hi = false;
    const double t_lo = invert_row(lut, lo, rv, sat_lo);
    const double t_hi = (hi == lo) ? t_lo : invert_row(lut, hi, rv, sat_hi);
    out.cot.tau[i] = (1.0 - w) * t_lo + w * t_hi;
    if ((sat_lo && w < 1.0) || (sat_hi && w > 0.0) || (sat_lo && sat_hi)) {
      out.saturated[i] = 1;
    }
  }
  return out;
}

PixelMlp::PixelMlp(Config config, std::uint64_t init_seed) : cfg_(config) {
  Rng rng(mix_seed(init_seed ^ 0x3117ULL));
  const std::size_t in = cfg_.angle_features ? 7 : 1;
  const std::size_t h = cfg_.hidden;
  auto xavier = [&rng](std::size_t fi, std::size_t fo, double scale) {
    const double bound = scale * std::sqrt(6.0 / static_cast<double>(fi + fo));
    std::vector<double> d(fi * fo);
    for (double& v : d) v = rng.uniform(-bound, bound);
    return Tensor({fi, fo}, std::move(d), true);
  };
  w1_ = xavier(in, h, 1.0);
  b1_ = Tensor::zeros({1, h}, true);
  w2_ = xavier(h, h, 1.0);
  b2_ = Tensor::zeros({1, h}, true);
  w3_ = xavier(h, 1, 0.1);
  // start at a nominal corpus mean of log1p(tau); with Adam's ~lr-per-step
  // element updates a zero bias wastes most of a short run on the DC offset
  b3_ = Tensor::full({1, 1}, 2.0, true);
}

std::vector<std::pair<std::string, Tensor>> PixelMlp::named_params() const {
  return {{"w1", w1_}, {"b1", b1_}, {"w2", w2_},
          {"b2", b2_}, {"w3", w3_}, {"b3", b3_}};
}

std::vector<Tensor> PixelMlp::params() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

Tensor PixelMlp::forward_log(Tape& tape, const RadianceField& r) const {
  const std::size_t n = r.reflectance.size();
  const std::size_t in = cfg_.angle_features ? 7 : 1;
  std::vector<double> xdata(n * in);
  const auto feats = angle_features(r.geometry);
  for (std::size_t i = 0; i < n; ++i) {
    // same reparameterization as the attention model's patch inputs
    xdata[i * in] = embed_reflectance(r.reflectance[i]);
    if (cfg_.angle_features) {
      for (std::size_t j = 0; j < 6; ++j) xdata[i * in + 1 + j] = feats[j];
    }
  }
  Tensor x({n, in}, std::move(xdata));
  Tensor h1 = tape.gelu(tape.add_rowvec(tape.matmul(x, w1_), b1_));
  Tensor h2 = tape.gelu(tape.add_rowvec(tape.matmul(h1, w2_), b2_));
  Tensor y = tape.add_rowvec(tape.matmul(h2, w3_), b3_);  // [n x 1]
  return tape.reshape(y, {n});
}

void PixelMlp::load_param_values(
    const std::vector<std::vector<double>>& values) {
  auto ps = params();
  if (values.size() != ps.size()) {
    throw ModelError("mlp checkpoint parameter count mismatch");
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (values[i].size() != ps[i].numel()) {
      throw ModelError("mlp checkpoint parameter length mismatch");
    }
    std::copy(values[i].begin(), values[i].end(), ps[i].data().begin());
  }
}

std::string PixelMlp::config_to_json_string(const Config& c) {
  return json{{"angle_features", c.angle_features},
              {"hidden", c.hidden},
              {"tau_max", c.tau_max}}
      .dump();
}

PixelMlp::Config PixelMlp::config_from_json_string(const std::string& s) {
  json j = json::parse(s);
  Config c;
  c.angle_features = j.at("angle_features").get<bool>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.tau_max = j.at("tau_max").get<double>();
  return c;
}

std::unique_ptr<PixelMlp> load_mlp_checkpoint(
    const std::filesystem::path& path) {
  LoadedCheckpoint ck = read_checkpoint(path);
  if (ck.info.model_kind != "mlp") {
    throw ModelError("checkpoint holds a '" + ck.info.model_kind +
                     "' model, expected 'mlp'");
  }
  auto model = std::make_unique<PixelMlp>(
      PixelMlp::config_from_json_string(ck.info.config_json), 0);
  model->load_param_values(ck.values);
  return model;
}

}  // namespace caac
