#include "caac/runconfig.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "caac/hash.hpp"

namespace caac {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& context) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw ConfigError("unknown key '" + it.key() + "' in " + context);
    }
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

ViewGeometry geometry_from(const json& j, const std::string& context) {
  check_keys(j, {"sza_deg", "vza_deg", "raz_deg", "cloud_top_km"}, context);
  ViewGeometry g;
  get_if(j, "sza_deg", g.sza_deg);
  get_if(j, "vza_deg", g.vza_deg);
  get_if(j, "raz_deg", g.raz_deg);
  get_if(j, "cloud_top_km", g.cloud_top_km);
  return g;
}

json geometry_json(const ViewGeometry& g) {
  return json{{"sza_deg", g.sza_deg},
              {"vza_deg", g.vza_deg},
              {"raz_deg", g.raz_deg},
              {"cloud_top_km", g.cloud_top_km}};
}

void range_from(const json& j, const char* key, AngleRange& r) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 2) {
    throw ConfigError(std::string("'") + key + "' must be a [lo, hi] pair");
  }
  r.lo = a[0].get<double>();
  r.hi = a[1].get<double>();
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config JSON parse error: ") + e.what());
  }
  check_keys(j, {"scene", "data", "model", "train", "mlp"}, "config root");

  RunConfig cfg;
  if (j.contains("scene")) {
    const auto& s = j.at("scene");
    check_keys(s,
               {"beta", "mu_ln", "sigma_ln", "g", "kappa", "eta", "f_clear",
                "tau_max"},
               "scene");
    get_if(s, "beta", cfg.scene.beta);
    get_if(s, "mu_ln", cfg.scene.mu_ln);
    get_if(s, "sigma_ln", cfg.scene.sigma_ln);
    get_if(s, "g", cfg.scene.g);
    get_if(s, "kappa", cfg.scene.kappa);
    get_if(s, "eta", cfg.scene.eta);
    get_if(s, "f_clear", cfg.scene.f_clear);
    get_if(s, "tau_max", cfg.scene.tau_max);
    cfg.scene.validate();
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d,
               {"height", "width", "pixel_size_km", "n_train", "n_val",
                "n_test", "seed", "geometries", "noise_sigma", "apply_3d"},
               "data");
    get_if(d, "height", cfg.data.height);
    get_if(d, "width", cfg.data.width);
    get_if(d, "pixel_size_km", cfg.data.pixel_size_km);
    get_if(d, "n_train", cfg.data.n_train);
    get_if(d, "n_val", cfg.data.n_val);
    get_if(d, "n_test", cfg.data.n_test);
    get_if(d, "seed", cfg.data.seed);
    get_if(d, "noise_sigma", cfg.data.noise_sigma);
    get_if(d, "apply_3d", cfg.data.apply_3d);
    if (d.contains("geometries")) {
      for (const auto& gj : d.at("geometries")) {
        cfg.data.geometries.push_back(geometry_from(gj, "data.geometries"));
      }
    }
  }
  if (cfg.data.geometries.empty()) {
    cfg.data.geometries.push_back(ViewGeometry{});
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m,
               {"patch", "d_model", "heads", "layers", "d_ff", "angle_mlp",
                "angle_mode", "positional", "predict_log", "tau_max"},
               "model");
    get_if(m, "patch", cfg.model.patch);
    get_if(m, "d_model", cfg.model.d_model);
    get_if(m, "heads", cfg.model.heads);
    get_if(m, "layers", cfg.model.layers);
    get_if(m, "d_ff", cfg.model.d_ff);
    get_if(m, "angle_mlp", cfg.model.angle_mlp);
    if (m.contains("angle_mode")) {
      cfg.model.angle_mode =
          angle_mode_from_name(m.at("angle_mode").get<std::string>());
    }
    get_if(m, "positional", cfg.model.positional);
    get_if(m, "predict_log", cfg.model.predict_log);
    get_if(m, "tau_max", cfg.model.tau_max);
    cfg.model.validate();
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t,
               {"epochs", "batch_size", "lr", "seed", "angle_strategy",
                "fixed_geometry", "sza_range", "vza_range", "raz_range",
                "noise_sigma", "apply_3d", "cloud_top_km"},
               "train");
    get_if(t, "epochs", cfg.train.epochs);
    get_if(t, "batch_size", cfg.train.batch_size);
    get_if(t, "lr", cfg.train.lr);
    get_if(t, "seed", cfg.train.seed);
    if (t.contains("angle_strategy")) {
      const std::string s = t.at("angle_strategy").get<std::string>();
      if (s == "multi") {
        cfg.train.strategy = AngleStrategy::Multi;
      } else if (s == "fixed") {
        cfg.train.strategy = AngleStrategy::Fixed;
      } else {
        throw ConfigError("angle_strategy must be 'multi' or 'fixed'");
      }
    }
    if (t.contains("fixed_geometry")) {
      cfg.train.fixed_geometry =
          geometry_from(t.at("fixed_geometry"), "train.fixed_geometry");
    }
    range_from(t, "sza_range", cfg.train.ranges.sza);
    range_from(t, "vza_range", cfg.train.ranges.vza);
    range_from(t, "raz_range", cfg.train.ranges.raz);
    get_if(t, "noise_sigma", cfg.train.noise_sigma);
    get_if(t, "apply_3d", cfg.train.apply_3d);
    get_if(t, "cloud_top_km", cfg.train.cloud_top_km);
    cfg.train.validate();
  }
  if (j.contains("mlp")) {
    const auto& m = j.at("mlp");
    check_keys(m, {"angle_features", "hidden", "tau_max"}, "mlp");
    get_if(m, "angle_features", cfg.mlp.angle_features);
    get_if(m, "hidden", cfg.mlp.hidden);
    get_if(m, "tau_max", cfg.mlp.tau_max);
  }
  return cfg;
}

RunConfig parse_run_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path.string());
  std::string text((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

DatasetConfig RunConfig::split_config(const std::string& split) const {
  DatasetConfig dc;
  dc.height = data.height;
  dc.width = data.width;
  dc.pixel_size_km = data.pixel_size_km;
  dc.scene = scene;
  dc.geometries = data.geometries;
  dc.noise_sigma = data.noise_sigma;
  dc.apply_3d = data.apply_3d;
  if (split == "train") {
    dc.n_scenes = data.n_train;
    dc.seed_start = data.seed;
  } else if (split == "val") {
    dc.n_scenes = data.n_val;
    dc.seed_start = data.seed + data.n_train;
  } else if (split == "test") {
    dc.n_scenes = data.n_test;
    dc.seed_start = data.seed + data.n_train + data.n_val;
  } else {
    throw ConfigError("unknown split: " + split);
  }
  return dc;
}

std::string RunConfig::resolved_json() const {
  json geoms = json::array();
  for (const auto& g : data.geometries) geoms.push_back(geometry_json(g));
  json j;
  j["scene"] = {{"beta", scene.beta},       {"mu_ln", scene.mu_ln},
                {"sigma_ln", scene.sigma_ln}, {"g", scene.g},
                {"kappa", scene.kappa},     {"eta", scene.eta},
                {"f_clear", scene.f_clear}, {"tau_max", scene.tau_max}};
  j["data"] = {{"height", data.height},
               {"width", data.width},
               {"pixel_size_km", data.pixel_size_km},
               {"n_train", data.n_train},
               {"n_val", data.n_val},
               {"n_test", data.n_test},
               {"seed", data.seed},
               {"geometries", geoms},
               {"noise_sigma", data.noise_sigma},
               {"apply_3d", data.apply_3d}};
  j["model"] = json::parse(caac_config_to_json_string(model));
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"lr", train.lr},
                {"seed", train.seed},
                {"angle_strategy",
                 train.strategy == AngleStrategy::Multi ? "multi" : "fixed"},
                {"fixed_geometry", geometry_json(train.fixed_geometry)},
                {"sza_range", {train.ranges.sza.lo, train.ranges.sza.hi}},
                {"vza_range", {train.ranges.vza.lo, train.ranges.vza.hi}},
                {"raz_range", {train.ranges.raz.lo, train.ranges.raz.hi}},
                {"noise_sigma", train.noise_sigma},
                {"apply_3d", train.apply_3d},
                {"cloud_top_km", train.cloud_top_km}};
  j["mlp"] = {{"angle_features", mlp.angle_features},
              {"hidden", mlp.hidden},
              {"tau_max", mlp.tau_max}};
  return j.dump(2);
}

std::string RunConfig::hash() const { return hex64(fnv1a(resolved_json())); }

}  // namespace caac
