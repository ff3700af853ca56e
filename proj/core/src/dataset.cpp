#include "caac/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "caac/rng.hpp"

namespace caac {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'C', 'A', 'A', 'C', 'D', 'S', '1', '\n'};

json geometry_to_json(const ViewGeometry& g) {
  return json{{"sza_deg", g.sza_deg},
              {"vza_deg", g.vza_deg},
              {"raz_deg", g.raz_deg},
              {"cloud_top_km", g.cloud_top_km}};
}

ViewGeometry geometry_from_json(const json& j) {
  ViewGeometry g;
  g.sza_deg = j.at("sza_deg").get<double>();
  g.vza_deg = j.at("vza_deg").get<double>();
  g.raz_deg = j.at("raz_deg").get<double>();
  g.cloud_top_km = j.at("cloud_top_km").get<double>();
  return g;
}

json scene_params_to_json(const SceneParams& p) {
  return json{{"beta", p.beta},       {"mu_ln", p.mu_ln},
              {"sigma_ln", p.sigma_ln}, {"g", p.g},
              {"kappa", p.kappa},     {"eta", p.eta},
              {"f_clear", p.f_clear}, {"tau_max", p.tau_max}};
}

SceneParams scene_params_from_json(const json& j) {
  SceneParams p;
  p.beta = j.at("beta").get<double>();
  p.mu_ln = j.at("mu_ln").get<double>();
  p.sigma_ln = j.at("sigma_ln").get<double>();
  p.g = j.at("g").get<double>();
  p.kappa = j.at("kappa").get<double>();
  p.eta = j.at("eta").get<double>();
  p.f_clear = j.at("f_clear").get<double>();
  p.tau_max = j.at("tau_max").get<double>();
  return p;
}

void write_f32(std::ostream& os, const std::vector<double>& v) {
  std::vector<float> buf(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) buf[i] = static_cast<float>(v[i]);
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

std::vector<double> read_f32(std::istream& is, std::size_t n) {
  std::vector<float> buf(n);
  is.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(n * sizeof(float)));
  if (!is) throw DatasetError("truncated dataset payload");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<double>(buf[i]);
  return out;
}

}  // namespace

void DatasetConfig::validate() const {
  if (n_scenes == 0) throw DatasetError("dataset needs at least one scene");
  if (geometries.empty())
    throw DatasetError("dataset needs at least one geometry");
  if (noise_sigma < 0.0) throw DatasetError("noise sigma must be nonnegative");
  scene.validate();
  for (const auto& g : geometries) g.validate();
}

Dataset generate_dataset(const DatasetConfig& config) {
  config.validate();
  Dataset ds;
  ds.config = config;
  ds.scenes.reserve(config.n_scenes);
  for (std::size_t i = 0; i < config.n_scenes; ++i) {
    Scene sc;
    sc.seed = config.seed_start + i;
    sc.cot = generate_cot_field(sc.seed, config.height, config.width,
                                config.scene, config.pixel_size_km);
    sc.radiances.reserve(config.geometries.size());
    for (std::size_t gi = 0; gi < config.geometries.size(); ++gi) {
      const auto noise_seed = derive_seed(sc.seed, gi, 0xdadaULL);
      sc.radiances.push_back(render_scene(sc.cot, config.geometries[gi],
                                          config.scene, config.apply_3d,
                                          config.noise_sigma, noise_seed));
    }
    ds.scenes.push_back(std::move(sc));
  }
  return ds;
}

std::filesystem::path manifest_path(const std::filesystem::path& p) {
  return std::filesystem::path(p.string() + ".manifest.json");
}

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  const auto& cfg = ds.config;
  json meta;
  meta["schema_version"] = 1;
  meta["n"] = ds.scenes.size();
  meta["h"] = cfg.height;
  meta["w"] = cfg.width;
  meta["pixel_size_km"] = cfg.pixel_size_km;
  meta["field_order"] = json::array({"tau", "reflectance"});
  meta["seed_start"] = cfg.seed_start;
  meta["noise_sigma"] = cfg.noise_sigma;
  meta["apply_3d"] = cfg.apply_3d;
  meta["scene_params"] = scene_params_to_json(cfg.scene);
  json geoms = json::array();
  for (const auto& g : cfg.geometries) geoms.push_back(geometry_to_json(g));
  meta["geometries"] = geoms;
  json seeds = json::array();
  for (const auto& sc : ds.scenes) seeds.push_back(sc.seed);
  meta["seeds"] = seeds;

  std::ofstream os(path, std::ios::binary);
  if (!os) throw DatasetError("cannot open for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  const std::string meta_line = meta.dump();
  os.write(meta_line.data(), static_cast<std::streamsize>(meta_line.size()));
  os.put('\n');
  for (const auto& sc : ds.scenes) {
    write_f32(os, sc.cot.tau);
    for (const auto& r : sc.radiances) write_f32(os, r.reflectance);
  }
  if (!os) throw DatasetError("write failed: " + path.string());
  os.close();

  json manifest;
  manifest["dataset"] = path.filename().string();
  manifest["schema_version"] = 1;
  manifest["n"] = ds.scenes.size();
  manifest["seed_start"] = cfg.seed_start;
  manifest["seeds"] = seeds;
  manifest["geometries"] = geoms;
  manifest["noise_sigma"] = cfg.noise_sigma;
  manifest["apply_3d"] = cfg.apply_3d;
  std::ofstream ms(manifest_path(path), std::ios::binary);
  if (!ms)
    throw DatasetError("cannot write manifest for: " + path.string());
  ms << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError("cannot open dataset: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + 8, kMagic)) {
    throw DatasetError("bad magic: not a CAACDS1 file: " + path.string());
  }
  std::string meta_line;
  std::getline(is, meta_line);
  if (!is) throw DatasetError("missing metadata line: " + path.string());
  json meta;
  try {
    meta = json::parse(meta_line);
  } catch (const json::parse_error& e) {
    throw DatasetError("bad dataset metadata JSON: " + std::string(e.what()));
  }

  Dataset ds;
  DatasetConfig& cfg = ds.config;
  cfg.n_scenes = meta.at("n").get<std::size_t>();
  cfg.height = meta.at("h").get<std::size_t>();
  cfg.width = meta.at("w").get<std::size_t>();
  cfg.pixel_size_km = meta.at("pixel_size_km").get<double>();
  cfg.seed_start = meta.at("seed_start").get<std::uint64_t>();
  cfg.noise_sigma = meta.at("noise_sigma").get<double>();
  cfg.apply_3d = meta.at("apply_3d").get<bool>();
  cfg.scene = scene_params_from_json(meta.at("scene_params"));
  for (const auto& gj : meta.at("geometries"))
    cfg.geometries.push_back(geometry_from_json(gj));
  std::vector<std::uint64_t> seeds =
      meta.at("seeds").get<std::vector<std::uint64_t>>();

  const std::size_t npx = cfg.height * cfg.width;
  ds.scenes.reserve(cfg.n_scenes);
  for (std::size_t i = 0; i < cfg.n_scenes; ++i) {
    Scene sc;
    sc.seed = seeds.at(i);
    sc.cot.height = cfg.height;
    sc.cot.width = cfg.width;
    sc.cot.pixel_size_km = cfg.pixel_size_km;
    sc.cot.tau = read_f32(is, npx);
    for (const auto& g : cfg.geometries) {
      RadianceField r;
      r.height = cfg.height;
      r.width = cfg.width;
      r.geometry = g;
      r.noise_sigma = cfg.noise_sigma;
      r.reflectance = read_f32(is, npx);
      sc.radiances.push_back(std::move(r));
    }
    ds.scenes.push_back(std::move(sc));
  }
  return ds;
}

std::vector<std::uint64_t> manifest_seeds(
    const std::filesystem::path& dataset_path) {
  const auto mp = manifest_path(dataset_path);
  std::ifstream is(mp);
  if (!is) throw DatasetError("cannot open manifest: " + mp.string());
  json manifest;
  try {
    is >> manifest;
  } catch (const json::parse_error& e) {
    throw DatasetError("bad manifest JSON: " + std::string(e.what()));
  }
  return manifest.at("seeds").get<std::vector<std::uint64_t>>();
}

void check_disjoint_seeds(
    const std::vector<std::vector<std::uint64_t>>& splits) {
  std::set<std::uint64_t> seen;
  for (const auto& split : splits) {
    for (std::uint64_t s : split) {
      if (!seen.insert(s).second) {
        throw DatasetError("seed " + std::to_string(s) +
                           " appears in more than one split");
      }
    }
  }
}

}  // namespace caac
