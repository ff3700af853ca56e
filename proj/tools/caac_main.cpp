// caac: cloud optical thickness retrieval pipeline.
// Subcommands: gen-data, train, eval, compare, plot.
// Exit codes: 0 success, 1 runtime/IO error, 2 configuration/usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "caac/baselines.hpp"
#include "caac/dataset.hpp"
#include "caac/hash.hpp"
#include "caac/image.hpp"
#include "caac/model.hpp"
#include "caac/runconfig.hpp"
#include "caac/scene.hpp"
#include "caac/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

caac::RunConfig load_config(const std::string& path) {
  if (path.empty()) return caac::RunConfig{};
  return caac::parse_run_config_file(path);
}

void write_resolved_config(const caac::RunConfig& cfg, const fs::path& dir) {
  std::ofstream os(dir / "config.resolved.json", std::ios::binary);
  if (!os) {
    throw std::runtime_error("cannot write resolved config under " +
                             dir.string());
  }
  os << cfg.resolved_json() << '\n';
}

int cmd_gen_data(const std::string& config_path, const std::string& out) {
  caac::RunConfig cfg = load_config(config_path);
  const fs::path dir(out);
  fs::create_directories(dir);

  std::vector<std::vector<std::uint64_t>> seed_sets;
  for (const std::string split : {"train", "val", "test"}) {
    const auto dc = cfg.split_config(split);
    if (dc.n_scenes == 0) continue;
    caac::Dataset ds = caac::generate_dataset(dc);
    const fs::path path = dir / (split + ".caacds");
    caac::write_dataset(ds, path);
    std::vector<std::uint64_t> seeds;
    for (const auto& sc : ds.scenes) seeds.push_back(sc.seed);
    seed_sets.push_back(std::move(seeds));
    std::cout << split << ": " << ds.scenes.size() << " scenes, "
              << fs::file_size(path) << " bytes -> " << path.string() << "\n";
  }
  caac::check_disjoint_seeds(seed_sets);
  write_resolved_config(cfg, dir);
  std::cout << "config_hash: " << cfg.hash() << "\n";
  return kExitOk;
}

std::string provenance_json(const caac::RunConfig& cfg,
                            const caac::Dataset& train_ds,
                            const caac::TrainResult& result,
                            int epoch_offset) {
  json j;
  j["config_hash"] = cfg.hash();
  j["dataset_id"] = caac::dataset_id(train_ds);
  j["epochs_completed"] =
      epoch_offset + static_cast<int>(result.history.size());
  j["best_epoch"] = epoch_offset + result.best_epoch;
  j["best_val_loss"] = result.best_val_loss;
  return j.dump();
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out, const std::string& model_kind,
              const std::string& resume) {
  caac::RunConfig cfg = load_config(config_path);
  const fs::path ddir(data_dir);
  const fs::path train_path = ddir / "train.caacds";
  const fs::path val_path = ddir / "val.caacds";
  if (!fs::exists(train_path) || !fs::exists(val_path)) {
    throw std::runtime_error("dataset not found under " + ddir.string() +
                             " (expected train.caacds and val.caacds)");
  }
  caac::Dataset train_ds = caac::load_dataset(train_path);
  caac::Dataset val_ds = caac::load_dataset(val_path);

  std::unique_ptr<caac::Regressor> model;
  std::string config_json;
  int epoch_offset = 0;
  if (!resume.empty()) {
    auto ck = caac::read_checkpoint(resume);
    if (ck.info.model_kind == "caac") {
      auto m = caac::load_caac_checkpoint(resume);
      config_json = caac::caac_config_to_json_string(m->config());
      model = std::move(m);
    } else {
      auto m = caac::load_mlp_checkpoint(resume);
      config_json = caac::PixelMlp::config_to_json_string(m->config());
      model = std::move(m);
    }
    try {
      epoch_offset =
          json::parse(ck.info.provenance_json).value("epochs_completed", 0);
    } catch (...) {
      epoch_offset = 0;
    }
  } else if (model_kind == "caac") {
    config_json = caac::caac_config_to_json_string(cfg.model);
    model = std::make_unique<caac::CaacModel>(cfg.model, cfg.train.seed);
  } else if (model_kind == "mlp") {
    config_json = caac::PixelMlp::config_to_json_string(cfg.mlp);
    model = std::make_unique<caac::PixelMlp>(cfg.mlp, cfg.train.seed);
  } else {
    throw UsageError("--model must be 'caac' or 'mlp'");
  }

  caac::TrainResult result = caac::train(*model, train_ds, val_ds, cfg.train);

  const fs::path odir(out);
  fs::create_directories(odir);

  // retain the best-validation snapshot in the checkpoint
  if (!result.best_params.empty()) {
    if (auto* cm = dynamic_cast<caac::CaacModel*>(model.get())) {
      cm->load_param_values(result.best_params);
    } else if (auto* pm = dynamic_cast<caac::PixelMlp*>(model.get())) {
      pm->load_param_values(result.best_params);
    }
  }
  caac::CheckpointInfo info;
  info.model_kind = model->kind();
  info.config_json = config_json;
  info.provenance_json = provenance_json(cfg, train_ds, result, epoch_offset);
  const fs::path ckpt = odir / "checkpoint.caacckpt";
  caac::save_checkpoint(*model, info, ckpt);

  for (auto& e : result.history) e.epoch += epoch_offset;
  const fs::path hist = odir / "history.csv";
  if (epoch_offset > 0 && fs::exists(hist)) {
    std::ofstream os(hist, std::ios::binary | std::ios::app);
    for (const auto& e : result.history) {
      os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ','
         << e.lr << "\n";
    }
  } else {
    caac::write_history_csv(hist, result.history, cfg.hash());
  }
  write_resolved_config(cfg, odir);

  std::cout << "checkpoint: " << ckpt.string() << "\n"
            << "best_epoch: " << (epoch_offset + result.best_epoch)
            << " val_loss: " << result.best_val_loss << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& method, const std::string& data,
             const std::string& train_data, const std::string& angles,
             const std::string& out, const std::string& name,
             double noise_sigma, bool no_3d, std::uint64_t seed) {
  caac::RunConfig cfg = load_config(config_path);
  if (checkpoint.empty() && method.empty()) {
    throw UsageError("eval needs --checkpoint or --method");
  }
  caac::Dataset testset = caac::load_dataset(data);
  if (!train_data.empty()) {
    caac::check_disjoint_seeds(
        {caac::manifest_seeds(train_data), caac::manifest_seeds(data)});
  }

  std::unique_ptr<caac::Regressor> model;
  std::unique_ptr<caac::Retriever> retriever;
  caac::IpaLut lut;
  if (!checkpoint.empty()) {
    auto ck = caac::read_checkpoint(checkpoint);
    if (ck.info.model_kind == "caac") {
      model = caac::load_caac_checkpoint(checkpoint);
    } else {
      model = caac::load_mlp_checkpoint(checkpoint);
    }
    retriever = std::make_unique<caac::RegressorRetriever>(
        *model, name.empty() ? model->kind() : name);
  } else if (method == "ipa") {
    lut = caac::build_lut(testset.config.scene.g,
                          caac::default_tau_grid(testset.config.scene.tau_max),
                          caac::default_mu0_grid());
    retriever = std::make_unique<caac::IpaRetriever>(lut);
  } else if (method == "oracle") {
    retriever = std::make_unique<caac::OracleRetriever>();
  } else {
    throw UsageError("--method must be 'ipa' or 'oracle'");
  }

  caac::AngleGrid grid =
      angles.empty() ? caac::AngleGrid{} : caac::parse_angle_grid(angles);
  caac::EvalOptions opts;
  opts.apply_3d = !no_3d;
  opts.noise_sigma = noise_sigma;
  opts.seed = seed;
  caac::Metrics m = caac::evaluate(*retriever, testset, grid, opts);
  if (!name.empty()) m.method = name;
  caac::write_metrics_csv(out, m, cfg.hash());
  std::cout << m.method << ": rmse_tau=" << m.rmse_tau
            << " rmse_log=" << m.rmse_log << " flatness=" << m.flatness
            << " -> " << out << "\n";
  return kExitOk;
}

int cmd_compare(const std::vector<std::string>& metric_files,
                const std::string& out, const std::string& reference) {
  std::vector<caac::Metrics> metrics;
  for (const auto& f : metric_files) {
    metrics.push_back(caac::read_metrics_csv(f));
  }
  caac::Comparison c;
  try {
    c = caac::compare(metrics, reference);
  } catch (const caac::TrainError& e) {
    // mismatched testset identifiers are a usage problem
    throw UsageError(e.what());
  }
  caac::write_comparison_csv(out, c);
  std::cout << caac::comparison_table(c);
  return kExitOk;
}

int cmd_plot(const std::string& scene_data, std::size_t index,
             const std::string& checkpoint, const std::string& method,
             const std::string& metrics_file, const std::string& out) {
  const fs::path odir(out);
  fs::create_directories(odir);

  if (!metrics_file.empty()) {
    caac::Metrics m = caac::read_metrics_csv(metrics_file);
    std::ofstream os(odir / "error_vs_angle.csv", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write error_vs_angle.csv");
    os << "sza_deg,vza_deg,raz_deg,rmse_tau,rmse_log\n";
    for (const auto& g : m.per_geometry) {
      os << g.geom.sza_deg << ',' << g.geom.vza_deg << ',' << g.geom.raz_deg
         << ',' << g.rmse_tau << ',' << g.rmse_log << "\n";
    }
    std::cout << "wrote " << (odir / "error_vs_angle.csv").string() << " ("
              << m.per_geometry.size() << " geometries)\n";
    return kExitOk;
  }

  if (scene_data.empty()) {
    throw UsageError("plot needs --scene <dataset> or --metrics <csv>");
  }
  caac::Dataset ds = caac::load_dataset(scene_data);
  if (index >= ds.scenes.size()) {
    throw std::runtime_error("scene index out of range (dataset has " +
                             std::to_string(ds.scenes.size()) + " scenes)");
  }
  const caac::Scene& sc = ds.scenes[index];
  const double tau_max = ds.config.scene.tau_max;
  caac::write_pgm(odir / "tau_truth.pgm", sc.cot.tau, sc.cot.height,
                  sc.cot.width, 0.0, tau_max);
  if (!sc.radiances.empty()) {
    caac::write_pgm(odir / "radiance.pgm", sc.radiances[0].reflectance,
                    sc.cot.height, sc.cot.width, 0.0, 1.0);
  }

  std::unique_ptr<caac::Regressor> model;
  std::unique_ptr<caac::Retriever> retriever;
  caac::IpaLut lut;
  if (!checkpoint.empty()) {
    auto ck = caac::read_checkpoint(checkpoint);
    model = ck.info.model_kind == "caac"
                ? std::unique_ptr<caac::Regressor>(
                      caac::load_caac_checkpoint(checkpoint))
                : std::unique_ptr<caac::Regressor>(
                      caac::load_mlp_checkpoint(checkpoint));
    retriever =
        std::make_unique<caac::RegressorRetriever>(*model, model->kind());
  } else if (method == "ipa") {
    lut = caac::build_lut(ds.config.scene.g,
                          caac::default_tau_grid(tau_max),
                          caac::default_mu0_grid());
    retriever = std::make_unique<caac::IpaRetriever>(lut);
  } else if (method == "oracle") {
    retriever = std::make_unique<caac::OracleRetriever>();
  }

  if (retriever && !sc.radiances.empty()) {
    const auto got = retriever->retrieve(sc.radiances[0], sc.cot);
    caac::write_pgm(odir / "tau_pred.pgm", got.cot.tau, sc.cot.height,
                    sc.cot.width, 0.0, tau_max);
    std::vector<double> err(sc.cot.tau.size());
    for (std::size_t i = 0; i < err.size(); ++i) {
      err[i] = got.cot.tau[i] - sc.cot.tau[i];
    }
    caac::write_ppm_diverging(odir / "tau_error.ppm", err, sc.cot.height,
                              sc.cot.width, tau_max / 4.0);
  }
  std::cout << "wrote scene images under " << odir.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cloud optical thickness retrieval pipeline"};
  app.require_subcommand(1);

  std::string config_path, out, data, train_data, checkpoint, method, angles;
  std::string model_kind = "caac", resume, reference = "caac", name;
  std::string scene_data, metrics_file;
  std::vector<std::string> metric_files;
  std::size_t scene_index = 0;
  double noise_sigma = 0.02;
  bool no_3d = false;
  std::uint64_t eval_seed = 9090;

  auto* gen = app.add_subcommand("gen-data", "generate dataset splits");
  gen->add_option("--config", config_path, "run config JSON");
  gen->add_option("--out", out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train a retrieval model");
  tr->add_option("--config", config_path, "run config JSON");
  tr->add_option("--data", data, "dataset directory")->required();
  tr->add_option("--out", out, "output directory")->required();
  tr->add_option("--model", model_kind, "caac | mlp");
  tr->add_option("--resume", resume, "checkpoint to continue from");

  auto* ev = app.add_subcommand("eval", "evaluate a retriever on a testset");
  ev->add_option("--config", config_path, "run config JSON");
  ev->add_option("--checkpoint", checkpoint, "model checkpoint");
  ev->add_option("--method", method, "checkpoint-free method: ipa | oracle");
  ev->add_option("--data", data, "testset .caacds file")->required();
  ev->add_option("--train-data", train_data,
                 "training .caacds file (seed-disjointness audit)");
  ev->add_option("--angles", angles, "grid, e.g. sza=0:60:15,vza=0:45:15");
  ev->add_option("--out", out, "metrics CSV path")->required();
  ev->add_option("--name", name, "method label in the metrics output");
  ev->add_option("--noise-sigma", noise_sigma, "eval rendering noise");
  ev->add_flag("--no-3d", no_3d, "disable 3D effects in eval rendering");
  ev->add_option("--seed", eval_seed, "eval rendering seed");

  auto* cp = app.add_subcommand("compare", "tabulate metrics across methods");
  cp->add_option("--metrics", metric_files, "metrics CSV files")
      ->required()
      ->expected(-1);
  cp->add_option("--out", out, "comparison CSV path")->required();
  cp->add_option("--reference", reference, "reference method for ratios");

  auto* pl = app.add_subcommand("plot", "emit raster maps and curve CSVs");
  pl->add_option("--scene", scene_data, "dataset file for scene maps");
  pl->add_option("--index", scene_index, "scene index");
  pl->add_option("--checkpoint", checkpoint, "model for prediction maps");
  pl->add_option("--method", method, "ipa | oracle prediction maps");
  pl->add_option("--metrics", metrics_file, "metrics CSV for angle curves");
  pl->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out);
    if (tr->parsed())
      return cmd_train(config_path, data, out, model_kind, resume);
    if (ev->parsed())
      return cmd_eval(config_path, checkpoint, method, data, train_data,
                      angles, out, name, noise_sigma, no_3d, eval_seed);
    if (cp->parsed()) return cmd_compare(metric_files, out, reference);
    if (pl->parsed())
      return cmd_plot(scene_data, scene_index, checkpoint, method,
                      metrics_file, out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const caac::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
