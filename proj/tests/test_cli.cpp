#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "caac/dataset.hpp"
#include "caac/model.hpp"
#include "caac/trainer.hpp"

namespace fs = std::filesystem;

namespace {

const char* kCli = CAAC_CLI_PATH;

int run(const std::string& args) {
  const std::string cmd = std::string(kCli) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WEXITSTATUS(status);
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("caac_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  REQUIRE(os.good());
  os << text;
}

// small end-to-end configuration: 16x16 scenes, a handful per split
const char* kTinyConfig = R"({
  "data": {"height": 16, "width": 16, "n_train": 6, "n_val": 2, "n_test": 2,
           "seed": 40, "noise_sigma": 0.02, "apply_3d": true},
  "model": {"d_model": 16, "heads": 2, "layers": 1, "d_ff": 32,
            "angle_mlp": 16},
  "train": {"epochs": 2, "batch_size": 3, "lr": 0.001, "seed": 1}
})";

struct Pipeline {
  fs::path root, config, data_dir, run_dir;
};

// generates data and trains once; reused by the dependent cases
const Pipeline& pipeline() {
  static Pipeline p = [] {
    Pipeline q;
    q.root = fresh_dir("pipeline");
    q.config = q.root / "config.json";
    q.data_dir = q.root / "data";
    q.run_dir = q.root / "run";
    write_text(q.config, kTinyConfig);
    REQUIRE(run("gen-data --config " + q.config.string() + " --out " +
                q.data_dir.string()) == 0);
    REQUIRE(run("train --config " + q.config.string() + " --data " +
                q.data_dir.string() + " --out " + q.run_dir.string()) == 0);
    return q;
  }();
  return p;
}

}  // namespace

TEST_CASE("no subcommand / unknown flag exit with code 2") {
  CHECK(run("") == 2);
  CHECK(run("gen-data --nonsense x") == 2);
  CHECK(run("--help") == 0);
}

TEST_CASE("gen-data writes splits, manifests, and a resolved config") {
  const auto& p = pipeline();
  for (const char* split : {"train", "val", "test"}) {
    const fs::path ds = p.data_dir / (std::string(split) + ".caacds");
    CHECK(fs::exists(ds));
    CHECK(fs::exists(caac::manifest_path(ds)));
  }
  CHECK(fs::exists(p.data_dir / "config.resolved.json"));

  auto ds = caac::load_dataset(p.data_dir / "train.caacds");
  CHECK(ds.scenes.size() == 6);
  CHECK(ds.config.height == 16);

  // regeneration into a second directory is byte-identical
  const auto dir2 = fresh_dir("gen2");
  CHECK(run("gen-data --config " + p.config.string() + " --out " +
            dir2.string()) == 0);
  for (const char* split : {"train", "val", "test"}) {
    const std::string f = std::string(split) + ".caacds";
    CHECK(slurp(p.data_dir / f) == slurp(dir2 / f));
  }
}

TEST_CASE("gen-data: malformed config exits 2") {
  const auto dir = fresh_dir("badcfg");
  write_text(dir / "bad.json", "{ not json");
  CHECK(run("gen-data --config " + (dir / "bad.json").string() + " --out " +
            (dir / "out").string()) == 2);
  write_text(dir / "unknown.json", R"({"data": {"bogus_key": 1}})");
  CHECK(run("gen-data --config " + (dir / "unknown.json").string() +
            " --out " + (dir / "out").string()) == 2);
}

TEST_CASE("train: missing dataset exits 1; smoke run writes artifacts") {
  const auto dir = fresh_dir("train_missing");
  CHECK(run("train --data " + (dir / "nosuch").string() + " --out " +
            (dir / "run").string()) == 1);

  const auto& p = pipeline();
  const fs::path ckpt = p.run_dir / "checkpoint.caacckpt";
  REQUIRE(fs::exists(ckpt));
  CHECK(fs::exists(p.run_dir / "history.csv"));
  CHECK(fs::exists(p.run_dir / "config.resolved.json"));

  // checkpoint magic
  CHECK(slurp(ckpt).rfind("CAACCKPT1\n", 0) == 0);
  auto model = caac::load_caac_checkpoint(ckpt);
  CHECK(model->config().d_model == 16);

  // history has the configured epochs
  const std::string hist = slurp(p.run_dir / "history.csv");
  CHECK(std::count(hist.begin(), hist.end(), '\n') == 4);  // comment+header+2
}

TEST_CASE("train --resume continues the epoch numbering") {
  const auto& p = pipeline();
  const auto dir = fresh_dir("resume");
  fs::copy(p.run_dir / "history.csv", dir / "history.csv");
  CHECK(run("train --config " + p.config.string() + " --data " +
            p.data_dir.string() + " --out " + dir.string() + " --resume " +
            (p.run_dir / "checkpoint.caacckpt").string()) == 0);
  const std::string hist = slurp(dir / "history.csv");
  CHECK(hist.find("\n3,") != std::string::npos);
  CHECK(hist.find("\n4,") != std::string::npos);
}

TEST_CASE("eval: checkpoint, ipa, and oracle paths") {
  const auto& p = pipeline();
  const auto dir = fresh_dir("eval");
  const std::string test_ds = (p.data_dir / "test.caacds").string();
  const std::string train_ds = (p.data_dir / "train.caacds").string();
  const std::string angles = " --angles sza=0:30:30,vza=0";

  CHECK(run("eval --data " + test_ds + " --out " +
            (dir / "x.csv").string()) == 2);  // neither checkpoint nor method

  CHECK(run("eval --checkpoint " +
            (p.run_dir / "checkpoint.caacckpt").string() + " --data " +
            test_ds + " --train-data " + train_ds + angles + " --out " +
            (dir / "caac.csv").string()) == 0);
  CHECK(run("eval --method ipa --data " + test_ds + angles + " --out " +
            (dir / "ipa.csv").string()) == 0);
  CHECK(run("eval --method oracle --data " + test_ds + angles + " --out " +
            (dir / "oracle.csv").string()) == 0);

  auto m = caac::read_metrics_csv(dir / "caac.csv");
  CHECK(m.method == "caac");
  CHECK(m.n_pixels == 2 * 2 * 16 * 16);
  CHECK(!m.testset_id.empty());
  auto mo = caac::read_metrics_csv(dir / "oracle.csv");
  CHECK(mo.rmse_tau == 0.0);
  CHECK(mo.testset_id == m.testset_id);

  // repeated eval is byte-identical
  CHECK(run("eval --method ipa --data " + test_ds + angles + " --out " +
            (dir / "ipa2.csv").string()) == 0);
  CHECK(slurp(dir / "ipa.csv") == slurp(dir / "ipa2.csv"));
}

TEST_CASE("compare: ratios, flatness column, and testset mismatch") {
  const auto& p = pipeline();
  const auto dir = fresh_dir("compare");
  const std::string test_ds = (p.data_dir / "test.caacds").string();
  const std::string angles = " --angles sza=0:30:30,vza=0";
  REQUIRE(run("eval --method ipa --data " + test_ds + angles + " --out " +
              (dir / "a.csv").string()) == 0);
  REQUIRE(run("eval --method ipa --data " + test_ds + angles +
              " --name ipa2 --out " + (dir / "b.csv").string()) == 0);

  CHECK(run("compare --metrics " + (dir / "a.csv").string() + " " +
            (dir / "b.csv").string() + " --reference ipa --out " +
            (dir / "cmp.csv").string()) == 0);
  const std::string cmp = slurp(dir / "cmp.csv");
  CHECK(cmp.find("flatness") != std::string::npos);
  CHECK(cmp.find("ipa2") != std::string::npos);
  CHECK(cmp.find(",1,") != std::string::npos);  // unit ratio vs itself

  // different testset -> usage error
  const auto dir2 = fresh_dir("compare_gen");
  write_text(dir2 / "cfg.json",
             R"({"data": {"height": 16, "width": 16, "n_train": 1,
                 "n_val": 1, "n_test": 2, "seed": 9000}})");
  REQUIRE(run("gen-data --config " + (dir2 / "cfg.json").string() +
              " --out " + dir2.string()) == 0);
  REQUIRE(run("eval --method ipa --data " +
              (dir2 / "test.caacds").string() + angles + " --out " +
              (dir / "c.csv").string()) == 0);
  CHECK(run("compare --metrics " + (dir / "a.csv").string() + " " +
            (dir / "c.csv").string() + " --reference ipa --out " +
            (dir / "bad.csv").string()) == 2);
}

TEST_CASE("plot: scene rasters and angle-curve CSV") {
  const auto& p = pipeline();
  const auto dir = fresh_dir("plot");
  const std::string test_ds = (p.data_dir / "test.caacds").string();

  CHECK(run("plot --scene " + test_ds + " --index 0 --method oracle --out " +
            dir.string()) == 0);
  for (const char* f : {"tau_truth.pgm", "radiance.pgm", "tau_pred.pgm",
                        "tau_error.ppm"}) {
    CHECK(fs::exists(dir / f));
  }
  CHECK(slurp(dir / "tau_truth.pgm").rfind("P5\n16 16\n255\n", 0) == 0);
  CHECK(slurp(dir / "tau_error.ppm").rfind("P6\n16 16\n255\n", 0) == 0);
  // oracle predictions match the truth raster exactly
  CHECK(slurp(dir / "tau_pred.pgm") == slurp(dir / "tau_truth.pgm"));

  CHECK(run("plot --scene " + test_ds + " --index 99 --out " +
            dir.string()) == 1);

  const auto mdir = fresh_dir("plot_metrics");
  REQUIRE(run("eval --method ipa --data " + test_ds +
              " --angles sza=0:30:15,vza=0 --out " +
              (mdir / "m.csv").string()) == 0);
  CHECK(run("plot --metrics " + (mdir / "m.csv").string() + " --out " +
            mdir.string()) == 0);
  const std::string curve = slurp(mdir / "error_vs_angle.csv");
  CHECK(curve.rfind("sza_deg,", 0) == 0);
  CHECK(std::count(curve.begin(), curve.end(), '\n') == 4);  // header + 3
}
