#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "caac/trainer.hpp"

using namespace caac;

namespace {

Dataset tiny_dataset(std::size_t n, std::uint64_t seed_start,
                     std::size_t side = 16) {
  DatasetConfig cfg;
  cfg.n_scenes = n;
  cfg.height = side;
  cfg.width = side;
  cfg.seed_start = seed_start;
  cfg.geometries = {{30.0, 0.0, 0.0, 1.0}};
  return generate_dataset(cfg);
}

CaacConfig tiny_model_config() {
  CaacConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.layers = 1;
  c.d_ff = 32;
  c.angle_mlp = 16;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("sample_geometry: fixed strategy returns the configured geometry") {
  Rng rng(1);
  AngleRanges ranges;
  ViewGeometry fixed{42.0, 13.0, 200.0, 1.5};
  for (int i = 0; i < 5; ++i) {
    auto g = sample_geometry(rng, AngleStrategy::Fixed, ranges, fixed, 1.5);
    CHECK(g.sza_deg == 42.0);
    CHECK(g.vza_deg == 13.0);
    CHECK(g.raz_deg == 200.0);
  }
}

TEST_CASE("sample_geometry: multi strategy covers the ranges uniformly") {
  Rng rng(2);
  AngleRanges ranges;  // sza 0-60, vza 0-45, raz 0-360
  double sza_sum = 0.0, vza_sum = 0.0;
  double sza_min = 1e9, sza_max = -1e9;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    auto g = sample_geometry(rng, AngleStrategy::Multi, ranges, {}, 1.0);
    CHECK(g.sza_deg >= 0.0);
    CHECK(g.sza_deg <= 60.0);
    CHECK(g.vza_deg >= 0.0);
    CHECK(g.vza_deg <= 45.0);
    CHECK(g.raz_deg >= 0.0);
    CHECK(g.raz_deg < 360.0);
    sza_sum += g.sza_deg;
    vza_sum += g.vza_deg;
    sza_min = std::min(sza_min, g.sza_deg);
    sza_max = std::max(sza_max, g.sza_deg);
  }
  CHECK(std::abs(sza_sum / n - 30.0) < 1.0);
  CHECK(std::abs(vza_sum / n - 22.5) < 1.0);
  CHECK(sza_min < 2.0);
  CHECK(sza_max > 58.0);

  // same seed, same stream
  Rng a(7), b(7);
  for (int i = 0; i < 10; ++i) {
    auto ga = sample_geometry(a, AngleStrategy::Multi, ranges, {}, 1.0);
    auto gb = sample_geometry(b, AngleStrategy::Multi, ranges, {}, 1.0);
    CHECK(ga.sza_deg == gb.sza_deg);
    CHECK(ga.vza_deg == gb.vza_deg);
    CHECK(ga.raz_deg == gb.raz_deg);
  }
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), TrainError);
  TrainConfig c2;
  c2.batch_size = 0;
  CHECK_THROWS_AS(c2.validate(), TrainError);
  TrainConfig c3;
  c3.lr = 0.0;
  CHECK_THROWS_AS(c3.validate(), TrainError);
}

TEST_CASE("train: rejects overlapping train/val seeds") {
  auto train_ds = tiny_dataset(4, 100);
  auto val_ds = tiny_dataset(2, 102);  // 102,103 overlap with 100..103
  CaacModel model(tiny_model_config(), 0);
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train(model, train_ds, val_ds, cfg), DatasetError);
}

TEST_CASE("train: bit-identical history and parameters for identical runs") {
  auto train_ds = tiny_dataset(4, 100);
  auto val_ds = tiny_dataset(2, 200);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.seed = 11;

  CaacModel m1(tiny_model_config(), 5);
  CaacModel m2(tiny_model_config(), 5);
  auto r1 = train(m1, train_ds, val_ds, cfg);
  auto r2 = train(m2, train_ds, val_ds, cfg);

  REQUIRE(r1.history.size() == r2.history.size());
  for (std::size_t i = 0; i < r1.history.size(); ++i) {
    CHECK(r1.history[i].train_loss == r2.history[i].train_loss);
    CHECK(r1.history[i].val_loss == r2.history[i].val_loss);
  }
  REQUIRE(r1.best_params.size() == r2.best_params.size());
  for (std::size_t i = 0; i < r1.best_params.size(); ++i) {
    CHECK(r1.best_params[i] == r2.best_params[i]);
  }
  CHECK(r1.best_epoch == r2.best_epoch);
}

TEST_CASE("train: loss decreases on a small run") {
  auto train_ds = tiny_dataset(8, 300);
  auto val_ds = tiny_dataset(2, 400);
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  cfg.seed = 3;
  CaacModel model(tiny_model_config(), 1);
  auto res = train(model, train_ds, val_ds, cfg);
  REQUIRE(res.history.size() == 6);
  CHECK(res.history.back().train_loss < res.history.front().train_loss);
  CHECK(res.best_val_loss <= res.history.front().val_loss);
  for (const auto& rec : res.history) CHECK(rec.lr == cfg.lr);
}

TEST_CASE("evaluate: oracle retriever scores a perfect, flat retrieval") {
  auto test_ds = tiny_dataset(3, 500);
  AngleGrid grid;
  grid.szas = {0, 30, 60};
  grid.vzas = {0};
  EvalOptions opts;
  auto m = evaluate(OracleRetriever{}, test_ds, grid, opts);
  CHECK(m.rmse_tau == 0.0);
  CHECK(m.mae_tau == 0.0);
  CHECK(m.rmse_log == 0.0);
  CHECK(m.flatness == doctest::Approx(1.0));
  CHECK(m.saturation_fraction == 0.0);
  CHECK(m.n_pixels == 3 * 3 * 16 * 16);
  CHECK(!m.testset_id.empty());
}

TEST_CASE("evaluate: deterministic and thread-count independent") {
  auto test_ds = tiny_dataset(3, 600);
  IpaLut lut = build_lut(0.85, default_tau_grid(158.0, 64),
                         default_mu0_grid(32));
  IpaRetriever retr(lut);
  AngleGrid grid;
  grid.szas = {0, 30};
  grid.vzas = {0, 30};
  EvalOptions o1;
  o1.threads = 1;
  EvalOptions o4;
  o4.threads = 4;
  auto m1 = evaluate(retr, test_ds, grid, o1);
  auto m4 = evaluate(retr, test_ds, grid, o4);
  CHECK(m1.rmse_tau == m4.rmse_tau);
  CHECK(m1.rmse_log == m4.rmse_log);
  CHECK(m1.flatness == m4.flatness);
  CHECK(m1.rmse_tau > 0.0);
  REQUIRE(m1.per_geometry.size() == 4);
}

TEST_CASE("compare: self comparison yields unit ratios") {
  auto test_ds = tiny_dataset(2, 700);
  AngleGrid grid;
  grid.szas = {0};
  grid.vzas = {0};
  auto m = evaluate(OracleRetriever{}, test_ds, grid, EvalOptions{});
  m.method = "caac";
  Metrics m2 = m;
  m2.method = "other";
  auto c = compare({m, m2});
  CHECK(c.reference == "caac");
  REQUIRE(c.rows.size() == 2);
  for (const auto& row : c.rows) CHECK(row.ratio_to_ref == doctest::Approx(1.0));

  // mismatched testset ids are a hard error
  Metrics m3 = m2;
  m3.testset_id = "deadbeef00000000";
  CHECK_THROWS_AS(compare({m, m3}), TrainError);
}

TEST_CASE("metrics CSV round trip") {
  auto test_ds = tiny_dataset(2, 800);
  IpaLut lut = build_lut(0.85, default_tau_grid(158.0, 64),
                         default_mu0_grid(32));
  AngleGrid grid;
  grid.szas = {0, 30};
  grid.vzas = {0, 15};
  auto m = evaluate(IpaRetriever{lut}, test_ds, grid, EvalOptions{});
  m.method = "ipa";
  const auto path =
      std::filesystem::temp_directory_path() / "caac_metrics_rt.csv";
  write_metrics_csv(path, m, "cfg123");
  auto r = read_metrics_csv(path);
  CHECK(r.method == m.method);
  CHECK(r.testset_id == m.testset_id);
  CHECK(r.rmse_tau == doctest::Approx(m.rmse_tau).epsilon(1e-9));
  CHECK(r.rmse_log == doctest::Approx(m.rmse_log).epsilon(1e-9));
  CHECK(r.flatness == doctest::Approx(m.flatness).epsilon(1e-9));
  CHECK(r.sza_bins.size() == m.sza_bins.size());
  CHECK(r.vza_bins.size() == m.vza_bins.size());
  CHECK(r.per_geometry.size() == m.per_geometry.size());
  CHECK(r.n_pixels == m.n_pixels);
  CHECK(slurp(path).find("# config_hash=cfg123") != std::string::npos);
}

TEST_CASE("history CSV") {
  std::vector<EpochRecord> h = {{1, 0.5, 0.6, 3e-4}, {2, 0.4, 0.5, 3e-4}};
  const auto path =
      std::filesystem::temp_directory_path() / "caac_history.csv";
  write_history_csv(path, h, "abc");
  auto text = slurp(path);
  CHECK(text.find("# config_hash=abc") != std::string::npos);
  CHECK(text.find("epoch,train_loss,val_loss,lr") != std::string::npos);
  CHECK(std::count(text.begin(), text.end(), '\n') == 4);
}

TEST_CASE("parse_angle_grid") {
  auto g = parse_angle_grid("sza=0:60:15,vza=0:45:15");
  CHECK(g.szas == std::vector<double>{0, 15, 30, 45, 60});
  CHECK(g.vzas == std::vector<double>{0, 15, 30, 45});
  CHECK(g.razs == std::vector<double>{0});
  CHECK(g.geometries().size() == 20);

  auto single = parse_angle_grid("sza=30,vza=10,raz=90");
  CHECK(single.geometries().size() == 1);
  CHECK(single.geometries()[0].sza_deg == 30.0);
  CHECK(single.geometries()[0].raz_deg == 90.0);

  CHECK_THROWS_AS(parse_angle_grid("bogus=1:2:3"), TrainError);
  CHECK_THROWS_AS(parse_angle_grid("sza=60:0:15"), TrainError);
}

TEST_CASE("worker_threads honors CAAC_THREADS") {
  setenv("CAAC_THREADS", "3", 1);
  CHECK(worker_threads(0) == 3);
  CHECK(worker_threads(2) == 2);
  unsetenv("CAAC_THREADS");
  CHECK(worker_threads(5) == 5);
  CHECK(worker_threads(0) >= 1);
}

TEST_CASE("dataset_id is stable and seed-sensitive") {
  auto a = tiny_dataset(2, 900);
  auto b = tiny_dataset(2, 900);
  auto c = tiny_dataset(2, 901);
  CHECK(dataset_id(a) == dataset_id(b));
  CHECK(dataset_id(a) != dataset_id(c));
}
