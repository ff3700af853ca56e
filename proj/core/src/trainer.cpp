#include "caac/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "caac/hash.hpp"

namespace caac {

void TrainConfig::validate() const {
  if (epochs < 1) throw TrainError("epochs must be >= 1");
  if (batch_size == 0) throw TrainError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw TrainError("learning rate must be positive");
  if (noise_sigma < 0.0) throw TrainError("noise sigma must be nonnegative");
  auto check_range = [](const AngleRange& r, double lo, double hi,
                        const char* name) {
    if (r.lo > r.hi || r.lo < lo || r.hi > hi) {
      throw TrainError(std::string("invalid ") + name + " sampling range");
    }
  };
  check_range(ranges.sza, 0.0, 70.0, "sza");
  check_range(ranges.vza, 0.0, 60.0, "vza");
  check_range(ranges.raz, 0.0, 360.0, "raz");
  if (strategy == AngleStrategy::Fixed) fixed_geometry.validate();
}

ViewGeometry sample_geometry(Rng& rng, AngleStrategy strategy,
                             const AngleRanges& ranges,
                             const ViewGeometry& fixed,
                             double cloud_top_km) {
  if (strategy == AngleStrategy::Fixed) return fixed;
  ViewGeometry g;
  g.sza_deg = rng.uniform(ranges.sza.lo, ranges.sza.hi);
  g.vza_deg = rng.uniform(ranges.vza.lo, ranges.vza.hi);
  g.raz_deg = rng.uniform(ranges.raz.lo, ranges.raz.hi);
  if (g.raz_deg >= 360.0) g.raz_deg = 0.0;
  g.cloud_top_km = cloud_top_km;
  return g;
}

namespace {

double scene_loss(Tape& tape, const Regressor& model, const Scene& sc,
                  const RadianceField& rendered, Tensor* out_loss) {
  Tensor y = model.forward_log(tape, rendered);
  Tensor loss = loss_mse_log(tape, y, sc.cot);
  if (out_loss) *out_loss = loss;
  return loss.item();
}

}  // namespace

TrainResult train(Regressor& model, const Dataset& train_ds,
                  const Dataset& val_ds, const TrainConfig& config) {
  config.validate();
  if (train_ds.scenes.empty() || val_ds.scenes.empty()) {
    throw TrainError("train and val datasets must be nonempty");
  }
  check_disjoint_seeds({
      [&] {
        std::vector<std::uint64_t> s;
        for (const auto& sc : train_ds.scenes) s.push_back(sc.seed);
        return s;
      }(),
      [&] {
        std::vector<std::uint64_t> s;
        for (const auto& sc : val_ds.scenes) s.push_back(sc.seed);
        return s;
      }(),
  });

  auto params = model.params();
  // beta2 = 0.99: the second-moment estimate must adapt within the short
  // (few-thousand-step) runs this trainer targets
  Adam opt({config.lr, 0.9, 0.99, 1e-8}, params);
  const SceneParams& scene_params = train_ds.config.scene;

  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(train_ds.scenes.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(config.seed, 0x5105, epoch));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_size) {
      const std::size_t b1 = std::min(b0 + config.batch_size, order.size());
      Tape tape;
      Tensor batch_loss;
      std::vector<std::uint64_t> batch_seeds;
      try {
        for (std::size_t bi = b0; bi < b1; ++bi) {
          const Scene& sc = train_ds.scenes[order[bi]];
          batch_seeds.push_back(sc.seed);
          Rng geo_rng(derive_seed(config.seed, epoch, order[bi]));
          const ViewGeometry geom =
              sample_geometry(geo_rng, config.strategy, config.ranges,
                              config.fixed_geometry, config.cloud_top_km);
          const std::uint64_t noise_seed =
              derive_seed(config.seed ^ 0xA0A0ULL, epoch, order[bi]);
          const RadianceField r =
              render_scene(sc.cot, geom, scene_params, config.apply_3d,
                           config.noise_sigma, noise_seed);
          Tensor loss;
          scene_loss(tape, model, sc, r, &loss);
          batch_loss = batch_loss.valid() ? tape.add(batch_loss, loss) : loss;
        }
        batch_loss =
            tape.scale(batch_loss, 1.0 / static_cast<double>(b1 - b0));
        for (auto& p : params) p.zero_grad();
        tape.backward(batch_loss);
        opt.step(params);
      } catch (const NonFiniteError& e) {
        std::ostringstream os;
        os << "non-finite loss in epoch " << epoch << " (scene seeds:";
        for (auto s : batch_seeds) os << ' ' << s;
        os << "): " << e.what();
        throw TrainError(os.str());
      }
      epoch_loss += batch_loss.item();
      ++batches;
    }
    epoch_loss /= static_cast<double>(batches);

    // validation at deterministically sampled geometries
    double val_loss = 0.0;
    for (std::size_t vi = 0; vi < val_ds.scenes.size(); ++vi) {
      const Scene& sc = val_ds.scenes[vi];
      Rng geo_rng(derive_seed(config.seed ^ 0x7A17ULL, epoch, vi));
      const ViewGeometry geom =
          sample_geometry(geo_rng, config.strategy, config.ranges,
                          config.fixed_geometry, config.cloud_top_km);
      const std::uint64_t noise_seed =
          derive_seed(config.seed ^ 0xB1B1ULL, epoch, vi);
      const RadianceField r =
          render_scene(sc.cot, geom, val_ds.config.scene, config.apply_3d,
                       config.noise_sigma, noise_seed);
      Tape tape;
      val_loss += scene_loss(tape, model, sc, r, nullptr);
    }
    val_loss /= static_cast<double>(val_ds.scenes.size());

    result.history.push_back({epoch, epoch_loss, val_loss, config.lr});
    if (val_loss < result.best_val_loss) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch;
      result.best_params = snapshot_params(model);
    }
  }
  return result;
}

std::vector<ViewGeometry> AngleGrid::geometries() const {
  std::vector<ViewGeometry> out;
  for (double sza : szas) {
    for (double vza : vzas) {
      for (double raz : razs) {
        ViewGeometry g;
        g.sza_deg = sza;
        g.vza_deg = vza;
        g.raz_deg = raz;
        g.cloud_top_km = cloud_top_km;
        g.validate();
        out.push_back(g);
      }
    }
  }
  return out;
}

namespace {

std::vector<double> parse_sweep(const std::string& s) {
  std::vector<double> out;
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == ':') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  try {
    if (parts.size() == 1) {
      out.push_back(std::stod(parts[0]));
    } else if (parts.size() == 3) {
      const double start = std::stod(parts[0]);
      const double stop = std::stod(parts[1]);
      const double step = std::stod(parts[2]);
      if (step <= 0.0 || stop < start) {
        throw TrainError("bad sweep '" + s + "': need start<=stop, step>0");
      }
      for (double v = start; v <= stop + 1e-9; v += step) out.push_back(v);
    } else {
      throw TrainError("bad sweep '" + s + "': expected value or a:b:c");
    }
  } catch (const std::invalid_argument&) {
    throw TrainError("bad number in sweep '" + s + "'");
  }
  return out;
}

}  // namespace

AngleGrid parse_angle_grid(const std::string& spec) {
  AngleGrid grid;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) {
      throw TrainError("bad angle grid entry '" + item +
                       "': expected name=sweep");
    }
    const std::string name = item.substr(0, eq);
    const auto values = parse_sweep(item.substr(eq + 1));
    if (name == "sza") {
      grid.szas = values;
    } else if (name == "vza") {
      grid.vzas = values;
    } else if (name == "raz") {
      grid.razs = values;
    } else {
      throw TrainError("unknown angle '" + name + "' in grid spec");
    }
  }
  return grid;
}

Retrieved RegressorRetriever::retrieve(const RadianceField& r,
                                       const CotField&) const {
  return {model_->predict(r), {}};
}

Retrieved IpaRetriever::retrieve(const RadianceField& r,
                                 const CotField&) const {
  auto res = retrieve_ipa(r, *lut_);
  return {std::move(res.cot), std::move(res.saturated)};
}

Retrieved OracleRetriever::retrieve(const RadianceField&,
                                    const CotField& truth) const {
  return {truth, {}};
}

std::string dataset_id(const Dataset& ds) {
  std::ostringstream os;
  os << ds.config.seed_start << '|' << ds.scenes.size() << '|'
     << ds.config.height << 'x' << ds.config.width << '|'
     << ds.config.scene.beta << '|' << ds.config.scene.mu_ln << '|'
     << ds.config.scene.sigma_ln << '|' << ds.config.scene.f_clear;
  for (const auto& sc : ds.scenes) os << ',' << sc.seed;
  return hex64(fnv1a(os.str()));
}

std::size_t worker_threads(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("CAAC_THREADS")) {
    const long v = std::atol(env);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? hc : 1;
}

namespace {

struct TaskSums {
  std::size_t n = 0;
  double sq_tau = 0.0;
  double abs_tau = 0.0;
  double sq_log = 0.0;
  double rel = 0.0;
  std::size_t n_rel = 0;
  std::size_t n_sat = 0;
};

TaskSums accumulate_errors(const CotField& truth, const Retrieved& got) {
  TaskSums s;
  s.n = truth.tau.size();
  for (std::size_t i = 0; i < truth.tau.size(); ++i) {
    const double t = truth.tau[i];
    const double p = got.cot.tau[i];
    const double d = p - t;
    s.sq_tau += d * d;
    s.abs_tau += std::abs(d);
    const double dl = std::log1p(p) - std::log1p(t);
    s.sq_log += dl * dl;
    if (t > 0.1) {
      s.rel += std::abs(d) / t;
      ++s.n_rel;
    }
  }
  for (std::uint8_t b : got.saturated) s.n_sat += b;
  return s;
}

BinStat finalize_bin(double lo, double hi, const TaskSums& s) {
  BinStat b;
  b.lo = lo;
  b.hi = hi;
  b.n_pixels = s.n;
  if (s.n > 0) {
    b.rmse_tau = std::sqrt(s.sq_tau / static_cast<double>(s.n));
    b.mae_tau = s.abs_tau / static_cast<double>(s.n);
    b.rmse_log = std::sqrt(s.sq_log / static_cast<double>(s.n));
  }
  if (s.n_rel > 0) b.mean_rel = s.rel / static_cast<double>(s.n_rel);
  return b;
}

void merge(TaskSums& into, const TaskSums& from) {
  into.n += from.n;
  into.sq_tau += from.sq_tau;
  into.abs_tau += from.abs_tau;
  into.sq_log += from.sq_log;
  into.rel += from.rel;
  into.n_rel += from.n_rel;
  into.n_sat += from.n_sat;
}

}  // namespace

Metrics evaluate(const Retriever& retriever, const Dataset& testset,
                 const AngleGrid& grid, const EvalOptions& opts) {
  const auto geoms = grid.geometries();
  if (geoms.empty() || testset.scenes.empty()) {
    throw TrainError("evaluate needs a nonempty testset and angle grid");
  }
  const std::size_t n_scenes = testset.scenes.size();
  const std::size_t n_geoms = geoms.size();
  const std::size_t n_tasks = n_scenes * n_geoms;
  std::vector<TaskSums> sums(n_tasks);

  auto run_task = [&](std::size_t task) {
    const std::size_t si = task / n_geoms;
    const std::size_t gi = task % n_geoms;
    const Scene& sc = testset.scenes[si];
    const RadianceField r = render_scene(
        sc.cot, geoms[gi], testset.config.scene, opts.apply_3d,
        opts.noise_sigma, derive_seed(opts.seed, sc.seed, gi));
    sums[task] = accumulate_errors(sc.cot, retriever.retrieve(r, sc.cot));
  };

  const std::size_t n_threads = std::min(worker_threads(opts.threads), n_tasks);
  if (n_threads <= 1) {
    for (std::size_t t = 0; t < n_tasks; ++t) run_task(t);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (std::size_t w = 0; w < n_threads; ++w) {
      pool.emplace_back([&] {
        for (std::size_t t = next.fetch_add(1); t < n_tasks;
             t = next.fetch_add(1)) {
          run_task(t);
        }
      });
    }
    for (auto& th : pool) th.join();
  }

  // fixed-order reductions: overall, per sza bin, per vza bin, per geometry
  Metrics m;
  m.method = retriever.name();
  m.testset_id = dataset_id(testset);

  TaskSums overall;
  const double sza_bin_w = 10.0, vza_bin_w = 15.0;
  const std::size_t n_sza_bins = 7;  // [0, 70)
  const std::size_t n_vza_bins = 4;  // [0, 60)
  std::vector<TaskSums> sza_sums(n_sza_bins), vza_sums(n_vza_bins);
  std::vector<TaskSums> geom_sums(n_geoms);

  for (std::size_t task = 0; task < n_tasks; ++task) {
    const std::size_t gi = task % n_geoms;
    merge(overall, sums[task]);
    const std::size_t sb = std::min<std::size_t>(
        static_cast<std::size_t>(geoms[gi].sza_deg / sza_bin_w),
        n_sza_bins - 1);
    const std::size_t vb = std::min<std::size_t>(
        static_cast<std::size_t>(geoms[gi].vza_deg / vza_bin_w),
        n_vza_bins - 1);
    merge(sza_sums[sb], sums[task]);
    merge(vza_sums[vb], sums[task]);
    merge(geom_sums[gi], sums[task]);
  }

  const BinStat all = finalize_bin(0, 0, overall);
  m.rmse_tau = all.rmse_tau;
  m.mae_tau = all.mae_tau;
  m.rmse_log = all.rmse_log;
  m.mean_rel = all.mean_rel;
  m.n_pixels = overall.n;
  m.saturation_fraction =
      overall.n > 0
          ? static_cast<double>(overall.n_sat) / static_cast<double>(overall.n)
          : 0.0;

  double best = std::numeric_limits<double>::infinity(), worst = 0.0;
  for (std::size_t b = 0; b < n_sza_bins; ++b) {
    if (sza_sums[b].n == 0) continue;
    BinStat bs = finalize_bin(b * sza_bin_w, (b + 1) * sza_bin_w, sza_sums[b]);
    best = std::min(best, bs.rmse_tau);
    worst = std::max(worst, bs.rmse_tau);
    m.sza_bins.push_back(bs);
  }
  m.flatness = (best > 0.0 && std::isfinite(best)) ? worst / best : 1.0;
  for (std::size_t b = 0; b < n_vza_bins; ++b) {
    if (vza_sums[b].n == 0) continue;
    m.vza_bins.push_back(
        finalize_bin(b * vza_bin_w, (b + 1) * vza_bin_w, vza_sums[b]));
  }
  for (std::size_t gi = 0; gi < n_geoms; ++gi) {
    GeomStat gs;
    gs.geom = geoms[gi];
    const BinStat bs = finalize_bin(0, 0, geom_sums[gi]);
    gs.rmse_tau = bs.rmse_tau;
    gs.rmse_log = bs.rmse_log;
    m.per_geometry.push_back(gs);
  }
  return m;
}

Comparison compare(const std::vector<Metrics>& metrics,
                   const std::string& reference) {
  if (metrics.empty()) throw TrainError("compare needs at least one input");
  for (const auto& m : metrics) {
    if (m.testset_id != metrics.front().testset_id) {
      throw TrainError("testset id mismatch: '" + m.method + "' was "
                       "evaluated on " + m.testset_id + ", expected " +
                       metrics.front().testset_id);
    }
  }
  const Metrics* ref = nullptr;
  for (const auto& m : metrics) {
    if (m.method == reference) ref = &m;
  }
  if (!ref) ref = &metrics.front();

  Comparison c;
  c.reference = ref->method;
  c.testset_id = ref->testset_id;
  for (const auto& m : metrics) {
    ComparisonRow row;
    row.method = m.method;
    row.rmse_tau = m.rmse_tau;
    row.rmse_log = m.rmse_log;
    row.ratio_to_ref = ref->rmse_tau > 0.0 ? m.rmse_tau / ref->rmse_tau : 1.0;
    row.flatness = m.flatness;
    c.rows.push_back(row);
  }
  return c;
}

std::string comparison_table(const Comparison& c) {
  std::ostringstream os;
  os << "method        rmse_tau    rmse_log    rmse/" << c.reference
     << "   flatness\n";
  char buf[160];
  for (const auto& r : c.rows) {
    std::snprintf(buf, sizeof(buf), "%-12s %9.4f  %9.4f  %9.3f  %9.3f\n",
                  r.method.c_str(), r.rmse_tau, r.rmse_log, r.ratio_to_ref,
                  r.flatness);
    os << buf;
  }
  return os.str();
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

}  // namespace

void write_history_csv(const std::filesystem::path& path,
                       const std::vector<EpochRecord>& history,
                       const std::string& config_hash) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw TrainError("cannot write history: " + path.string());
  os << "# config_hash=" << config_hash << "\n";
  os << "epoch,train_loss,val_loss,lr\n";
  for (const auto& e : history) {
    os << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.val_loss) << ','
       << fmt(e.lr) << "\n";
  }
}

void write_metrics_csv(const std::filesystem::path& path, const Metrics& m,
                       const std::string& config_hash) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw TrainError("cannot write metrics: " + path.string());
  os << "# config_hash=" << config_hash << "\n";
  os << "# testset_id=" << m.testset_id << "\n";
  os << "method,kind,lo,hi,sza,vza,raz,rmse_tau,mae_tau,rmse_log,mean_rel,"
        "saturation,n_pixels,flatness\n";
  os << m.method << ",overall,,,,,," << fmt(m.rmse_tau) << ','
     << fmt(m.mae_tau) << ',' << fmt(m.rmse_log) << ',' << fmt(m.mean_rel)
     << ',' << fmt(m.saturation_fraction) << ',' << m.n_pixels << ','
     << fmt(m.flatness) << "\n";
  for (const auto& b : m.sza_bins) {
    os << m.method << ",sza_bin," << fmt(b.lo) << ',' << fmt(b.hi) << ",,,,"
       << fmt(b.rmse_tau) << ',' << fmt(b.mae_tau) << ',' << fmt(b.rmse_log)
       << ',' << fmt(b.mean_rel) << ",," << b.n_pixels << ",\n";
  }
  for (const auto& b : m.vza_bins) {
    os << m.method << ",vza_bin," << fmt(b.lo) << ',' << fmt(b.hi) << ",,,,"
       << fmt(b.rmse_tau) << ',' << fmt(b.mae_tau) << ',' << fmt(b.rmse_log)
       << ',' << fmt(b.mean_rel) << ",," << b.n_pixels << ",\n";
  }
  for (const auto& g : m.per_geometry) {
    os << m.method << ",geom,,," << fmt(g.geom.sza_deg) << ','
       << fmt(g.geom.vza_deg) << ',' << fmt(g.geom.raz_deg) << ','
       << fmt(g.rmse_tau) << ",," << fmt(g.rmse_log) << ",,,,\n";
  }
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double to_d(const std::string& s) { return s.empty() ? 0.0 : std::stod(s); }

}  // namespace

Metrics read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw TrainError("cannot open metrics csv: " + path.string());
  Metrics m;
  std::string line;
  bool have_overall = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.rfind("# testset_id=", 0) == 0) {
      m.testset_id = line.substr(std::string("# testset_id=").size());
      continue;
    }
    if (line[0] == '#' || line.rfind("method,", 0) == 0) continue;
    const auto f = split_csv_line(line);
    if (f.size() < 14) continue;
    const std::string& kind = f[1];
    if (kind == "overall") {
      m.method = f[0];
      m.rmse_tau = to_d(f[7]);
      m.mae_tau = to_d(f[8]);
      m.rmse_log = to_d(f[9]);
      m.mean_rel = to_d(f[10]);
      m.saturation_fraction = to_d(f[11]);
      m.n_pixels = static_cast<std::size_t>(to_d(f[12]));
      m.flatness = to_d(f[13]);
      have_overall = true;
    } else if (kind == "sza_bin" || kind == "vza_bin") {
      BinStat b;
      b.lo = to_d(f[2]);
      b.hi = to_d(f[3]);
      b.rmse_tau = to_d(f[7]);
      b.mae_tau = to_d(f[8]);
      b.rmse_log = to_d(f[9]);
      b.mean_rel = to_d(f[10]);
      b.n_pixels = static_cast<std::size_t>(to_d(f[12]));
      (kind == "sza_bin" ? m.sza_bins : m.vza_bins).push_back(b);
    } else if (kind == "geom") {
      GeomStat g;
      g.geom.sza_deg = to_d(f[4]);
      g.geom.vza_deg = to_d(f[5]);
      g.geom.raz_deg = to_d(f[6]);
      g.rmse_tau = to_d(f[7]);
      g.rmse_log = to_d(f[9]);
      m.per_geometry.push_back(g);
    }
  }
  if (!have_overall) {
    throw TrainError("metrics csv has no overall row: " + path.string());
  }
  return m;
}

void write_comparison_csv(const std::filesystem::path& path,
                          const Comparison& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw TrainError("cannot write comparison: " + path.string());
  os << "# testset_id=" << c.testset_id << "\n";
  os << "# reference=" << c.reference << "\n";
  os << "method,rmse_tau,rmse_log,ratio_to_reference,flatness\n";
  for (const auto& r : c.rows) {
    os << r.method << ',' << fmt(r.rmse_tau) << ',' << fmt(r.rmse_log) << ','
       << fmt(r.ratio_to_ref) << ',' << fmt(r.flatness) << "\n";
  }
}

}  // namespace caac
