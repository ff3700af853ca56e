#include "caac/model.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "caac/rng.hpp"

namespace caac {

using nlohmann::json;

namespace {

constexpr double kDegToRad = M_PI / 180.0;
constexpr char kCkptMagic[] = "CAACCKPT1\n";

Tensor xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out,
              double scale = 1.0) {
  const double bound =
      scale * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> d(fan_in * fan_out);
  for (double& v : d) v = rng.uniform(-bound, bound);
  return Tensor({fan_in, fan_out}, std::move(d), true);
}

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor ones_param(Shape shape) {
  return Tensor::full(std::move(shape), 1.0, true);
}

}  // namespace

std::string angle_mode_name(AngleMode m) {
  switch (m) {
    case AngleMode::Additive: return "additive";
    case AngleMode::Concat: return "concat";
    case AngleMode::Off: return "off";
  }
  return "additive";
}

AngleMode angle_mode_from_name(const std::string& s) {
  if (s == "additive") return AngleMode::Additive;
  if (s == "concat") return AngleMode::Concat;
  if (s == "off") return AngleMode::Off;
  throw ModelError("unknown angle_mode: " + s);
}

void CaacConfig::validate() const {
  if (patch == 0 || d_model == 0 || heads == 0 || layers == 0 || d_ff == 0 ||
      angle_mlp == 0) {
    throw ModelError("model dimensions must be positive");
  }
  if (d_model % heads != 0) {
    throw ModelError("d_model must be divisible by heads");
  }
  if (!(tau_max > 0.0)) throw ModelError("tau_max must be positive");
}

double embed_reflectance(double r) {
  return std::log1p(r / (1.02 - r)) - 1.0;
}

std::vector<double> align_to_nadir(const RadianceField& r) {
  const long shift = parallax_shift_px(r.geometry, kNominalPixelSizeKm);
  const double raz_rad = r.geometry.raz_deg * kDegToRad;
  const long dx = std::lround(static_cast<double>(shift) * std::cos(raz_rad));
  const long dy = std::lround(static_cast<double>(shift) * std::sin(raz_rad));
  if (dx == 0 && dy == 0) return r.reflectance;
  const long lh = static_cast<long>(r.height);
  const long lw = static_cast<long>(r.width);
  std::vector<double> out(r.reflectance.size());
  for (long row = 0; row < lh; ++row) {
    for (long col = 0; col < lw; ++col) {
      const long sr = ((row + dy) % lh + lh) % lh;
      const long sc = ((col + dx) % lw + lw) % lw;
      out[row * lw + col] = r.reflectance[sr * lw + sc];
    }
  }
  return out;
}

std::vector<double> angle_features(const ViewGeometry& geom) {
  const double sza = geom.sza_deg * kDegToRad;
  const double vza = geom.vza_deg * kDegToRad;
  const double raz = geom.raz_deg * kDegToRad;
  return {std::cos(sza), std::sin(sza), std::cos(vza),
          std::sin(vza), std::cos(raz), std::sin(raz)};
}

std::vector<double> sinusoidal_position(std::size_t t, std::size_t d) {
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double freq =
        std::pow(10000.0, -2.0 * static_cast<double>(i / 2) /
                              static_cast<double>(d));
    const double arg = static_cast<double>(t) * freq;
    out[i] = (i % 2 == 0) ? std::sin(arg) : std::cos(arg);
  }
  return out;
}

CotField Regressor::predict(const RadianceField& r) const {
  Tape tape;
  Tensor y = forward_log(tape, r);
  CotField out;
  out.height = r.height;
  out.width = r.width;
  out.pixel_size_km = 0.1;
  out.tau.resize(y.numel());
  const double cap = tau_cap();
  for (std::size_t i = 0; i < out.tau.size(); ++i) {
    out.tau[i] = std::min(std::max(std::expm1(y.data()[i]), 0.0), cap);
  }
  return out;
}

CaacModel::CaacModel(CaacConfig config, std::uint64_t init_seed)
    : cfg_(config) {
  cfg_.validate();
  Rng rng(mix_seed(init_seed ^ 0xCAACULL));
  const std::size_t p2 = cfg_.patch * cfg_.patch;
  const std::size_t d = cfg_.d_model;

  patch_w_ = xavier(rng, p2, d);
  patch_b_ = zeros_param({1, d});
  angle_w1_ = xavier(rng, 6, cfg_.angle_mlp);
  angle_b1_ = zeros_param({1, cfg_.angle_mlp});
  angle_w2_ = xavier(rng, cfg_.angle_mlp, d);
  angle_b2_ = zeros_param({1, d});
  layers_.resize(cfg_.layers);
  for (auto& l : layers_) {
    l.ln1_gain = ones_param({d});
    l.ln1_bias = zeros_param({d});
    l.wq = xavier(rng, d, d);
    l.bq = zeros_param({1, d});
    l.wk = xavier(rng, d, d);
    l.bk = zeros_param({1, d});
    l.wv = xavier(rng, d, d);
    l.bv = zeros_param({1, d});
    l.wo = xavier(rng, d, d);
    l.bo = zeros_param({1, d});
    l.ln2_gain = ones_param({d});
    l.ln2_bias = zeros_param({d});
    l.ff_w1 = xavier(rng, d, cfg_.d_ff);
    l.ff_b1 = zeros_param({1, cfg_.d_ff});
    l.ff_w2 = xavier(rng, cfg_.d_ff, d);
    l.ff_b2 = zeros_param({1, d});
  }
  lnf_gain_ = ones_param({d});
  lnf_bias_ = zeros_param({d});
  head_w_ = xavier(rng, d, p2, 0.1);
  // Start predictions at a nominal corpus mean of log1p(tau) instead of 0:
  // Adam moves each element by at most ~lr per step, so a zero bias would
  // spend thousands of steps closing a pure DC offset.
  head_b_ = Tensor::full({1, p2}, 2.0, true);
}

std::vector<std::pair<std::string, Tensor>> CaacModel::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("patch_w", patch_w_);
  out.emplace_back("patch_b", patch_b_);
  out.emplace_back("angle_w1", angle_w1_);
  out.emplace_back("angle_b1", angle_b1_);
  out.emplace_back("angle_w2", angle_w2_);
  out.emplace_back("angle_b2", angle_b2_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    out.emplace_back(p + "ln1_gain", l.ln1_gain);
    out.emplace_back(p + "ln1_bias", l.ln1_bias);
    out.emplace_back(p + "wq", l.wq);
    out.emplace_back(p + "bq", l.bq);
    out.emplace_back(p + "wk", l.wk);
    out.emplace_back(p + "bk", l.bk);
    out.emplace_back(p + "wv", l.wv);
    out.emplace_back(p + "bv", l.bv);
    out.emplace_back(p + "wo", l.wo);
    out.emplace_back(p + "bo", l.bo);
    out.emplace_back(p + "ln2_gain", l.ln2_gain);
    out.emplace_back(p + "ln2_bias", l.ln2_bias);
    out.emplace_back(p + "ff_w1", l.ff_w1);
    out.emplace_back(p + "ff_b1", l.ff_b1);
    out.emplace_back(p + "ff_w2", l.ff_w2);
    out.emplace_back(p + "ff_b2", l.ff_b2);
  }
  out.emplace_back("lnf_gain", lnf_gain_);
  out.emplace_back("lnf_bias", lnf_bias_);
  out.emplace_back("head_w", head_w_);
  out.emplace_back("head_b", head_b_);
  return out;
}

std::vector<Tensor> CaacModel::params() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

std::size_t CaacModel::param_count() const {
  std::size_t n = 0;
  for (const auto& t : params()) n += t.numel();
  return n;
}

Tensor CaacModel::angle_code(Tape& tape, const ViewGeometry& geom) const {
  if (cfg_.angle_mode == AngleMode::Off) {
    return Tensor::zeros({1, cfg_.d_model});
  }
  Tensor f({1, 6}, angle_features(geom));
  Tensor h = tape.gelu(
      tape.add_rowvec(tape.matmul(f, angle_w1_), angle_b1_));
  return tape.add_rowvec(tape.matmul(h, angle_w2_), angle_b2_);
}

Tensor CaacModel::tokenize(Tape& tape, const RadianceField& r) const {
  const std::size_t p = cfg_.patch;
  if (r.height % p != 0 || r.width % p != 0) {
    throw ModelError("patch size " + std::to_string(p) +
                     " must divide scene dimensions " +
                     std::to_string(r.height) + "x" + std::to_string(r.width));
  }
  const std::size_t ph = r.height / p, pw = r.width / p;
  const std::size_t t_count = ph * pw, p2 = p * p;
  // the alignment consumes viewing angles, so the geometry-blind ablation
  // (angle_mode = off) must skip it along with the angle code
  const std::vector<double> refl = cfg_.angle_mode == AngleMode::Off
                                       ? r.reflectance
                                       : align_to_nadir(r);
  std::vector<double> patches(t_count * p2);
  for (std::size_t pi = 0; pi < ph; ++pi) {
    for (std::size_t pj = 0; pj < pw; ++pj) {
      const std::size_t t = pi * pw + pj;
      for (std::size_t di = 0; di < p; ++di) {
        for (std::size_t dj = 0; dj < p; ++dj) {
          patches[t * p2 + di * p + dj] = embed_reflectance(
              refl[(pi * p + di) * r.width + (pj * p + dj)]);
        }
      }
    }
  }
  Tensor x({t_count, p2}, std::move(patches));
  Tensor tokens = tape.add_rowvec(tape.matmul(x, patch_w_), patch_b_);
  if (cfg_.positional) {
    std::vector<double> pos(t_count * cfg_.d_model);
    for (std::size_t t = 0; t < t_count; ++t) {
      auto row = sinusoidal_position(t, cfg_.d_model);
      for (std::size_t j = 0; j < cfg_.d_model; ++j) {
        pos[t * cfg_.d_model + j] = kPositionScale * row[j];
      }
    }
    tokens = tape.add(tokens, Tensor({t_count, cfg_.d_model}, std::move(pos)));
  }
  return tokens;
}

Tensor CaacModel::encoder_block(Tape& tape, const Tensor& tokens,
                                std::size_t layer, ForwardTrace* trace) const {
  const auto& l = layers_.at(layer);
  const std::size_t d = cfg_.d_model;
  const std::size_t dh = d / cfg_.heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor h = tape.layer_norm(tokens, l.ln1_gain, l.ln1_bias);
  Tensor q = tape.add_rowvec(tape.matmul(h, l.wq), l.bq);
  Tensor k = tape.add_rowvec(tape.matmul(h, l.wk), l.bk);
  Tensor v = tape.add_rowvec(tape.matmul(h, l.wv), l.bv);

  std::vector<Tensor> head_outs;
  head_outs.reserve(cfg_.heads);
  if (trace) trace->attention.emplace_back();
  for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
    Tensor qh = tape.slice_cols(q, hd * dh, (hd + 1) * dh);
    Tensor kh = tape.slice_cols(k, hd * dh, (hd + 1) * dh);
    Tensor vh = tape.slice_cols(v, hd * dh, (hd + 1) * dh);
    Tensor scores =
        tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dh);
    Tensor attn = tape.softmax(scores);
    if (trace) trace->attention.back().push_back(attn);
    head_outs.push_back(tape.matmul(attn, vh));
  }
  Tensor merged = tape.concat_cols(head_outs);
  Tensor attn_out = tape.add_rowvec(tape.matmul(merged, l.wo), l.bo);
  Tensor x = tape.add(tokens, attn_out);

  Tensor h2 = tape.layer_norm(x, l.ln2_gain, l.ln2_bias);
  Tensor ff = tape.add_rowvec(
      tape.matmul(tape.gelu(tape.add_rowvec(tape.matmul(h2, l.ff_w1),
                                            l.ff_b1)),
                  l.ff_w2),
      l.ff_b2);
  return tape.add(x, ff);
}

Tensor CaacModel::forward_log_traced(Tape& tape, const RadianceField& r,
                                     ForwardTrace* trace) const {
  const std::size_t p = cfg_.patch;
  const std::size_t ph = r.height / p, pw = r.width / p;
  const std::size_t t_count = ph * pw;

  Tensor x = tokenize(tape, r);
  switch (cfg_.angle_mode) {
    case AngleMode::Additive:
      x = tape.add_rowvec(x, angle_code(tape, r.geometry));
      break;
    case AngleMode::Concat:
      x = tape.concat_rows({x, angle_code(tape, r.geometry)});
      break;
    case AngleMode::Off:
      break;
  }
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    x = encoder_block(tape, x, i, trace);
  }
  if (cfg_.angle_mode == AngleMode::Concat) {
    x = tape.slice_rows(x, 0, t_count);
  }
  x = tape.layer_norm(x, lnf_gain_, lnf_bias_);
  Tensor y = tape.add_rowvec(tape.matmul(x, head_w_), head_b_);  // [T x p^2]

  // un-flatten patches back to image row-major order
  const std::size_t p2 = p * p;
  std::vector<std::size_t> index(r.height * r.width);
  for (std::size_t row = 0; row < r.height; ++row) {
    for (std::size_t col = 0; col < r.width; ++col) {
      const std::size_t t = (row / p) * pw + (col / p);
      index[row * r.width + col] = t * p2 + (row % p) * p + (col % p);
    }
  }
  return tape.gather(y, index, {r.height * r.width});
}

Tensor CaacModel::forward_log(Tape& tape, const RadianceField& r) const {
  return forward_log_traced(tape, r, nullptr);
}

void CaacModel::load_param_values(
    const std::vector<std::vector<double>>& values) {
  auto ps = params();
  if (values.size() != ps.size()) {
    throw ModelError("checkpoint parameter count mismatch: expected " +
                     std::to_string(ps.size()) + ", got " +
                     std::to_string(values.size()));
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (values[i].size() != ps[i].numel()) {
      throw ModelError("checkpoint parameter " + std::to_string(i) +
                       " length mismatch");
    }
    std::copy(values[i].begin(), values[i].end(), ps[i].data().begin());
  }
}

Tensor loss_mse_log(Tape& tape, const Tensor& pred_log,
                    const CotField& target) {
  if (pred_log.numel() != target.tau.size()) {
    throw ShapeError("loss_mse_log: prediction/target length mismatch (" +
                     std::to_string(pred_log.numel()) + " vs " +
                     std::to_string(target.tau.size()) + ")");
  }
  std::vector<double> t(target.tau.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::log1p(target.tau[i]);
  Tensor tt(pred_log.shape(), std::move(t));
  Tensor d = tape.sub(pred_log, tt);
  return tape.mean_all(tape.mul(d, d));
}

std::vector<std::vector<double>> snapshot_params(const Regressor& model) {
  std::vector<std::vector<double>> out;
  for (const auto& p : model.params()) {
    out.emplace_back(p.data().begin(), p.data().end());
  }
  return out;
}

std::string caac_config_to_json_string(const CaacConfig& c) {
  json j{{"patch", c.patch},
         {"d_model", c.d_model},
         {"heads", c.heads},
         {"layers", c.layers},
         {"d_ff", c.d_ff},
         {"angle_mlp", c.angle_mlp},
         {"angle_mode", angle_mode_name(c.angle_mode)},
         {"positional", c.positional},
         {"predict_log", c.predict_log},
         {"tau_max", c.tau_max}};
  return j.dump();
}

CaacConfig caac_config_from_json_string(const std::string& s) {
  json j = json::parse(s);
  CaacConfig c;
  c.patch = j.at("patch").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.angle_mlp = j.at("angle_mlp").get<std::size_t>();
  c.angle_mode = angle_mode_from_name(j.at("angle_mode").get<std::string>());
  c.positional = j.at("positional").get<bool>();
  c.predict_log = j.at("predict_log").get<bool>();
  c.tau_max = j.at("tau_max").get<double>();
  return c;
}

void save_checkpoint(const Regressor& model, const CheckpointInfo& info,
                     const std::filesystem::path& path) {
  json meta;
  meta["model_kind"] = info.model_kind;
  meta["config"] = json::parse(info.config_json);
  meta["provenance"] = info.provenance_json.empty()
                           ? json::object()
                           : json::parse(info.provenance_json);
  json params = json::array();
  for (const auto& [name, t] : model.named_params()) {
    params.push_back(json{{"name", name}, {"shape", t.shape()}});
  }
  meta["params"] = params;

  std::ofstream os(path, std::ios::binary);
  if (!os) throw ModelError("cannot open checkpoint for writing: " +
                            path.string());
  os.write(kCkptMagic, sizeof(kCkptMagic) - 1);
  const std::string line = meta.dump();
  os.write(line.data(), static_cast<std::streamsize>(line.size()));
  os.put('\n');
  for (const auto& [name, t] : model.named_params()) {
    std::vector<float> buf(t.numel());
    for (std::size_t i = 0; i < buf.size(); ++i)
      buf[i] = static_cast<float>(t.data()[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) throw ModelError("checkpoint write failed: " + path.string());
}

LoadedCheckpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ModelError("cannot open checkpoint: " + path.string());
  char magic[sizeof(kCkptMagic) - 1];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + sizeof(magic), kCkptMagic)) {
    throw ModelError("bad magic: not a CAACCKPT1 file: " + path.string());
  }
  std::string line;
  std::getline(is, line);
  if (!is) throw ModelError("missing checkpoint metadata line");
  json meta;
  try {
    meta = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ModelError("bad checkpoint metadata: " + std::string(e.what()));
  }

  LoadedCheckpoint out;
  out.info.model_kind = meta.at("model_kind").get<std::string>();
  out.info.config_json = meta.at("config").dump();
  out.info.provenance_json = meta.at("provenance").dump();
  for (const auto& pj : meta.at("params")) {
    out.param_layout.emplace_back(pj.at("name").get<std::string>(),
                                  pj.at("shape").get<Shape>());
  }
  for (const auto& [name, shape] : out.param_layout) {
    const std::size_t n = shape_numel(shape);
    std::vector<float> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (!is) throw ModelError("truncated checkpoint payload at " + name);
    out.values.emplace_back(buf.begin(), buf.end());
  }
  return out;
}

std::unique_ptr<CaacModel> load_caac_checkpoint(
    const std::filesystem::path& path) {
  LoadedCheckpoint ck = read_checkpoint(path);
  if (ck.info.model_kind != "caac") {
    throw ModelError("checkpoint holds a '" + ck.info.model_kind +
                     "' model, expected 'caac'");
  }
  auto model = std::make_unique<CaacModel>(
      caac_config_from_json_string(ck.info.config_json), 0);
  model->load_param_values(ck.values);
  return model;
}

}  // namespace caac
