// Microbenchmarks for the hot paths: tensor matmul, the full model
// forward/backward step, scene rendering, and LUT retrieval.
//
// Build with google-benchmark installed; run ./benchmarks/caac_bench.

#include <benchmark/benchmark.h>

#include "caac/baselines.hpp"
#include "caac/model.hpp"
#include "caac/rng.hpp"
#include "caac/scene.hpp"
#include "caac/tensor.hpp"

using namespace caac;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c,
                     bool requires_grad = false) {
  std::vector<double> d(r * c);
  for (double& v : d) v = rng.uniform(-1.0, 1.0);
  return Tensor({r, c}, std::move(d), requires_grad);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  Tensor a = random_matrix(rng, n, n);
  Tensor b = random_matrix(rng, n, n);
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(tape.matmul(a, b));
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_ModelForward(benchmark::State& state) {
  CaacModel model(CaacConfig{}, 1);
  Rng rng(2);
  RadianceField r;
  r.height = r.width = 32;
  r.geometry = {30.0, 10.0, 45.0, 1.0};
  r.reflectance.resize(32 * 32);
  for (double& v : r.reflectance) v = rng.uniform(0.0, 1.0);
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(model.forward_log(tape, r));
  }
}
BENCHMARK(BM_ModelForward);

void BM_ModelTrainStep(benchmark::State& state) {
  CaacModel model(CaacConfig{}, 1);
  SceneParams sp;
  auto cot = generate_cot_field(3, 32, 32, sp);
  auto r = render_scene(cot, {30.0, 10.0, 45.0, 1.0}, sp, true, 0.02, 7);
  auto params = model.params();
  Adam adam(Adam::Config{}, params);
  for (auto _ : state) {
    for (auto& p : params) p.zero_grad();
    Tape tape;
    Tensor loss = loss_mse_log(tape, model.forward_log(tape, r), cot);
    tape.backward(loss);
    adam.step(params);
  }
}
BENCHMARK(BM_ModelTrainStep);

void BM_RenderScene(benchmark::State& state) {
  SceneParams sp;
  auto cot = generate_cot_field(5, 32, 32, sp);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        render_scene(cot, {30.0, 10.0, 45.0, 1.0}, sp, true, 0.02, 9));
  }
}
BENCHMARK(BM_RenderScene);

void BM_GenerateCotField(benchmark::State& state) {
  SceneParams sp;
  std::uint64_t seed = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(generate_cot_field(seed++, 32, 32, sp));
  }
}
BENCHMARK(BM_GenerateCotField);

void BM_RetrieveIpa(benchmark::State& state) {
  SceneParams sp;
  IpaLut lut = build_lut(sp.g, default_tau_grid(sp.tau_max),
                         default_mu0_grid());
  auto cot = generate_cot_field(6, 32, 32, sp);
  auto r = render_scene(cot, {30.0, 10.0, 45.0, 1.0}, sp, true, 0.02, 11);
  for (auto _ : state) {
    benchmark::DoNotOptimize(retrieve_ipa(r, lut));
  }
}
BENCHMARK(BM_RetrieveIpa);

}  // namespace

BENCHMARK_MAIN();
