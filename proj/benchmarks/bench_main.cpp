#include <benchmark/benchmark.h>

#include "rsfr/backbone.hpp"
#include "rsfr/dtfit.hpp"
#include "rsfr/fusion.hpp"
#include "rsfr/kspace.hpp"
#include "rsfr/metrics.hpp"
#include "rsfr/phantom.hpp"
#include "rsfr/random.hpp"

using namespace rsfr;
using nn::Var;

namespace {

std::vector<double> uniform(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

Image phantom_slice() {
  const phantom::PhantomSpec s;
  return kspace::normalize_minmax(phantom::simulate_dwis(phantom::generate_tensor_field(s), s).slices[4]);
}

void BM_SelectiveScan(benchmark::State& state) {
  const int L = static_cast<int>(state.range(0)), E = 64, N = 8;
  Rng rng(1);
  const auto u = Var::constant(L, E, uniform(rng, L * E, -1, 1));
  const auto delta = Var::constant(L, E, uniform(rng, L * E, 0.01, 0.5));
  const auto a_log = Var::constant(E, N, uniform(rng, E * N, -0.5, 0.5));
  const auto b = Var::constant(L, N, uniform(rng, L * N, -1, 1));
  const auto c = Var::constant(L, N, uniform(rng, L * N, -1, 1));
  const auto d = Var::constant(1, E, uniform(rng, E, -1, 1));
  nn::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(backbone::selective_scan(u, delta, a_log, b, c, d).item());
  state.SetItemsProcessed(state.iterations() * L);
}
BENCHMARK(BM_SelectiveScan)->Arg(144)->Arg(576);

void BM_CentredDft(benchmark::State& state) {
  const Shape2 shape{static_cast<int>(state.range(0)), static_cast<int>(state.range(1))};
  Rng rng(2);
  kspace::ComplexGrid g(shape);
  for (auto& v : g.values) v = {rng.uniform(), rng.uniform()};
  for (auto _ : state) benchmark::DoNotOptimize(kspace::fft2c(g).values.data());
}
BENCHMARK(BM_CentredDft)->Args({96, 96})->Args({256, 96});

void BM_TensorFit(benchmark::State& state) {
  const phantom::PhantomSpec s;
  const auto field = phantom::generate_tensor_field(s);
  const auto series = phantom::simulate_dwis(field, s);
  for (auto _ : state) benchmark::DoNotOptimize(dtfit::fit_tensor_lls(series, field.myo_mask).tensors.data());
}
BENCHMARK(BM_TensorFit)->Unit(benchmark::kMillisecond);

void BM_Ssim(benchmark::State& state) {
  const Image a = phantom_slice();
  Image b = a;
  Rng rng(3);
  for (double& v : b.pixels()) v += rng.uniform(-0.05, 0.05);
  for (auto _ : state) benchmark::DoNotOptimize(metrics::ssim(a, b));
}
BENCHMARK(BM_Ssim)->Unit(benchmark::kMillisecond);

void BM_ToyRefine(benchmark::State& state) {
  const fusion::RefinementModel model(backbone::BackboneConfig::toy());
  const Image x = phantom_slice();
  const auto prior = semantics::fallback_segment(x);
  for (auto _ : state) benchmark::DoNotOptimize(model.refine(x, prior).pixels().data());
}
BENCHMARK(BM_ToyRefine)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
