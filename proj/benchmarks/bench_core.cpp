#include <benchmark/benchmark.h>

#include "cvc/features.hpp"
#include "cvc/forest.hpp"
#include "cvc/raster.hpp"
#include "cvc/segnet.hpp"
#include "cvc/synthgen.hpp"

using namespace cvc;

namespace {

ProbMap noise_map(int n, std::uint64_t seed) {
  Rng rng(seed);
  ProbMap m(n, n);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform();
  return m;
}

void BM_GaussianBlur(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const ProbMap m = noise_map(n, 1);
  for (auto _ : state) benchmark::DoNotOptimize(gaussian_blur(m, n / 64.0));
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_GaussianBlur)->Arg(128)->Arg(512);

void BM_Dilate(benchmark::State& state) {
  const Phantom p = generate_phantom(PhantomConfig{}, 3);
  const BinaryMask m = catheter_mask(p.catheters, 128, 128, 2.0);
  const int r = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(dilate(m, r));
}
BENCHMARK(BM_Dilate)->Arg(2)->Arg(5);

void BM_SegnetForward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto params = SegNetParams::random(SegNetConfig{}, 1);
  const ProbMap noise = noise_map(n, 2);
  const GrayImage img(n, n, std::vector<double>(noise.pixels().begin(), noise.pixels().end()));
  for (auto _ : state) benchmark::DoNotOptimize(forward(params, img));
}
BENCHMARK(BM_SegnetForward)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_Hog(benchmark::State& state) {
  const ProbMap m = noise_map(128, 3);
  const HogConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(hog(m, cfg));
}
BENCHMARK(BM_Hog);

void BM_FitForest(benchmark::State& state) {
  const std::size_t rows = 400, cols = static_cast<std::size_t>(state.range(0));
  Rng rng(4);
  Matrix X(rows, cols);
  std::vector<int> y(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    y[i] = static_cast<int>(i % 2);
    for (std::size_t c = 0; c < cols; ++c) X(i, c) = rng.normal() + (c < 5 && y[i] ? 1.0 : 0.0);
  }
  ForestConfig cfg;
  cfg.n_trees = 50;
  for (auto _ : state) benchmark::DoNotOptimize(fit_forest(X, y, cfg));
}
BENCHMARK(BM_FitForest)->Arg(100)->Arg(2000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
