#include <benchmark/benchmark.h>

#include <vector>

#include "gibbscs/prior_model.hpp"
#include "gibbscs/random.hpp"
#include "gibbscs/sampler.hpp"
#include "gibbscs/sensing.hpp"
#include "gibbscs/trainer.hpp"

using namespace gibbscs;

namespace {

Image noise_image(Eigen::Index n, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image x(n, n);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  return x;
}

SolverOptions solver(int method) {
  SolverOptions s;
  s.method = method ? SolverOptions::Method::kConjugateGradient : SolverOptions::Method::kDenseCholesky;
  return s;
}

}  // namespace

// One block-Gibbs sweep of the prior; args: side, solver (0 dense, 1 cg)
static void BM_PriorSweep(benchmark::State& state) {
  const auto n = static_cast<Eigen::Index>(state.range(0));
  const PriorModel model = preset_model("bcnn2", 1);
  Rng rng(1);
  std::vector<Image> x{noise_image(n, rng)};
  const SolverOptions opts = solver(static_cast<int>(state.range(1)));
  for (auto _ : state) {
    x = run_prior_chain(model, x, 1, opts, rng);
    benchmark::DoNotOptimize(x[0].data());
  }
}
BENCHMARK(BM_PriorSweep)->Args({16, 0})->Args({16, 1})->Args({32, 0})->Args({32, 1})->Unit(benchmark::kMillisecond);

static void BM_ScaleUpdate(benchmark::State& state) {
  const auto n = static_cast<Eigen::Index>(state.range(0));
  const PriorModel model = preset_model("bcnn4", 1);
  Rng rng(2);
  const Image x = noise_image(n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(sample_scales_given_x(model, x, rng));
}
BENCHMARK(BM_ScaleUpdate)->Arg(32)->Arg(64)->Unit(benchmark::kMicrosecond);

// Restoration chain iterations per second at MR 0.25
static void BM_RestorationIteration(benchmark::State& state) {
  const auto n = static_cast<Eigen::Index>(state.range(0));
  const PriorModel model = preset_model("bcnn2", 1);
  Rng rng(3);
  const Image x = noise_image(n, rng);
  const auto op = MeasurementOperator::gaussian(measurements_for_ratio(0.25, n * n), n * n, 3);
  const Vector y = measure(op, x).y;
  ChainOptions opts;
  opts.iterations = 2;
  opts.burn_in = 1;
  for (auto _ : state) {
    const auto result = run_restoration_chain(model, op.matrix(), y, n, n, opts, rng);
    benchmark::DoNotOptimize(result.restored.data());
  }
  state.SetItemsProcessed(state.iterations() * opts.iterations);
}
BENCHMARK(BM_RestorationIteration)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_ExponentGradients(benchmark::State& state) {
  const PriorModel model = preset_model("bcnn5", 1);
  Rng rng(4);
  const Image x = noise_image(20, rng);
  for (auto _ : state) benchmark::DoNotOptimize(exponent_gradients(model, x));
}
BENCHMARK(BM_ExponentGradients)->Unit(benchmark::kMicrosecond);

static void BM_CdUpdate(benchmark::State& state) {
  const PriorModel model = preset_model("bcnn2", 1);
  Rng rng(5);
  std::vector<Image> batch;
  for (int i = 0; i < 64; ++i) batch.push_back(noise_image(20, rng));
  TrainingConfig config;
  for (auto _ : state) benchmark::DoNotOptimize(cd_update(model, batch, config, rng));
}
BENCHMARK(BM_CdUpdate)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
