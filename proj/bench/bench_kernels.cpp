#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "srnn/kernels.hpp"
#include "srnn/learning.hpp"
#include "srnn/systems.hpp"

namespace {

using Kernel = void (*)(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);

std::vector<double> random_buffer(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

// Args: M, K, N, threads (0 = serial reference).
template <Kernel parallel, Kernel serial>
void run_kernel(benchmark::State& state, std::size_t a_size, std::size_t b_size, std::size_t c_size) {
  const auto M = static_cast<std::size_t>(state.range(0));
  const auto K = static_cast<std::size_t>(state.range(1));
  const auto N = static_cast<std::size_t>(state.range(2));
  const int threads = static_cast<int>(state.range(3));
  const auto A = random_buffer(a_size, 1), B = random_buffer(b_size, 2);
  std::vector<double> C(c_size);
  if (threads > 0) srnn::kernels::set_num_threads(threads);
  for (auto _ : state) {
    if (threads > 0)
      parallel(A.data(), B.data(), C.data(), M, K, N);
    else
      serial(A.data(), B.data(), C.data(), M, K, N);
    benchmark::DoNotOptimize(C.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(M * K * N));
  state.SetLabel(threads > 0 ? "openmp x" + std::to_string(threads) : "reference");
}

void BM_matmul(benchmark::State& s) {
  const auto M = s.range(0), K = s.range(1), N = s.range(2);
  run_kernel<srnn::kernels::matmul, srnn::kernels::reference::matmul>(s, M * K, K * N, M * N);
}
void BM_matmul_nt(benchmark::State& s) {
  const auto M = s.range(0), K = s.range(1), N = s.range(2);
  run_kernel<srnn::kernels::matmul_nt, srnn::kernels::reference::matmul_nt>(s, M * K, N * K, M * N);
}
void BM_matmul_tn(benchmark::State& s) {
  const auto M = s.range(0), K = s.range(1), N = s.range(2);
  run_kernel<srnn::kernels::matmul_tn, srnn::kernels::reference::matmul_tn>(s, M * K, M * N, K * N);
}

// MLP layer shapes: batch 256, two-body input 24, width 256.
void kernel_args(benchmark::internal::Benchmark* b) {
  for (auto shape : {std::vector<std::int64_t>{256, 24, 256}, {256, 256, 256}, {1024, 256, 256}})
    for (std::int64_t t : {0, 1, 2, 4}) b->Args({shape[0], shape[1], shape[2], t});
}

BENCHMARK(BM_matmul)->Apply(kernel_args)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_matmul_nt)->Apply(kernel_args)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_matmul_tn)->Apply(kernel_args)->Unit(benchmark::kMicrosecond);

// One training batch: LieT2 rollout, loss and gradient through a width-64 MLP.
void BM_batch_loss(benchmark::State& state) {
  srnn::kernels::set_num_threads(static_cast<int>(state.range(0)));
  const srnn::System sys = srnn::toy_precession();
  srnn::GenerateOptions g;
  g.L = 10;
  g.K = 32;
  g.dt = 0.1;
  g.fine_h = 0.025;
  const srnn::Dataset d = srnn::generate_dataset(sys.truth_V, sys.truth_F, sys.params, sys.state, g);
  srnn::ModelConfig mc;
  mc.width = 64;
  auto model = srnn::LearnedDynamics::make(d.params, mc);
  model.fit_normalizers(d);
  auto samples = srnn::enumerate_samples(d, true, 1);
  samples.resize(std::min<std::size_t>(samples.size(), 128));
  srnn::RolloutSpec spec;
  spec.H = 4;
  for (auto _ : state) benchmark::DoNotOptimize(srnn::batch_loss(model, d, samples, spec, true));
  state.SetLabel("threads " + std::to_string(state.range(0)));
}
BENCHMARK(BM_batch_loss)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
