#include <benchmark/benchmark.h>

#include "sparseloc/rng.hpp"
#include "sparseloc/tensor.hpp"

namespace {

using namespace sparseloc;

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng);
}

void BM_Matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Tensor a = random_tensor({n, n}, 1);
  const Tensor b = random_tensor({n, n}, 2);
  NoGradGuard no_grad;
  for (auto _ : state) {
    benchmark::DoNotOptimize(matmul(a, b));
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(128)->Arg(256)->Arg(512);

void BM_MatmulBackward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Tensor a = random_tensor({n, n}, 1);
  Tensor b = random_tensor({n, n}, 2);
  for (auto _ : state) {
    state.PauseTiming();
    Tensor ag = Tensor::from_data({n, n}, std::vector<double>(a.data().begin(), a.data().end()), true);
    Tensor bg = Tensor::from_data({n, n}, std::vector<double>(b.data().begin(), b.data().end()), true);
    const Tensor loss = sum(matmul(ag, bg));
    state.ResumeTiming();
    loss.backward();
  }
  state.SetItemsProcessed(state.iterations() * 4LL * n * n * n);
}
BENCHMARK(BM_MatmulBackward)->Arg(128)->Arg(256);

void BM_Conv2d(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const Tensor x = random_tensor({1, c, 64, 64}, 3);
  const Tensor k = random_tensor({c, c, 3, 3}, 4);
  NoGradGuard no_grad;
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv2d(x, k, 1, 1));
  }
  state.SetItemsProcessed(state.iterations() * 2LL * 9 * c * c * 64 * 64);
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(32)->Arg(64);

void BM_Softmax(benchmark::State& state) {
  const Tensor x = random_tensor({64, 8, 64, 64}, 5);
  NoGradGuard no_grad;
  for (auto _ : state) {
    benchmark::DoNotOptimize(softmax(x, -1));
  }
  state.SetItemsProcessed(state.iterations() * x.size());
}
BENCHMARK(BM_Softmax);

void BM_BilinearUpsample16x(benchmark::State& state) {
  const Tensor x = random_tensor({1, 1, 16, 16}, 6);
  NoGradGuard no_grad;
  for (auto _ : state) {
    benchmark::DoNotOptimize(bilinear_upsample(x, 256, 256));
  }
  state.SetItemsProcessed(state.iterations() * 256LL * 256);
}
BENCHMARK(BM_BilinearUpsample16x);

}  // namespace
