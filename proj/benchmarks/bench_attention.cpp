#include <benchmark/benchmark.h>

#include "sparseloc/attention.hpp"
#include "sparseloc/backbone.hpp"
#include "sparseloc/rng.hpp"

namespace {

using namespace sparseloc;

// Wall-clock counterpart of the s^-2 law: the quadratic attention term falls
// with the sparsity rate while projections stay constant.
void BM_SparseAttentionLayer(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  const int grid = 32, c = 96;
  Rng rng(1);
  const AttentionParams params = AttentionParams::init(c, 3, rng, false);
  const Tensor x = Tensor::randn({grid, grid, c}, rng);
  NoGradGuard no_grad;
  for (auto _ : state) {
    benchmark::DoNotOptimize(sparse_attention_layer(x, SparsityRate(s), params));
  }
  state.SetLabel("grid 32x32, C=96");
}
BENCHMARK(BM_SparseAttentionLayer)->Arg(1)->Arg(2)->Arg(4)->Arg(8);

void BM_PartitionRoundTrip(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  Rng rng(2);
  const Tensor x = Tensor::randn({64, 64, 64}, rng);
  NoGradGuard no_grad;
  for (auto _ : state) {
    const GroupedTokens g = partition_strided(x, SparsityRate(s));
    benchmark::DoNotOptimize(unpartition(g));
  }
  state.SetItemsProcessed(state.iterations() * x.size());
}
BENCHMARK(BM_PartitionRoundTrip)->Arg(2)->Arg(8);

void BM_EncoderForward(benchmark::State& state) {
  ModelConfig cfg;
  cfg.input_size = 128;
  const Encoder enc = Encoder::init(cfg, 3);
  Rng rng(4);
  std::vector<double> data(3 * 128 * 128);
  for (double& v : data) v = rng.uniform(0.0, 1.0);
  const Tensor img = Tensor::from_data({3, 128, 128}, std::move(data));
  NoGradGuard no_grad;
  for (auto _ : state) {
    benchmark::DoNotOptimize(enc.forward(img));
  }
}
BENCHMARK(BM_EncoderForward)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
