#include <benchmark/benchmark.h>

#include "lfs/attention.hpp"
#include "lfs/model.hpp"
#include "lfs/reconstruction.hpp"
#include "lfs/rng.hpp"
#include "lfs/tensor.hpp"

using namespace lfs;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, real scale = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.mutable_data())
    v = static_cast<real>(rng.normal()) * scale;
  return t;
}

void bm_matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(1);
  Tensor a = random_tensor({n, n}, rng);
  Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}

void bm_conv2d(benchmark::State& state) {
  const int64_t size = state.range(0);
  Rng rng(2);
  Tensor x = random_tensor({4, 32, size, size}, rng);
  Tensor w = random_tensor({32, 32, 3, 3}, rng, 0.1);
  for (auto _ : state) {
    Tensor y = conv2d(x, w, 1, 1);
    benchmark::DoNotOptimize(y.data().data());
  }
}

void bm_mask(benchmark::State& state) {
  const int64_t m = state.range(0);
  Rng rng(3);
  Tensor relevance = random_tensor({m, m}, rng);
  for (auto _ : state) {
    Tensor mask = fs_threshold_mask(relevance, 0.5);
    benchmark::DoNotOptimize(mask.data().data());
  }
}

void bm_encoder(benchmark::State& state) {
  AttentionConfig cfg;
  cfg.d = 64;
  cfg.heads = 4;
  cfg.grid_h = 5;
  cfg.grid_w = 5;
  cfg.fs_ratio = 0.5;
  cfg.mode = AttentionMode::kLfs;
  ParameterStore store;
  lfsm_register(store, cfg, "lfsm");
  init_params(store, 4);

  Rng rng(5);
  Tensor tokens = random_tensor({cfg.tokens(), cfg.d}, rng);
  for (auto _ : state) {
    Tensor pooled = encoder_block(tokens, cfg, store, "lfsm");
    benchmark::DoNotOptimize(pooled.data().data());
  }
}

void bm_episode_forward(benchmark::State& state) {
  ModelConfig cfg;
  cfg.input_size = 32;
  cfg.channels = 32;
  Model model = Model::build(cfg);
  init_params(model.params(), 6);

  Rng rng(7);
  Tensor support = random_tensor({10, 3, 32, 32}, rng, 0.5);
  Tensor query = random_tensor({10, 3, 32, 32}, rng, 0.5);
  std::vector<int> support_labels = {0, 0, 1, 1, 2, 2, 3, 3, 4, 4};
  for (auto _ : state) {
    Tensor logits =
        model.episode_logits(support, support_labels, query, 5, false);
    benchmark::DoNotOptimize(logits.data().data());
  }
}

void bm_ridge_head(benchmark::State& state) {
  const int64_t d = state.range(0);
  Rng rng(8);
  Tensor target = random_tensor({25, d}, rng);
  Tensor basis = random_tensor({5 * 25, d}, rng);
  for (auto _ : state) {
    ReconResult r = ridge_reconstruct(target, basis, 0.1);
    benchmark::DoNotOptimize(r.recon.data().data());
  }
}

}  // namespace

BENCHMARK(bm_matmul)->Arg(64)->Arg(256);
BENCHMARK(bm_conv2d)->Arg(16)->Arg(32);
BENCHMARK(bm_mask)->Arg(25)->Arg(100);
BENCHMARK(bm_encoder);
BENCHMARK(bm_episode_forward)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_ridge_head)->Arg(16)->Arg(64);

BENCHMARK_MAIN();
