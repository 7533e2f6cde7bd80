// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0

// Whole-network timings: evaluation forward at the training resolution
// and at the full 300 pixel resolution, and one optimizer-free train
// step (forward plus backward) at the small resolution.

#include <array>
#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "crackseg/model.hpp"
#include "crackseg/pooling.hpp"
#include "crackseg/tensor.hpp"

namespace {

using namespace crackseg;

Tensor random_batch(int n, int size, uint64_t seed) {
  Tensor batch({n, 3, size, size});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
  for (int64_t i = 0; i < batch.numel(); ++i) batch.data()[i] = dist(rng);
  return batch;
}

Model make_model(int input_size) {
  ModelConfig cfg;
  cfg.input_size = input_size;
  cfg.pooling = PoolingSpec::max_pool();
  cfg.seed = 0;
  return build_model(cfg);
}

void BM_ForwardEval(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  Model model = make_model(size);
  model.train_mode(false);
  const Tensor batch = random_batch(1, size, 7);
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.forward(batch));
  }
}

void BM_TrainStep(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  Model model = make_model(size);
  model.train_mode(true);
  const Tensor batch = random_batch(2, size, 7);
  for (auto _ : state) {
    ForwardResult result = model.forward(batch);
    benchmark::DoNotOptimize(result.scores);
    model.backward({{1.0, -1.0}, {-1.0, 1.0}});
    model.zero_grad();
  }
}

BENCHMARK(BM_ForwardEval)->Arg(64)->Arg(300)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_TrainStep)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
