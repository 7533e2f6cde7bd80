// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0

// Pooling forward and backward over activation-map sized inputs. The
// 38 x 38 case matches the map extent of a 300 x 300 input.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "crackseg/pooling.hpp"

namespace {

using crackseg::lp_pool_backward;
using crackseg::lp_pool_forward;
using crackseg::PoolingSpec;

std::vector<double> make_map(size_t n) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> dist(-5.0, 5.0);
  std::vector<double> map(n);
  for (double& v : map) v = dist(rng);
  return map;
}

PoolingSpec spec_for(int64_t encoded_p) {
  return encoded_p < 0 ? PoolingSpec::max_pool()
                       : PoolingSpec::lp(static_cast<double>(encoded_p));
}

void BM_PoolForward(benchmark::State& state) {
  const auto map = make_map(static_cast<size_t>(state.range(0)));
  const PoolingSpec spec = spec_for(state.range(1));
  for (auto _ : state) {
    benchmark::DoNotOptimize(lp_pool_forward(map, spec));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_PoolBackward(benchmark::State& state) {
  const auto map = make_map(static_cast<size_t>(state.range(0)));
  const PoolingSpec spec = spec_for(state.range(1));
  for (auto _ : state) {
    benchmark::DoNotOptimize(lp_pool_backward(map, spec, 1.0));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

// p is encoded in the second range argument, -1 meaning infinity.
void pool_args(benchmark::internal::Benchmark* bench) {
  for (const int64_t n : {38 * 38, 128 * 128}) {
    for (const int64_t p : {1, 2, 9, -1}) {
      bench->Args({n, p});
    }
  }
}

BENCHMARK(BM_PoolForward)->Apply(pool_args);
BENCHMARK(BM_PoolBackward)->Apply(pool_args);

}  // namespace
