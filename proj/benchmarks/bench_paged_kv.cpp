// SPDX-License-Identifier: Apache-2.0
//
// Append/gather/scatter throughput of the paged cache.

#include <benchmark/benchmark.h>

#include <numeric>

#include "chunktrain/paged_kv.hpp"

using namespace chunktrain;

namespace {

ModelConfig bench_config() {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.n_kv_heads = 2;
    cfg.head_dim = 16;
    cfg.chunk_size = 64;
    cfg.page_size = 16;
    return cfg;
}

void BM_append_chunk(benchmark::State& state) {
    const ModelConfig cfg = bench_config();
    Rng rng(1);
    Tensor<float> k({cfg.chunk_size, cfg.n_kv_heads, cfg.head_dim});
    Tensor<float> v(k.shape);
    for (auto& x : k.data) x = static_cast<float>(rng.normal());
    for (auto& x : v.data) x = static_cast<float>(rng.normal());
    for (auto _ : state) {
        PagedCache<float> cache(cfg);
        for (int64_t a = 0; a < state.range(0); ++a) {
            benchmark::DoNotOptimize(cache.append_chunk(0, k, v));
        }
    }
    state.SetBytesProcessed(state.iterations() * state.range(0) *
                            static_cast<int64_t>(2 * k.bytes()));
}

void BM_gather_scatter(benchmark::State& state) {
    const ModelConfig cfg = bench_config();
    PagedCache<float> cache(cfg);
    Rng rng(2);
    const int pages = static_cast<int>(state.range(0));
    Tensor<float> k({static_cast<int64_t>(pages) * cfg.page_size, cfg.n_kv_heads, cfg.head_dim});
    Tensor<float> v(k.shape);
    for (auto& x : k.data) x = static_cast<float>(rng.normal());
    for (auto& x : v.data) x = static_cast<float>(rng.normal());
    cache.append_chunk(0, k, v);
    std::vector<int32_t> ids(static_cast<size_t>(pages));
    std::iota(ids.begin(), ids.end(), 0);
    for (auto _ : state) {
        auto g = cache.gather_pages(0, ids);
        cache.scatter_add_grads(0, ids, g.k, g.v);
        benchmark::DoNotOptimize(g.k.data.data());
    }
    state.SetBytesProcessed(state.iterations() * static_cast<int64_t>(4 * k.bytes()));
}

}  // namespace

BENCHMARK(BM_append_chunk)->Arg(4)->Arg(16)->Arg(64);
BENCHMARK(BM_gather_scatter)->Arg(4)->Arg(16)->Arg(64);

BENCHMARK_MAIN();
