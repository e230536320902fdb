// SPDX-License-Identifier: Apache-2.0
//
// Dense vs Top-K sparse chunk attention over the paged cache.

#include <benchmark/benchmark.h>

#include "chunktrain/attention.hpp"
#include "chunktrain/paged_kv.hpp"

using namespace chunktrain;

namespace {

ModelConfig bench_config() {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 64;
    cfg.n_q_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.head_dim = 16;
    cfg.chunk_size = 64;
    cfg.page_size = 16;
    return cfg;
}

template <class Real>
Tensor<Real> randn3(int64_t a, int64_t b, int64_t c, Rng& rng) {
    Tensor<Real> t({a, b, c});
    for (auto& v : t.data) v = static_cast<Real>(rng.normal());
    return t;
}

void bench_attention(benchmark::State& state, bool sparse) {
    const ModelConfig cfg = bench_config();
    const int past_pages = static_cast<int>(state.range(0));
    const int budget_pages = sparse ? std::max(1, past_pages / 8) : past_pages;

    PagedCache<float> cache(cfg);
    Rng rng(1);
    cache.append_chunk(0,
                       randn3<float>(static_cast<int64_t>(past_pages) * cfg.page_size,
                                     cfg.n_kv_heads, cfg.head_dim, rng),
                       randn3<float>(static_cast<int64_t>(past_pages) * cfg.page_size,
                                     cfg.n_kv_heads, cfg.head_dim, rng));
    auto q = randn3<float>(cfg.chunk_size, cfg.n_q_heads, cfg.head_dim, rng);
    auto k = randn3<float>(cfg.chunk_size, cfg.n_kv_heads, cfg.head_dim, rng);
    auto v = randn3<float>(cfg.chunk_size, cfg.n_kv_heads, cfg.head_dim, rng);

    const Tensor<float> k_avg = cache.page_mean_keys(0);
    std::vector<std::vector<int32_t>> sel(static_cast<size_t>(cfg.pages_per_chunk()));
    if (sparse) {
        const auto score = score_pages(q, k_avg, cfg.page_size, cfg.gqa_group());
        for (int qp = 0; qp < cfg.pages_per_chunk(); ++qp) {
            sel[static_cast<size_t>(qp)] = select_topk_row(score, qp, budget_pages);
        }
    } else {
        for (auto& s : sel) s = select_all(past_pages);
    }

    for (auto _ : state) {
        auto saved = attn_forward(cfg, q, cache, 0, sel, k, v);
        benchmark::DoNotOptimize(saved.out.data.data());
    }
    state.SetItemsProcessed(state.iterations() * cfg.chunk_size);
}

void BM_attn_dense(benchmark::State& state) { bench_attention(state, false); }
void BM_attn_topk(benchmark::State& state) { bench_attention(state, true); }

}  // namespace

BENCHMARK(BM_attn_dense)->Arg(8)->Arg(32)->Arg(128);
BENCHMARK(BM_attn_topk)->Arg(8)->Arg(32)->Arg(128);

BENCHMARK_MAIN();
