// SPDX-License-Identifier: Apache-2.0
//
// Full train_step throughput per attention mode and chunk size.

#include <benchmark/benchmark.h>

#include "chunktrain/chunk_trainer.hpp"
#include "chunktrain/corpus.hpp"

using namespace chunktrain;

namespace {

void bench_step(benchmark::State& state, AttentionMode mode) {
    ModelConfig cfg;
    cfg.chunk_size = static_cast<int>(state.range(0));
    cfg.attention_mode = {mode};
    cfg.retrieval_budget = 8 * cfg.page_size;
    cfg.validate();
    const int64_t tokens_per_step = 512;

    auto params = init_params<float>(cfg, 1);
    auto corpus = make_synthetic_corpus(SyntheticKind::random, tokens_per_step, cfg.vocab_size, 2);
    ChunkTrainer<float> trainer(cfg);
    auto grads = ParamGrads<float>::zeros_like_config(cfg);
    for (auto _ : state) {
        const auto m = trainer.train_step(params, corpus, grads);
        benchmark::DoNotOptimize(m.loss);
    }
    state.SetItemsProcessed(state.iterations() * tokens_per_step);
}

void BM_train_step_dense(benchmark::State& state) { bench_step(state, AttentionMode::dense); }
void BM_train_step_topk(benchmark::State& state) {
    bench_step(state, AttentionMode::topk_sparse);
}
void BM_train_step_local(benchmark::State& state) { bench_step(state, AttentionMode::local); }

}  // namespace

BENCHMARK(BM_train_step_dense)->Arg(32)->Arg(64)->Arg(128);
BENCHMARK(BM_train_step_topk)->Arg(32)->Arg(64)->Arg(128);
BENCHMARK(BM_train_step_local)->Arg(32)->Arg(64)->Arg(128);

BENCHMARK_MAIN();
