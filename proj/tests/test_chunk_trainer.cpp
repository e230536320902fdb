// SPDX-License-Identifier: Apache-2.0
//
// Chunk-recurrent training loop: gradient equivalence against the
// full-sequence reference, constant tape memory, determinism, the dM
// gradient path, and optimization sanity.

#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <vector>

#include "chunktrain/chunk_trainer.hpp"
#include "chunktrain/corpus.hpp"
#include "chunktrain/oracle.hpp"

using namespace chunktrain;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_q_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.head_dim = 8;
    cfg.d_ff = 64;
    cfg.vocab_size = 64;
    cfg.chunk_size = 32;
    cfg.page_size = 8;
    cfg.retrieval_budget = 16;
    cfg.local_window = 2;
    return cfg;
}

std::vector<int32_t> random_tokens(int64_t n, int vocab, uint64_t seed) {
    Rng rng(seed);
    std::vector<int32_t> t(static_cast<size_t>(n));
    for (auto& x : t) x = static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab)));
    return t;
}

template <class Real>
std::vector<Real> flatten(const ModelParams<Real>& p) {
    std::vector<Real> out;
    p.visit([&](const char*, int, const Tensor<Real>& t) {
        out.insert(out.end(), t.data.begin(), t.data.end());
    });
    return out;
}

}  // namespace

TEST_CASE("single chunk run agrees with the oracle", "[trainer][equivalence]") {
    const ModelConfig cfg = small_config();
    auto params = init_params<double>(cfg, 21);
    const auto tokens = random_tokens(cfg.chunk_size, cfg.vocab_size, 2);

    ChunkTrainer<double> trainer(cfg);
    auto grads = ParamGrads<double>::zeros_like_config(cfg);
    const auto m = trainer.train_step(params, tokens, grads);

    auto oracle = full_forward_backward(cfg, params, tokens);
    REQUIRE(m.loss == Catch::Approx(oracle.loss).epsilon(1e-12));
    REQUIRE(compare_grads(grads, oracle.grads).max_rel_err < 1e-12);
}

TEST_CASE("dense chunked gradients match the oracle (f32 and f64)",
          "[trainer][equivalence]") {
    const ModelConfig cfg = small_config();
    const auto tokens = random_tokens(4 * cfg.chunk_size, cfg.vocab_size, 3);

    {
        auto params = init_params<float>(cfg, 22);
        ChunkTrainer<float> trainer(cfg);
        auto grads = ParamGrads<float>::zeros_like_config(cfg);
        const auto m = trainer.train_step(params, tokens, grads);
        auto oracle = full_forward_backward(cfg, params, tokens);
        REQUIRE(std::abs(m.loss - oracle.loss) <= 1e-6 * std::abs(oracle.loss));
        REQUIRE(compare_grads(grads, oracle.grads).max_rel_err < 1e-5);
    }
    {
        auto params = init_params<double>(cfg, 22);
        ChunkTrainer<double> trainer(cfg);
        auto grads = ParamGrads<double>::zeros_like_config(cfg);
        trainer.train_step(params, tokens, grads);
        auto oracle = full_forward_backward(cfg, params, tokens);
        REQUIRE(compare_grads(grads, oracle.grads).max_rel_err < 1e-10);
    }
}

TEST_CASE("tape peak is independent of the chunk count", "[trainer][memory]") {
    const ModelConfig cfg = small_config();
    auto params = init_params<float>(cfg, 23);
    auto grads = ParamGrads<float>::zeros_like_config(cfg);

    std::vector<int64_t> peaks;
    for (int s : {2, 16}) {
        ChunkTrainer<float> trainer(cfg);
        const auto tokens = random_tokens(static_cast<int64_t>(s) * cfg.chunk_size,
                                          cfg.vocab_size, 4);
        const auto m = trainer.train_step(params, tokens, grads);
        peaks.push_back(m.tape_peak_bytes);
    }
    REQUIRE(peaks[0] == peaks[1]);
}

TEST_CASE("doubling T doubles KV pages but not the tape", "[trainer][memory]") {
    const ModelConfig cfg = small_config();
    auto params = init_params<float>(cfg, 24);
    auto grads = ParamGrads<float>::zeros_like_config(cfg);

    ChunkTrainer<float> a(cfg);
    const auto ma = a.train_step(params, random_tokens(4 * cfg.chunk_size, cfg.vocab_size, 5),
                                 grads);
    ChunkTrainer<float> b(cfg);
    const auto mb = b.train_step(params, random_tokens(8 * cfg.chunk_size, cfg.vocab_size, 5),
                                 grads);
    REQUIRE(mb.kv_bytes == 2 * ma.kv_bytes);
    REQUIRE(mb.tape_peak_bytes == ma.tape_peak_bytes);
}

TEST_CASE("train_step is bitwise deterministic", "[trainer][determinism]") {
    const ModelConfig cfg = small_config();
    auto params = init_params<float>(cfg, 25);
    const auto tokens = random_tokens(4 * cfg.chunk_size, cfg.vocab_size, 6);

    auto g1 = ParamGrads<float>::zeros_like_config(cfg);
    auto g2 = ParamGrads<float>::zeros_like_config(cfg);
    ChunkTrainer<float> t1(cfg), t2(cfg);
    const auto m1 = t1.train_step(params, tokens, g1);
    const auto m2 = t2.train_step(params, tokens, g2);
    REQUIRE(m1.loss == m2.loss);
    const auto f1 = flatten(g1), f2 = flatten(g2);
    REQUIRE(std::memcmp(f1.data(), f2.data(), f1.size() * sizeof(float)) == 0);
}

TEST_CASE("train_step rejects an empty sequence", "[trainer]") {
    ChunkTrainer<float> trainer(small_config());
    auto params = init_params<float>(small_config(), 1);
    auto grads = ParamGrads<float>::zeros_like_config(small_config());
    REQUIRE_THROWS_AS(trainer.train_step(params, {}, grads), StateError);
}

TEST_CASE("chunks must run in order", "[trainer]") {
    const ModelConfig cfg = small_config();
    auto params = init_params<float>(cfg, 26);
    ChunkTrainer<float> trainer(cfg);
    auto chunks = trainer.make_chunk_states(random_tokens(2 * cfg.chunk_size, cfg.vocab_size, 7));
    REQUIRE_THROWS_AS(trainer.forward_chunk(params, chunks[1]), StateError);
}

TEST_CASE("a short tail is padded with ignored targets", "[trainer]") {
    const ModelConfig cfg = small_config();
    auto params = init_params<double>(cfg, 27);
    const auto tokens = random_tokens(cfg.chunk_size + 10, cfg.vocab_size, 8);

    ChunkTrainer<double> trainer(cfg);
    auto grads = ParamGrads<double>::zeros_like_config(cfg);
    const auto m = trainer.train_step(params, tokens, grads);
    auto oracle = full_forward_backward(cfg, params, tokens);
    REQUIRE(m.loss == Catch::Approx(oracle.loss).epsilon(1e-10));
    REQUIRE(compare_grads(grads, oracle.grads).max_rel_err < 1e-10);
}

TEST_CASE("sparse with k >= n degenerates to dense bitwise", "[trainer][sparse]") {
    ModelConfig dense_cfg = small_config();
    ModelConfig sparse_cfg = dense_cfg;
    sparse_cfg.attention_mode = {AttentionMode::topk_sparse};
    // 8 chunks of 4 pages each: the last chunk sees 28 candidates; budget 32.
    sparse_cfg.retrieval_budget = 32 * sparse_cfg.page_size;

    const auto tokens = random_tokens(8 * dense_cfg.chunk_size, dense_cfg.vocab_size, 9);
    auto params = init_params<double>(dense_cfg, 28);

    ChunkTrainer<double> td(dense_cfg), ts(sparse_cfg);
    auto gd = ParamGrads<double>::zeros_like_config(dense_cfg);
    auto gs = ParamGrads<double>::zeros_like_config(sparse_cfg);
    const auto md = td.train_step(params, tokens, gd);
    const auto ms = ts.train_step(params, tokens, gs);

    REQUIRE(md.loss == ms.loss);
    const auto fd = flatten(gd), fs = flatten(gs);
    REQUIRE(std::memcmp(fd.data(), fs.data(), fd.size() * sizeof(double)) == 0);
}

TEST_CASE("severing the grad-page path changes multi-chunk gradients",
          "[trainer][gradflow]") {
    const ModelConfig cfg = small_config();
    auto params = init_params<float>(cfg, 29);
    const auto tokens = random_tokens(4 * cfg.chunk_size, cfg.vocab_size, 10);

    ChunkTrainer<float> healthy(cfg), ablated(cfg);
    ablated.set_ablate_grad_pages(true);
    auto gh = ParamGrads<float>::zeros_like_config(cfg);
    auto ga = ParamGrads<float>::zeros_like_config(cfg);
    healthy.train_step(params, tokens, gh);
    ablated.train_step(params, tokens, ga);
    REQUIRE(compare_grads(ga, gh).max_rel_err > 1e-4);  // the dM path carries real gradient
}

TEST_CASE("fit: zero steps and zero lr behave as documented", "[trainer][fit]") {
    const ModelConfig cfg = small_config();
    auto params = init_params<float>(cfg, 30);
    const auto before = flatten(params);
    auto corpus = make_synthetic_corpus(SyntheticKind::periodic, 4 * cfg.chunk_size,
                                        cfg.vocab_size, 3);
    ChunkTrainer<float> trainer(cfg);
    auto opt = AdamState<float>::zeros_like(cfg);

    auto history = trainer.fit(params, corpus, 0, 2 * cfg.chunk_size, opt, AdamHyperParams{});
    REQUIRE(history.empty());
    auto after = flatten(params);
    REQUIRE(std::memcmp(before.data(), after.data(), before.size() * sizeof(float)) == 0);

    AdamHyperParams frozen;
    frozen.lr = 0.0;
    auto h2 = trainer.fit(params, corpus, 4, 2 * cfg.chunk_size, opt, frozen);
    REQUIRE(h2.size() == 4);
    // Same window, same params: every evaluation identical.
    REQUIRE(h2[0].metrics.loss == h2[2].metrics.loss);
    auto after2 = flatten(params);
    REQUIRE(std::memcmp(before.data(), after2.data(), before.size() * sizeof(float)) == 0);
}

TEST_CASE("loss decreases over 50 steps on a periodic corpus", "[trainer][fit]") {
    ModelConfig cfg = small_config();
    cfg.vocab_size = 32;
    auto params = init_params<float>(cfg, 31);
    auto corpus = make_synthetic_corpus(SyntheticKind::periodic, 8 * cfg.chunk_size,
                                        cfg.vocab_size, 12);
    ChunkTrainer<float> trainer(cfg);
    auto opt = AdamState<float>::zeros_like(cfg);
    AdamHyperParams hp;
    hp.lr = 3e-3;  // desk-scale rate; the production default is far too timid here
    auto history = trainer.fit(params, corpus, 50, 2 * cfg.chunk_size, opt, hp);
    REQUIRE(history.size() == 50);
    REQUIRE(history.back().metrics.loss < 0.5 * history.front().metrics.loss);
}

TEST_CASE("sparse and dense loss curves stay close at half budget", "[trainer][fit]") {
    // Desk config; budget = half the maximum candidate count (T = 4C gives 12
    // candidate pages at the last chunk, so k = 6 pages).
    ModelConfig dense_cfg;
    ModelConfig sparse_cfg = dense_cfg;
    sparse_cfg.attention_mode = {AttentionMode::topk_sparse};
    sparse_cfg.retrieval_budget = 6 * sparse_cfg.page_size;

    auto corpus = make_synthetic_corpus(SyntheticKind::periodic, 4 * dense_cfg.chunk_size,
                                        dense_cfg.vocab_size, 13);
    AdamHyperParams hp;
    hp.lr = 1e-3;  // mid-descent after 50 steps, where the 10% band is meaningful

    auto run = [&](const ModelConfig& cfg) {
        auto params = init_params<float>(cfg, 32);
        ChunkTrainer<float> trainer(cfg);
        auto opt = AdamState<float>::zeros_like(cfg);
        auto hist = trainer.fit(params, corpus, 50, 4 * cfg.chunk_size, opt, hp);
        return hist.back().metrics.loss;
    };
    const double dense_loss = run(dense_cfg);
    const double sparse_loss = run(sparse_cfg);
    REQUIRE(std::abs(sparse_loss - dense_loss) <= 0.10 * dense_loss);
}

TEST_CASE("local attention mode trains and matches its own replay", "[trainer][local]") {
    ModelConfig cfg = small_config();
    cfg.attention_mode = {AttentionMode::local};
    cfg.local_window = 2;
    auto params = init_params<float>(cfg, 33);
    const auto tokens = random_tokens(4 * cfg.chunk_size, cfg.vocab_size, 14);
    ChunkTrainer<float> t1(cfg), t2(cfg);
    auto g1 = ParamGrads<float>::zeros_like_config(cfg);
    auto g2 = ParamGrads<float>::zeros_like_config(cfg);
    const auto m1 = t1.train_step(params, tokens, g1);
    const auto m2 = t2.train_step(params, tokens, g2);
    REQUIRE(m1.loss == m2.loss);
    REQUIRE(compare_grads(g1, g2).max_rel_err == 0.0);
    // Local differs from dense once the window clips candidates.
    ModelConfig dcfg = cfg;
    dcfg.attention_mode = {AttentionMode::dense};
    ChunkTrainer<float> td(dcfg);
    auto gd = ParamGrads<float>::zeros_like_config(dcfg);
    td.train_step(params, tokens, gd);
    REQUIRE(compare_grads(g1, gd).max_rel_err > 1e-6);
}
