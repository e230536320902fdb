// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Each criterion prints one PASS/FAIL line; the binary
// exits nonzero if any criterion fails. Tolerances are pinned here, in code.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "chunktrain/chunk_trainer.hpp"
#include "chunktrain/corpus.hpp"
#include "chunktrain/oracle.hpp"
#include "chunktrain/paged_kv.hpp"
#include "chunktrain/tiered_memory.hpp"

using namespace chunktrain;

namespace {

int g_failures = 0;

void criterion(int id, const std::string& name, const std::function<std::string()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool pass = true;
    try {
        detail = body();  // empty string = pass; otherwise the failure reason
        pass = detail.empty();
    } catch (const std::exception& e) {
        pass = false;
        detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] criterion %d: %s (%.2fs)%s%s\n", pass ? "PASS" : "FAIL", id, name.c_str(),
                secs, detail.empty() ? "" : " — ", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

ModelConfig desk_config() {
    ModelConfig cfg;  // 2 layers, d=64, 4 q-heads, 2 kv-heads, head_dim=16, C=64, P=16
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

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

// --------------------------------------------------------------------------
// 1. Gradient equivalence (dense chunked vs full-sequence oracle)
// --------------------------------------------------------------------------
std::string check_gradient_equivalence() {
    const ModelConfig cfg = desk_config();
    const auto tokens = random_tokens(512, cfg.vocab_size, 101);

    {
        auto params = init_params<float>(cfg, 2024);
        ChunkTrainer<float> trainer(cfg);
        auto grads = ParamGrads<float>::zeros_like_config(cfg);
        trainer.train_step(params, tokens, grads);
        const auto oracle = full_forward_backward(cfg, params, tokens);
        const double rel = compare_grads(grads, oracle.grads).max_rel_err;
        if (rel >= 1e-5) return "f32 max rel err " + fmt("%.3g", rel) + " >= 1e-5";
    }
    {
        auto params = init_params<double>(cfg, 2024);
        ChunkTrainer<double> trainer(cfg);
        auto grads = ParamGrads<double>::zeros_like_config(cfg);
        trainer.train_step(params, tokens, grads);
        const auto oracle = full_forward_backward(cfg, params, tokens);
        const double rel = compare_grads(grads, oracle.grads).max_rel_err;
        if (rel >= 1e-10) return "f64 max rel err " + fmt("%.3g", rel) + " >= 1e-10";
    }
    return "";
}

// --------------------------------------------------------------------------
// 2. O(1) activation memory across chunk counts; oracle grows with T
// --------------------------------------------------------------------------
std::string check_constant_tape() {
    const ModelConfig cfg = desk_config();
    auto params = init_params<float>(cfg, 77);
    auto grads = ParamGrads<float>::zeros_like_config(cfg);

    const int64_t page_slack = static_cast<int64_t>(cfg.page_size) * cfg.n_kv_heads *
                               cfg.head_dim * static_cast<int64_t>(sizeof(float));
    int64_t first_peak = -1;
    for (int s : {1, 2, 4, 8, 16}) {
        ChunkTrainer<float> trainer(cfg);
        const auto tokens =
            random_tokens(static_cast<int64_t>(s) * cfg.chunk_size, cfg.vocab_size, 5);
        const auto m = trainer.train_step(params, tokens, grads);
        if (first_peak < 0) first_peak = m.tape_peak_bytes;
        if (std::llabs(m.tape_peak_bytes - first_peak) > page_slack) {
            return "tape peak varies with S: " + std::to_string(first_peak) + " vs " +
                   std::to_string(m.tape_peak_bytes) + " at S=" + std::to_string(s);
        }
    }

    TapeStats t64, t512;
    full_forward_backward(cfg, params,
                          std::span<const int32_t>(random_tokens(64, cfg.vocab_size, 6)), &t64);
    full_forward_backward(cfg, params,
                          std::span<const int32_t>(random_tokens(512, cfg.vocab_size, 6)), &t512);
    if (t512.peak_bytes < 4 * t64.peak_bytes) {
        return "oracle tape grew only " +
               fmt("%.2f", static_cast<double>(t512.peak_bytes) /
                               static_cast<double>(t64.peak_bytes)) +
               "x from T=64 to T=512";
    }
    return "";
}

// --------------------------------------------------------------------------
// 3. Paged vs contiguous growth
// --------------------------------------------------------------------------
std::string check_paged_vs_contiguous() {
    const ModelConfig cfg = desk_config();
    const uint64_t token_bytes =
        2ull * cfg.n_layers * cfg.n_kv_heads * cfg.head_dim * sizeof(float);

    for (int64_t t = cfg.chunk_size; t <= 4096; t += cfg.chunk_size) {
        PagedCache<float> cache(cfg);
        Rng rng(1);
        Tensor<float> k({cfg.chunk_size, cfg.n_kv_heads, cfg.head_dim});
        Tensor<float> v(k.shape);
        for (auto& x : k.data) x = static_cast<float>(rng.normal());
        for (auto& x : v.data) x = static_cast<float>(rng.normal());
        for (int64_t a = 0; a < t / cfg.chunk_size; ++a) {
            for (int l = 0; l < cfg.n_layers; ++l) cache.append_chunk(l, k, v);
        }
        const MemoryReport mem = cache.memory_report();
        const uint64_t paged_peak = mem.device_bytes + mem.host_bytes;
        const uint64_t theoretical = static_cast<uint64_t>(t) * token_bytes;
        if (paged_peak != theoretical) {
            return "paged peak != theoretical at T=" + std::to_string(t);
        }
        if (mem.copied_bytes != 0) return "paged mode copied bytes";
    }

    const auto contiguous =
        simulate_contiguous_appends(4096 / desk_config().chunk_size, desk_config().chunk_size,
                                    token_bytes, GrowthPolicy::exact_fit);
    if (contiguous.reallocs == 0) return "contiguous baseline never reallocated";
    for (const auto& e : contiguous.events) {
        const double ratio = static_cast<double>(e.transient_bytes) /
                             static_cast<double>(e.stored_bytes_before);
        if (ratio < 2.0) {
            return "exact-fit transient ratio " + fmt("%.3f", ratio) + " < 2.0 at a realloc";
        }
    }
    return "";
}

// --------------------------------------------------------------------------
// 4. Sparse degeneracy and budget monotonicity
// --------------------------------------------------------------------------
std::string check_sparse_budgets() {
    ModelConfig cfg = desk_config();
    const int64_t t_tokens = 256;  // 4 chunks, up to 12 candidate pages

    // Degeneracy: k >= n is bitwise dense in the f64 path, <= 1e-6 rel in f32.
    {
        ModelConfig sparse_cfg = cfg;
        sparse_cfg.attention_mode = {AttentionMode::topk_sparse};
        sparse_cfg.retrieval_budget = 32 * sparse_cfg.page_size;  // 32 pages >= 12
        const auto tokens = random_tokens(t_tokens, cfg.vocab_size, 11);

        auto params64 = init_params<double>(cfg, 500);
        ChunkTrainer<double> dense64(cfg), sparse64(sparse_cfg);
        auto gd = ParamGrads<double>::zeros_like_config(cfg);
        auto gs = ParamGrads<double>::zeros_like_config(sparse_cfg);
        dense64.train_step(params64, tokens, gd);
        sparse64.train_step(params64, tokens, gs);
        const auto fd = flatten(gd), fs = flatten(gs);
        if (std::memcmp(fd.data(), fs.data(), fd.size() * sizeof(double)) != 0) {
            return "k >= n is not bitwise dense in f64";
        }

        auto params32 = init_params<float>(cfg, 500);
        ChunkTrainer<float> dense32(cfg), sparse32(sparse_cfg);
        auto gd32 = ParamGrads<float>::zeros_like_config(cfg);
        auto gs32 = ParamGrads<float>::zeros_like_config(sparse_cfg);
        dense32.train_step(params32, tokens, gd32);
        sparse32.train_step(params32, tokens, gs32);
        const double rel = compare_grads(gs32, gd32).max_rel_err;
        if (rel > 1e-6) return "k >= n deviates from dense by " + fmt("%.3g", rel) + " in f32";
    }

    // Monotonicity: mean per-matrix L2 error non-increasing in the budget,
    // averaged over seeds, on the scaled grid {1, 2, 8, 32} pages.
    const std::vector<int> grid = {cfg.page_size, 2 * cfg.page_size, 8 * cfg.page_size,
                                   32 * cfg.page_size};
    const int n_seeds = 10;
    std::vector<double> mean_l2(grid.size(), 0.0);
    for (int s = 0; s < n_seeds; ++s) {
        auto params = init_params<float>(cfg, 600 + static_cast<uint64_t>(s));
        const auto tokens = random_tokens(t_tokens, cfg.vocab_size, 700 + static_cast<uint64_t>(s));
        const auto oracle = full_forward_backward(cfg, params, tokens);
        for (size_t b = 0; b < grid.size(); ++b) {
            ModelConfig sparse_cfg = cfg;
            sparse_cfg.attention_mode = {AttentionMode::topk_sparse};
            sparse_cfg.retrieval_budget = grid[b];
            ChunkTrainer<float> trainer(sparse_cfg);
            auto grads = ParamGrads<float>::zeros_like_config(sparse_cfg);
            trainer.train_step(params, tokens, grads);
            mean_l2[b] += compare_grads(grads, oracle.grads).mean_l2();
        }
    }
    for (auto& v : mean_l2) v /= n_seeds;
    for (size_t b = 1; b < grid.size(); ++b) {
        if (mean_l2[b] > mean_l2[b - 1]) {
            return "mean L2 error not monotone: budget " + std::to_string(grid[b]) + " gives " +
                   fmt("%.4g", mean_l2[b]) + " > " + fmt("%.4g", mean_l2[b - 1]);
        }
    }
    return "";
}

// --------------------------------------------------------------------------
// 5. Offload transparency
// --------------------------------------------------------------------------
std::string check_offload_transparency() {
    for (auto mode : {AttentionMode::dense, AttentionMode::local, AttentionMode::topk_sparse}) {
        ModelConfig cfg = desk_config();
        cfg.attention_mode = {mode};
        cfg.retrieval_budget = 2 * cfg.page_size;
        auto params = init_params<float>(cfg, 42);
        const auto tokens = random_tokens(4 * cfg.chunk_size, cfg.vocab_size, 13);

        ChunkTrainer<float> plain(cfg);
        auto g_plain = ParamGrads<float>::zeros_like_config(cfg);
        const auto m_plain = plain.train_step(params, tokens, g_plain);

        ChunkTrainer<float> offloaded(cfg);
        TierConfig tier;
        tier.device_capacity_pages = 4 * cfg.pages_per_chunk();
        tier.bandwidth_bytes_per_s = 1e6;
        offloaded.enable_offload(tier);
        auto g_off = ParamGrads<float>::zeros_like_config(cfg);
        const auto m_off = offloaded.train_step(params, tokens, g_off);

        if (m_plain.loss != m_off.loss) {
            return "loss differs with offload in mode " + to_string(mode);
        }
        const auto fa = flatten(g_plain), fb = flatten(g_off);
        if (std::memcmp(fa.data(), fb.data(), fa.size() * sizeof(float)) != 0) {
            return "gradients differ with offload in mode " + to_string(mode);
        }
        if (m_off.transfer_bytes == 0) {
            return "offload run moved no bytes in mode " + to_string(mode) +
                   " (vacuous transparency)";
        }
    }
    return "";
}

// --------------------------------------------------------------------------
// 6. Schedule correctness
// --------------------------------------------------------------------------
std::string check_schedules() {
    // (a) Zero violations in every mode, and with transfer_time <= compute
    //     time the stall is zero and overlap is 1.0. Four layers so dense can
    //     double-buffer while most of the cache sits on the host.
    for (auto mode : {AttentionMode::dense, AttentionMode::local, AttentionMode::topk_sparse}) {
        ModelConfig cfg = desk_config();
        cfg.n_layers = 4;
        cfg.attention_mode = {mode};
        cfg.retrieval_budget = 2 * cfg.page_size;
        cfg.local_window = 2;
        auto params = init_params<float>(cfg, 21);
        const auto tokens = random_tokens(4 * cfg.chunk_size, cfg.vocab_size, 22);

        ChunkTrainer<float> trainer(cfg);
        TierConfig tier;
        tier.bandwidth_bytes_per_s = 1e15;  // transfers complete well inside a layer
        const int step_ws = 4 * cfg.pages_per_chunk();
        tier.device_capacity_pages = 2 * step_ws + cfg.pages_per_chunk();
        trainer.enable_offload(tier);
        auto grads = ParamGrads<float>::zeros_like_config(cfg);
        const auto m = trainer.train_step(params, tokens, grads);

        const auto rep = validate_schedule(*trainer.last_schedule());
        if (!rep.violations.empty()) {
            return std::to_string(rep.violations.size()) + " residency violations in mode " +
                   to_string(mode);
        }
        if (m.stall_ms != 0.0) {
            return "stall " + fmt("%.3g", m.stall_ms) + " ms under a fast link in mode " +
                   to_string(mode);
        }
        if (rep.overlap_fraction != 1.0) {
            return "overlap " + fmt("%.6f", rep.overlap_fraction) + " != 1.0 in mode " +
                   to_string(mode);
        }
    }

    // (b) Sparse forward volume: with C = P and capacity = k + 1 every layer
    //     step displaces the whole device, so once warm (chunk >= 3) each
    //     selected page moves in full: per-chunk bytes == selected * page_kv.
    {
        ModelConfig cfg = desk_config();
        cfg.attention_mode = {AttentionMode::topk_sparse};
        cfg.chunk_size = cfg.page_size;
        cfg.retrieval_budget = 2 * cfg.page_size;
        auto params = init_params<float>(cfg, 23);
        const auto tokens = random_tokens(12 * cfg.chunk_size, cfg.vocab_size, 24);

        ChunkTrainer<float> trainer(cfg);
        TierConfig tier;
        tier.device_capacity_pages = cfg.budget_pages() + cfg.pages_per_chunk();
        trainer.enable_offload(tier);
        auto grads = ParamGrads<float>::zeros_like_config(cfg);
        trainer.train_step(params, tokens, grads);

        std::map<int, uint64_t> expected, measured;
        for (const auto& chunk : trainer.last_chunks()) {
            uint64_t pages = 0;
            for (const auto& per_layer : chunk.selected) {
                std::set<int32_t> uniq;
                for (const auto& qp : per_layer) uniq.insert(qp.begin(), qp.end());
                pages += uniq.size();
            }
            expected[chunk.index] = pages * trainer.cache().page_kv_bytes();
        }
        for (const auto& e : trainer.last_schedule()->events) {
            if (e.kind == EventKind::fetch_done && e.phase == Phase::forward) {
                measured[e.chunk] += e.bytes;
            }
        }
        for (const auto& [idx, bytes] : expected) {
            if (idx >= 3 && measured[idx] != bytes) {
                return "sparse forward bytes at chunk " + std::to_string(idx) + ": " +
                       std::to_string(measured[idx]) + " != selected " + std::to_string(bytes);
            }
            if (measured[idx] > bytes) {
                return "sparse forward moved more than the selected pages at chunk " +
                       std::to_string(idx);
            }
        }
        if (!validate_schedule(*trainer.last_schedule()).violations.empty()) {
            return "violations in the sparse volume run";
        }
    }

    // (c) Sparse moves fewer bytes than dense whenever k < n.
    {
        ModelConfig dense_cfg = desk_config();
        ModelConfig sparse_cfg = dense_cfg;
        sparse_cfg.attention_mode = {AttentionMode::topk_sparse};
        sparse_cfg.retrieval_budget = 2 * sparse_cfg.page_size;
        auto params = init_params<float>(dense_cfg, 25);
        const auto tokens = random_tokens(6 * dense_cfg.chunk_size, dense_cfg.vocab_size, 26);

        auto run_fwd_bytes = [&](const ModelConfig& cfg) {
            ChunkTrainer<float> trainer(cfg);
            TierConfig tier;
            const int worst = cfg.mode_for_layer(0) == AttentionMode::topk_sparse
                                  ? cfg.pages_per_chunk() * cfg.budget_pages()
                                  : 5 * cfg.pages_per_chunk();
            tier.device_capacity_pages = worst + cfg.pages_per_chunk();
            trainer.enable_offload(tier);
            auto grads = ParamGrads<float>::zeros_like_config(cfg);
            trainer.train_step(params, tokens, grads);
            return trainer.last_forward_h2d_bytes();
        };
        const uint64_t sparse_bytes = run_fwd_bytes(sparse_cfg);
        const uint64_t dense_bytes = run_fwd_bytes(dense_cfg);
        if (sparse_bytes > dense_bytes) {
            return "sparse forward bytes " + std::to_string(sparse_bytes) + " > dense " +
                   std::to_string(dense_bytes);
        }
    }
    return "";
}

// --------------------------------------------------------------------------
// 7. Optimization sanity
// --------------------------------------------------------------------------
std::string check_optimization() {
    // 4 chunks per step; half the peak candidate count is 6 pages.
    for (bool sparse : {false, true}) {
        ModelConfig cfg = desk_config();
        if (sparse) {
            cfg.attention_mode = {AttentionMode::topk_sparse};
            cfg.retrieval_budget = 6 * cfg.page_size;
        }
        auto corpus = make_synthetic_corpus(SyntheticKind::periodic, 8 * cfg.chunk_size,
                                            cfg.vocab_size, 33);
        auto params = init_params<float>(cfg, 34);
        ChunkTrainer<float> trainer(cfg);
        auto opt = AdamState<float>::zeros_like(cfg);
        AdamHyperParams hp;
        hp.lr = 1e-3;  // desk-scale rate; the production default is sized for 7B models
        const auto history = trainer.fit(params, corpus, 200, 4 * cfg.chunk_size, opt, hp);
        const double first = history.front().metrics.loss;
        const double last = history.back().metrics.loss;
        if (last > 0.5 * first) {
            return std::string(sparse ? "topk" : "dense") + " loss fell only from " +
                   fmt("%.3f", first) + " to " + fmt("%.3f", last);
        }
    }
    return "";
}

// --------------------------------------------------------------------------
// 8. Finite-difference suite over every differentiable op
// --------------------------------------------------------------------------
template <class Real>
double op_fd_worst(uint64_t seed) {
    // Analytic gradients in Real, FD quotients in double: the check verifies
    // the backward formulas at each width without FD cancellation noise.
    // Components below the floor are treated as zero: a 1e-4-magnitude
    // component assembled from O(1) terms carries ~1e-7 absolute f32 noise,
    // which no correct f32 backward can beat in relative terms.
    FdCheckOptions opt;
    opt.zero_floor = sizeof(Real) == 4 ? 1e-4 : 1e-9;
    Rng rng(seed);
    double worst = 0;

    auto randn = [&](std::vector<int64_t> shape) {
        Tensor<double> t(std::move(shape));
        for (auto& v : t.data) v = rng.normal();
        return t;
    };
    auto to_real = [](const Tensor<double>& t) {
        Tensor<Real> out(t.shape);
        for (size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<Real>(t.data[i]);
        return out;
    };
    auto dot64 = [](const Tensor<double>& a, const Tensor<double>& b) {
        double s = 0;
        for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
        return s;
    };
    auto track = [&](double err) { worst = std::max(worst, err); };

    // linear
    {
        Tensor<double> x = randn({3, 4}), w = randn({4, 2}), dy = randn({3, 2});
        Tensor<Real> dx, dw({4, 2});
        linear_backward(to_real(x), to_real(w), to_real(dy), &dx, &dw);
        std::vector<double> an_x(dx.data.begin(), dx.data.end());
        std::vector<double> theta = x.data;
        track(fd_max_rel_err(
            [&](std::span<const double> th) {
                Tensor<double> xt({3, 4}, std::vector<double>(th.begin(), th.end()));
                return dot64(linear(xt, w), dy);
            },
            theta, an_x, opt));
        std::vector<double> an_w(dw.data.begin(), dw.data.end());
        std::vector<double> theta_w = w.data;
        track(fd_max_rel_err(
            [&](std::span<const double> th) {
                Tensor<double> wt({4, 2}, std::vector<double>(th.begin(), th.end()));
                return dot64(linear(x, wt), dy);
            },
            theta_w, an_w, opt));
    }
    // softmax_rows
    {
        Tensor<double> x = randn({4, 7}), dy = randn({4, 7});
        auto y = softmax_rows(to_real(x));
        auto dx = softmax_rows_backward(y, to_real(dy));
        std::vector<double> an(dx.data.begin(), dx.data.end());
        std::vector<double> theta = x.data;
        track(fd_max_rel_err(
            [&](std::span<const double> th) {
                Tensor<double> xt({4, 7}, std::vector<double>(th.begin(), th.end()));
                return dot64(softmax_rows(xt), dy);
            },
            theta, an, opt));
    }
    // rmsnorm
    {
        Tensor<double> x = randn({5, 8}), g = randn({8}), dy = randn({5, 8});
        for (auto& v : g.data) v += 1.5;
        Tensor<Real> dx, dg({8});
        rmsnorm_backward(to_real(x), to_real(g), Real(1e-6), to_real(dy), &dx, &dg);
        std::vector<double> an(dx.data.begin(), dx.data.end());
        std::vector<double> theta = x.data;
        track(fd_max_rel_err(
            [&](std::span<const double> th) {
                Tensor<double> xt({5, 8}, std::vector<double>(th.begin(), th.end()));
                return dot64(rmsnorm(xt, g, 1e-6), dy);
            },
            theta, an, opt));
        std::vector<double> an_g(dg.data.begin(), dg.data.end());
        std::vector<double> theta_g = g.data;
        track(fd_max_rel_err(
            [&](std::span<const double> th) {
                Tensor<double> gt({8}, std::vector<double>(th.begin(), th.end()));
                return dot64(rmsnorm(x, gt, 1e-6), dy);
            },
            theta_g, an_g, opt));
    }
    // rope
    {
        Tensor<double> x = randn({4, 2, 8}), dy = randn({4, 2, 8});
        auto dx = rope_backward(to_real(dy), 321);
        std::vector<double> an(dx.data.begin(), dx.data.end());
        std::vector<double> theta = x.data;
        track(fd_max_rel_err(
            [&](std::span<const double> th) {
                Tensor<double> xt({4, 2, 8}, std::vector<double>(th.begin(), th.end()));
                return dot64(rope(xt, 321), dy);
            },
            theta, an, opt));
    }
    // silu
    {
        Tensor<double> x = randn({3, 5}), dy = randn({3, 5});
        auto dx = silu_backward(to_real(x), to_real(dy));
        std::vector<double> an(dx.data.begin(), dx.data.end());
        std::vector<double> theta = x.data;
        track(fd_max_rel_err(
            [&](std::span<const double> th) {
                Tensor<double> xt({3, 5}, std::vector<double>(th.begin(), th.end()));
                return dot64(silu(xt), dy);
            },
            theta, an, opt));
    }
    // cross_entropy
    {
        Tensor<double> logits = randn({2, 4});
        std::vector<int32_t> tgt{static_cast<int32_t>(rng.below(4)),
                                 static_cast<int32_t>(rng.below(4))};
        auto r = cross_entropy(to_real(logits), tgt);
        std::vector<double> an(r.dlogits.data.begin(), r.dlogits.data.end());
        std::vector<double> theta = logits.data;
        track(fd_max_rel_err(
            [&](std::span<const double> th) {
                Tensor<double> lt({2, 4}, std::vector<double>(th.begin(), th.end()));
                return static_cast<double>(cross_entropy(lt, tgt).loss);
            },
            theta, an, opt));
    }
    return worst;
}

std::string check_fd_suite() {
    double worst32 = 0, worst64 = 0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        worst32 = std::max(worst32, op_fd_worst<float>(seed));
        worst64 = std::max(worst64, op_fd_worst<double>(seed));
    }
    if (worst32 >= 1e-3) return "f32 worst rel err " + fmt("%.3g", worst32) + " >= 1e-3";
    if (worst64 >= 1e-6) return "f64 worst rel err " + fmt("%.3g", worst64) + " >= 1e-6";
    return "";
}

}  // namespace

int main() {
    criterion(1, "gradient equivalence, chunked dense vs full-sequence oracle",
              check_gradient_equivalence);
    criterion(2, "constant activation tape across chunk counts", check_constant_tape);
    criterion(3, "paged cache peak = theoretical, contiguous >= 2x at reallocs",
              check_paged_vs_contiguous);
    criterion(4, "sparse degeneracy at k >= n and budget monotonicity", check_sparse_budgets);
    criterion(5, "offload transparency: bitwise identical loss and gradients",
              check_offload_transparency);
    criterion(6, "schedule correctness: residency, stall, overlap, transfer volume",
              check_schedules);
    criterion(7, "optimization sanity: loss halves in dense and topk fits", check_optimization);
    criterion(8, "finite-difference suite over all differentiable ops", check_fd_suite);

    if (g_failures > 0) {
        std::printf("%d criterion(s) failed\n", g_failures);
        return 1;
    }
    std::printf("all criteria passed\n");
    return 0;
}
