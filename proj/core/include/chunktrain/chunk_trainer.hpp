// SPDX-License-Identifier: Apache-2.0
//
// Chunk-recurrent training: serial forward over chunks that discards
// activations, reverse-order backward that recomputes each chunk on the fly,
// and gradient flow through the cache's gradient pages.
//
// A training step touches at most one chunk's activation tape at any moment,
// so live tape bytes are a function of (chunk_size, config) only — never of
// the chunk count. The KV cache and its gradient pages are the only state
// that grows with sequence length, and they are invisible to the tape.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "chunktrain/attention.hpp"
#include "chunktrain/config.hpp"
#include "chunktrain/model.hpp"
#include "chunktrain/ops.hpp"
#include "chunktrain/paged_kv.hpp"
#include "chunktrain/tape.hpp"
#include "chunktrain/tiered_memory.hpp"

namespace chunktrain {

constexpr double kRmsNormEps = 1e-6;

// Replay record for one chunk. Activations are deliberately absent: replaying
// the forward from this state reproduces them bitwise.
struct ChunkState {
    int index = 0;
    int64_t pos_offset = 0;
    std::vector<int32_t> tokens;   // X_i (padded to chunk_size on the tail chunk)
    std::vector<int32_t> targets;  // next-token ids, kIgnoreTarget past the end
    uint64_t replay_seed = 0;      // reserved for stochastic ops; replay is exact without it
    SlotRange slots{0, 0};
    // [layer][query page] -> attended page ids, cached at forward time and
    // reused verbatim by the backward recompute.
    std::vector<std::vector<std::vector<int32_t>>> selected;
};

template <class Real>
struct LayerActs {
    Tensor<Real> attn_norm_in;
    Tensor<Real> attn_normed;
    Tensor<Real> q;      // post-rope
    Tensor<Real> k_cur;  // post-rope
    Tensor<Real> v_cur;
    AttnSaved<Real> attn;
    Tensor<Real> mlp_norm_in;
    Tensor<Real> mlp_normed;
    Tensor<Real> mlp_pre;
    Tensor<Real> mlp_act;
};

// Saved values for the backward of exactly one chunk; freed at chunk
// boundaries. Registered with TapeStats so peak live bytes are measurable.
template <class Real>
struct ChunkActs {
    std::vector<LayerActs<Real>> layers;
    Tensor<Real> final_norm_in;
    Tensor<Real> final_normed;

    int64_t byte_size() const {
        int64_t b = static_cast<int64_t>(final_norm_in.bytes() + final_normed.bytes());
        for (const auto& l : layers) {
            b += static_cast<int64_t>(l.attn_norm_in.bytes() + l.attn_normed.bytes() +
                                      l.q.bytes() + l.k_cur.bytes() + l.v_cur.bytes() +
                                      l.attn.out.bytes() + l.attn.lse.bytes() +
                                      l.mlp_norm_in.bytes() + l.mlp_normed.bytes() +
                                      l.mlp_pre.bytes() + l.mlp_act.bytes());
        }
        return b;
    }
};

struct StepMetrics {
    double loss = 0;
    int64_t tape_peak_bytes = 0;
    uint64_t kv_bytes = 0;
    uint64_t grad_page_bytes = 0;
    uint64_t transfer_bytes = 0;
    double stall_ms = 0;
};

namespace detail {

template <class Real>
Tensor<Real> as_2d(const Tensor<Real>& x) {
    return x.reshaped({x.dim(0), x.dim(1) * x.dim(2)});
}

template <class Real>
Tensor<Real> as_3d(const Tensor<Real>& x, int64_t h, int64_t d) {
    return x.reshaped({x.dim(0), h, d});
}

}  // namespace detail

template <class Real>
class ChunkTrainer {
public:
    explicit ChunkTrainer(const ModelConfig& cfg) : cfg_(cfg), cache_(cfg) { cfg_.validate(); }

    const ModelConfig& config() const { return cfg_; }
    PagedCache<Real>& cache() { return cache_; }
    TapeStats& tape() { return tape_; }

    void enable_offload(const TierConfig& tier) {
        offload_ = true;
        tier_cfg_ = tier;
    }
    void disable_offload() { offload_ = false; }

    // Bug-injection switch for the gradient-flow completeness test: zeroes all
    // gradient pages after each chunk's backward, severing the dM path.
    void set_ablate_grad_pages(bool on) { ablate_grad_pages_ = on; }

    const ScheduleLog* last_schedule() const { return last_log_ ? &*last_log_ : nullptr; }
    uint64_t last_forward_h2d_bytes() const { return last_fwd_h2d_; }
    const std::vector<ChunkState>& last_chunks() const { return chunks_; }

    // One full step: S forwards, then S backwards in reverse order. Gradients
    // land in grads_out (zeroed first); cache and grad pages are reset at
    // entry so the step is self-contained and deterministic.
    StepMetrics train_step(const ModelParams<Real>& params, std::span<const int32_t> tokens,
                           ParamGrads<Real>& grads_out) {
        const int64_t t_total = static_cast<int64_t>(tokens.size());
        if (t_total == 0) throw StateError("train_step: empty token sequence");
        grads_out.zero();
        cache_.reset();
        tape_.reset();
        chunks_ = make_chunk_states(tokens);
        pending_.reset();
        engine_.reset();
        if (offload_) {
            engine_ = std::make_unique<TieredEngine<Real>>(cache_, tier_cfg_);
            engine_->set_prefetch_headroom_pages(cfg_.pages_per_chunk());
        }

        const Real scale = t_total > 1 ? Real(1) / static_cast<Real>(t_total - 1) : Real(1);
        double loss_sum = 0;

        if (engine_) engine_->begin_phase(Phase::forward);
        for (auto& chunk : chunks_) {
            loss_sum += forward_chunk(params, chunk);
        }
        last_fwd_h2d_ = engine_ ? engine_->h2d_bytes(Phase::forward) : 0;

        if (engine_) {
            engine_->release_all_reservations();
            engine_->begin_phase(Phase::backward);
        }
        pending_.reset();
        if (engine_ && !chunks_.empty()) {
            // Head start for the first recompute step, mirroring the eager
            // layer-0 fetch at the start of the forward pass.
            issue_lookahead_(chunks_.back(), 0, /*cached=*/true, /*backward_part=*/false);
        }
        for (size_t i = chunks_.size(); i-- > 0;) {
            backward_chunk(params, chunks_[i], grads_out, scale);
            if (ablate_grad_pages_) cache_.zero_grad_pages();
        }

        StepMetrics m;
        m.loss = t_total > 1 ? loss_sum / static_cast<double>(t_total - 1) : 0.0;
        m.tape_peak_bytes = tape_.peak_bytes;
        const MemoryReport mem = cache_.memory_report();
        m.kv_bytes = mem.device_bytes + mem.host_bytes;
        m.grad_page_bytes = mem.grad_bytes;
        if (engine_) {
            m.transfer_bytes = engine_->h2d_bytes(Phase::forward) +
                               engine_->h2d_bytes(Phase::backward) + engine_->d2h_bytes();
            m.stall_ms = engine_->stall_seconds() * 1000.0;
            last_log_ = engine_->log();
        } else {
            last_log_.reset();
        }
        engine_.reset();
        return m;
    }

    struct FitRecord {
        int64_t step = 0;
        StepMetrics metrics;
    };

    // Sequential train_step + adam_step over sliding windows of the corpus.
    std::vector<FitRecord> fit(ModelParams<Real>& params, std::span<const int32_t> corpus,
                               int64_t steps, int64_t tokens_per_step, AdamState<Real>& opt_state,
                               const AdamHyperParams& hp,
                               const std::function<void(const FitRecord&)>& on_step = {}) {
        if (steps > 0 && static_cast<int64_t>(corpus.size()) < tokens_per_step) {
            throw ConfigError("fit: corpus shorter than one training window");
        }
        std::vector<FitRecord> history;
        ParamGrads<Real> grads = ParamGrads<Real>::zeros_like_config(cfg_);
        const int64_t n_windows =
            steps > 0 ? static_cast<int64_t>(corpus.size()) / tokens_per_step : 1;
        for (int64_t s = 0; s < steps; ++s) {
            // Windows cycle over the corpus, so a given step index always sees
            // the same tokens.
            const int64_t start = (s % n_windows) * tokens_per_step;
            FitRecord rec;
            rec.step = s;
            rec.metrics = train_step(params,
                                     corpus.subspan(static_cast<size_t>(start),
                                                    static_cast<size_t>(tokens_per_step)),
                                     grads);
            adam_step(params, grads, opt_state, hp, s + 1);
            history.push_back(rec);
            if (on_step) on_step(rec);
        }
        return history;
    }

    // Builds the per-chunk replay records for a token window: the final token
    // of chunk i predicts the first token of chunk i+1, so the whole step
    // covers exactly T-1 predictions. A short tail chunk is padded with token
    // 0 and ignore targets.
    std::vector<ChunkState> make_chunk_states(std::span<const int32_t> tokens) const {
        const int64_t t_total = static_cast<int64_t>(tokens.size());
        const int c = cfg_.chunk_size;
        const int64_t s_chunks = (t_total + c - 1) / c;
        std::vector<ChunkState> chunks;
        for (int64_t i = 0; i < s_chunks; ++i) {
            ChunkState cs;
            cs.index = static_cast<int>(i);
            cs.pos_offset = i * c;
            cs.replay_seed = cfg_.seed ^ (0x9E3779B97F4A7C15ull * static_cast<uint64_t>(i + 1));
            cs.tokens.assign(static_cast<size_t>(c), 0);
            cs.targets.assign(static_cast<size_t>(c), kIgnoreTarget);
            for (int r = 0; r < c; ++r) {
                const int64_t pos = cs.pos_offset + r;
                if (pos < t_total) cs.tokens[static_cast<size_t>(r)] = tokens[static_cast<size_t>(pos)];
                if (pos + 1 < t_total) {
                    cs.targets[static_cast<size_t>(r)] = tokens[static_cast<size_t>(pos + 1)];
                }
            }
            chunks.push_back(std::move(cs));
        }
        return chunks;
    }

    // Forward of one chunk in append mode: projects q/k/v, appends K/V to the
    // cache, retrieves per attention_mode (caching the selected ids), attends,
    // and returns the chunk's summed loss. No activations survive the call.
    double forward_chunk(const ModelParams<Real>& params, ChunkState& chunk) {
        if (cache_.filled(0) != chunk.pos_offset) {
            throw StateError("forward_chunk: chunks must be processed in index order");
        }
        return run_chunk_(params, chunk, /*append=*/true, nullptr, Real(1), nullptr);
    }

    // Backward of one chunk: recomputes the chunk forward (regenerating its
    // activations), seeds the backward with the loss gradient plus dM_i read
    // from the chunk's own gradient pages, accumulates dTheta, and scatters
    // gradients into the pages of earlier chunks.
    void backward_chunk(const ModelParams<Real>& params, const ChunkState& chunk,
                        ParamGrads<Real>& grads, Real loss_scale) {
        if (cache_.filled(0) < chunk.slots.end || chunk.selected.empty()) {
            throw StateError("backward_chunk: forward_chunk has not run for this chunk");
        }
        ChunkActs<Real> acts;
        run_chunk_(params, chunk, /*append=*/false, &acts, loss_scale, &grads);
    }

    std::vector<int32_t> own_page_ids(const ChunkState& chunk) const {
        const int first = static_cast<int>(chunk.slots.begin / cfg_.page_size);
        const int last = static_cast<int>((chunk.slots.end - 1) / cfg_.page_size);
        std::vector<int32_t> ids;
        for (int p = first; p <= last; ++p) ids.push_back(p);
        return ids;
    }

private:
    static std::vector<int32_t> union_of_(const std::vector<std::vector<int32_t>>& per_qpage) {
        std::vector<int32_t> all;
        for (const auto& v : per_qpage) all.insert(all.end(), v.begin(), v.end());
        std::sort(all.begin(), all.end());
        all.erase(std::unique(all.begin(), all.end()), all.end());
        return all;
    }

    // Per-query-page page selection for this chunk/layer, scoring against the
    // representatives of pages that predate the chunk.
    std::vector<std::vector<int32_t>> select_pages_(const ChunkState& chunk, int layer,
                                                    const Tensor<Real>& q_rope) const {
        const int n_cand = static_cast<int>(chunk.pos_offset / cfg_.page_size);
        const int n_qpages = cfg_.pages_per_chunk();
        std::vector<std::vector<int32_t>> sel(static_cast<size_t>(n_qpages));
        if (n_cand == 0) return sel;
        switch (cfg_.mode_for_layer(layer)) {
            case AttentionMode::dense:
                for (auto& s : sel) s = select_all(n_cand);
                break;
            case AttentionMode::local:
                for (auto& s : sel) s = select_recent(n_cand, cfg_.local_window);
                break;
            case AttentionMode::topk_sparse: {
                const Tensor<Real> k_avg = cache_.page_mean_keys(layer, n_cand);
                const Tensor<Real> score =
                    score_pages(q_rope, k_avg, cfg_.page_size, cfg_.gqa_group(), cfg_.score_scale);
                for (int qp = 0; qp < n_qpages; ++qp) {
                    sel[static_cast<size_t>(qp)] = select_topk_row(score, qp, cfg_.budget_pages());
                }
                break;
            }
        }
        return sel;
    }

    int64_t attended_tokens_(const std::vector<std::vector<int32_t>>& sel) const {
        int64_t n = cfg_.chunk_size;
        for (const auto& s : sel) n += static_cast<int64_t>(s.size()) * cfg_.page_size;
        return n;
    }

    // One-step-lookahead prefetch. In the forward phase only dense/local
    // steps are plannable (sparse ids appear after that layer's q projection);
    // in the backward phase every step's ids are cached. Backward parts also
    // need the chunk's own grad pages for the dM read.
    void issue_lookahead_(const ChunkState& next_chunk, int next_layer, bool cached,
                          bool backward_part) {
        if (!engine_) return;
        std::vector<int32_t> pages;
        if (cached) {
            pages = union_of_(next_chunk.selected[static_cast<size_t>(next_layer)]);
            if (backward_part) {
                for (int32_t p : own_page_ids(next_chunk)) pages.push_back(p);
                std::sort(pages.begin(), pages.end());
                pages.erase(std::unique(pages.begin(), pages.end()), pages.end());
            }
        } else {
            if (cfg_.mode_for_layer(next_layer) == AttentionMode::topk_sparse) return;
            const int n_cand = static_cast<int>(next_chunk.pos_offset / cfg_.page_size);
            pages = cfg_.mode_for_layer(next_layer) == AttentionMode::dense
                        ? select_all(n_cand)
                        : select_recent(n_cand, cfg_.local_window);
            // Pages the next chunk will have appended by then do not exist
            // yet; they are device-born and never need a fetch.
            const int existing = cache_.n_pages(next_layer);
            std::erase_if(pages, [&](int32_t p) { return p >= existing; });
        }
        pending_ = engine_->fetch_async(next_layer, pages, next_chunk.index, /*best_effort=*/true);
    }

    // Waits for whatever prefetch covers this step, then fetches anything
    // still missing (first step of a phase, pages evicted in between) and
    // records the accesses.
    void ensure_resident_(int layer, const std::vector<int32_t>& ids, int chunk_idx,
                          std::optional<TransferHandle> h_cur) {
        if (!engine_) return;
        if (h_cur) engine_->wait(*h_cur);
        TransferHandle fill = engine_->fetch_async(layer, ids, chunk_idx);
        engine_->wait(fill);
        engine_->record_access(layer, ids, chunk_idx);
    }

    // The shared chunk pass. append=true is the phase-A forward (grows the
    // cache, decides retrieval); append=false recomputes the forward with an
    // activation tape and immediately runs the backward.
    double run_chunk_(const ModelParams<Real>& params, const ChunkState& chunk_in, bool append,
                      ChunkActs<Real>* acts, Real loss_scale, ParamGrads<Real>* grads) {
        ChunkState& chunk = const_cast<ChunkState&>(chunk_in);
        const int c = cfg_.chunk_size;
        const int n_layers = cfg_.n_layers;

        if (acts) acts->layers.resize(static_cast<size_t>(n_layers));
        if (append) chunk.selected.assign(static_cast<size_t>(n_layers), {});

        Tensor<Real> h({c, cfg_.d_model});
        for (int r = 0; r < c; ++r) {
            const int32_t tok = chunk.tokens[static_cast<size_t>(r)];
            if (tok < 0 || tok >= cfg_.vocab_size) throw StateError("token id out of range");
            const Real* src = params.emb.ptr() + static_cast<int64_t>(tok) * cfg_.d_model;
            std::copy(src, src + cfg_.d_model, h.ptr() + static_cast<int64_t>(r) * cfg_.d_model);
        }

        for (int l = 0; l < n_layers; ++l) {
            const LayerParams<Real>& lp = params.layers[static_cast<size_t>(l)];

            std::optional<TransferHandle> h_cur;
            if (engine_) {
                h_cur = std::exchange(pending_, std::nullopt);
                // Prefetch for the step that follows this one.
                if (l + 1 < n_layers) {
                    issue_lookahead_(chunk, l + 1, /*cached=*/!append, /*backward_part=*/false);
                } else if (append) {
                    if (chunk.index + 1 < static_cast<int>(chunks_.size())) {
                        issue_lookahead_(chunks_[static_cast<size_t>(chunk.index) + 1], 0,
                                         /*cached=*/false, /*backward_part=*/false);
                    }
                } else {
                    // Last recompute layer: next comes this chunk's backward
                    // of the same layer, which additionally reads dM_i.
                    issue_lookahead_(chunk, l, /*cached=*/true, /*backward_part=*/true);
                }
            }

            Tensor<Real> attn_norm_in = h;
            Tensor<Real> a = rmsnorm(h, lp.attn_norm, static_cast<Real>(kRmsNormEps));

            Tensor<Real> q2 = linear(a, lp.wq);
            Tensor<Real> q = rope(detail::as_3d(q2, cfg_.n_q_heads, cfg_.head_dim),
                                  chunk.pos_offset, static_cast<Real>(cfg_.rope_base));
            if (engine_) engine_->advance_compute(tier_cfg_.compute.q_time(), chunk.index, l);

            if (append) {
                chunk.selected[static_cast<size_t>(l)] = select_pages_(chunk, l, q);
                if (engine_ && cfg_.mode_for_layer(l) == AttentionMode::topk_sparse) {
                    h_cur = engine_->fetch_async(
                        l, union_of_(chunk.selected[static_cast<size_t>(l)]), chunk.index);
                }
            }
            const auto& sel = chunk.selected[static_cast<size_t>(l)];
            const std::vector<int32_t> sel_union = union_of_(sel);

            Tensor<Real> k2 = linear(a, lp.wk);
            Tensor<Real> k = rope(detail::as_3d(k2, cfg_.n_kv_heads, cfg_.head_dim),
                                  chunk.pos_offset, static_cast<Real>(cfg_.rope_base));
            Tensor<Real> v2 = linear(a, lp.wv);
            Tensor<Real> v = detail::as_3d(v2, cfg_.n_kv_heads, cfg_.head_dim);
            if (engine_) engine_->advance_compute(tier_cfg_.compute.kv_time(), chunk.index, l);

            if (append) {
                const SlotRange range = cache_.append_chunk(l, k, v);
                if (l == 0) chunk.slots = range;
                if (engine_) engine_->on_pages_appended(l, range);
            }

            ensure_resident_(l, sel_union, chunk.index, h_cur);

            AttnSaved<Real> attn = attn_forward(cfg_, q, cache_, l, sel, k, v);
            if (engine_) {
                engine_->advance_compute(tier_cfg_.compute.attn_time(attended_tokens_(sel)),
                                         chunk.index, l);
            }

            Tensor<Real> attn_out = linear(detail::as_2d(attn.out), lp.wo);
            Tensor<Real> h2 = h;
            h2.add_(attn_out);

            Tensor<Real> b = rmsnorm(h2, lp.mlp_norm, static_cast<Real>(kRmsNormEps));
            Tensor<Real> u = linear(b, lp.w_up);
            Tensor<Real> s = silu(u);
            Tensor<Real> mlp_out = linear(s, lp.w_down);
            Tensor<Real> h_next = h2;
            h_next.add_(mlp_out);
            if (engine_) {
                engine_->advance_compute(tier_cfg_.compute.post_time(), chunk.index, l);
                std::vector<int32_t> used = sel_union;
                if (append) {
                    for (int32_t p : own_page_ids(chunk)) used.push_back(p);
                }
                engine_->end_layer_use(l, used);
            }

            if (acts) {
                LayerActs<Real>& la = acts->layers[static_cast<size_t>(l)];
                la.attn_norm_in = std::move(attn_norm_in);
                la.attn_normed = std::move(a);
                la.q = std::move(q);
                la.k_cur = std::move(k);
                la.v_cur = std::move(v);
                la.attn = std::move(attn);
                la.mlp_norm_in = std::move(h2);
                la.mlp_normed = std::move(b);
                la.mlp_pre = std::move(u);
                la.mlp_act = std::move(s);
            }
            h = std::move(h_next);
        }

        if (append) {
            // filled must stay identical across layers after each chunk.
            for (int l = 1; l < n_layers; ++l) {
                if (cache_.filled(l) != cache_.filled(0)) {
                    throw StateError("cache fill diverged across layers");
                }
            }
        }

        Tensor<Real> final_norm_in = h;
        Tensor<Real> fn = rmsnorm(h, params.final_norm, static_cast<Real>(kRmsNormEps));
        Tensor<Real> logits = linear(fn, params.unemb);
        const Real scale = acts ? loss_scale : Real(1);
        auto ce = cross_entropy_scaled(logits, std::span<const int32_t>(chunk.targets), scale);
        const double loss = static_cast<double>(ce.loss);
        if (!std::isfinite(loss)) throw StateError("non-finite loss in chunk forward");

        if (!acts) {
            return loss;  // phase A: activations evaporate here
        }

        acts->final_norm_in = std::move(final_norm_in);
        acts->final_normed = std::move(fn);
        const int64_t tape_bytes = acts->byte_size();
        tape_.on_alloc(tape_bytes);
        backward_from_loss_(params, chunk, *acts, ce.dlogits, *grads);
        tape_.on_free(tape_bytes);
        return loss;
    }

    void backward_from_loss_(const ModelParams<Real>& params, const ChunkState& chunk,
                             const ChunkActs<Real>& acts, const Tensor<Real>& dlogits,
                             ParamGrads<Real>& grads) {
        const int c = cfg_.chunk_size;
        const int64_t kv_elems = static_cast<int64_t>(cfg_.n_kv_heads) * cfg_.head_dim;

        Tensor<Real> dfn;
        linear_backward(acts.final_normed, params.unemb, dlogits, &dfn, &grads.unemb);
        Tensor<Real> dh;
        rmsnorm_backward(acts.final_norm_in, params.final_norm, static_cast<Real>(kRmsNormEps),
                         dfn, &dh, &grads.final_norm);

        const std::vector<int32_t> own_pages = own_page_ids(chunk);

        for (int l = cfg_.n_layers - 1; l >= 0; --l) {
            const LayerParams<Real>& lp = params.layers[static_cast<size_t>(l)];
            LayerParams<Real>& lg = grads.layers[static_cast<size_t>(l)];
            const LayerActs<Real>& la = acts.layers[static_cast<size_t>(l)];
            const auto& sel = chunk.selected[static_cast<size_t>(l)];
            const std::vector<int32_t> sel_union = union_of_(sel);

            std::optional<TransferHandle> h_cur;
            if (engine_) {
                h_cur = std::exchange(pending_, std::nullopt);
                if (l > 0) {
                    issue_lookahead_(chunk, l - 1, /*cached=*/true, /*backward_part=*/true);
                } else if (chunk.index > 0) {
                    issue_lookahead_(chunks_[static_cast<size_t>(chunk.index) - 1], 0,
                                     /*cached=*/true, /*backward_part=*/false);
                }
                engine_->advance_compute(2 * tier_cfg_.compute.post_time(), chunk.index, l);
            }

            // MLP backward.
            Tensor<Real> ds;
            linear_backward(la.mlp_act, lp.w_down, dh, &ds, &lg.w_down);
            Tensor<Real> du = silu_backward(la.mlp_pre, ds);
            Tensor<Real> db;
            linear_backward(la.mlp_normed, lp.w_up, du, &db, &lg.w_up);
            Tensor<Real> dh2;
            rmsnorm_backward(la.mlp_norm_in, lp.mlp_norm, static_cast<Real>(kRmsNormEps), db,
                             &dh2, &lg.mlp_norm);
            dh2.add_(dh);  // residual

            // Attention output projection.
            Tensor<Real> dattn_flat;
            linear_backward(detail::as_2d(la.attn.out), lp.wo, dh2, &dattn_flat, &lg.wo);
            Tensor<Real> dout = detail::as_3d(dattn_flat, cfg_.n_q_heads, cfg_.head_dim);

            std::vector<int32_t> touch = sel_union;
            for (int32_t p : own_pages) touch.push_back(p);
            std::sort(touch.begin(), touch.end());
            touch.erase(std::unique(touch.begin(), touch.end()), touch.end());
            ensure_resident_(l, touch, chunk.index, h_cur);

            AttnGrads<Real> ag =
                attn_backward(cfg_, dout, la.q, cache_, l, la.k_cur, la.v_cur, la.attn);
            if (engine_) {
                engine_->on_grads_scattered(l, sel_union);
                engine_->advance_compute(2 * tier_cfg_.compute.attn_time(attended_tokens_(sel)),
                                         chunk.index, l);
            }

            // dM_i: gradients deposited into this chunk's own pages by later
            // chunks join the local attention gradient before the projections.
            {
                auto own_grads = cache_.gather_grad_pages(l, own_pages);
                for (int64_t r = 0; r < c; ++r) {
                    Real* dk = ag.dk_cur.ptr() + r * kv_elems;
                    Real* dv = ag.dv_cur.ptr() + r * kv_elems;
                    const Real* gk = own_grads.k.ptr() + r * kv_elems;
                    const Real* gv = own_grads.v.ptr() + r * kv_elems;
                    for (int64_t e = 0; e < kv_elems; ++e) {
                        dk[e] += gk[e];
                        dv[e] += gv[e];
                    }
                }
            }

            Tensor<Real> dq_pre =
                rope_backward(ag.dq, chunk.pos_offset, static_cast<Real>(cfg_.rope_base));
            Tensor<Real> dk_pre =
                rope_backward(ag.dk_cur, chunk.pos_offset, static_cast<Real>(cfg_.rope_base));
            Tensor<Real> da_q, da_k, da_v;
            linear_backward(la.attn_normed, lp.wq, detail::as_2d(dq_pre), &da_q, &lg.wq);
            linear_backward(la.attn_normed, lp.wk, detail::as_2d(dk_pre), &da_k, &lg.wk);
            linear_backward(la.attn_normed, lp.wv, detail::as_2d(ag.dv_cur), &da_v, &lg.wv);
            da_q.add_(da_k);
            da_q.add_(da_v);

            Tensor<Real> dxn;
            rmsnorm_backward(la.attn_norm_in, lp.attn_norm, static_cast<Real>(kRmsNormEps), da_q,
                             &dxn, &lg.attn_norm);
            dxn.add_(dh2);  // residual
            dh = std::move(dxn);

            if (engine_) {
                engine_->advance_compute(
                    2 * (tier_cfg_.compute.q_time() + tier_cfg_.compute.kv_time()), chunk.index, l);
                engine_->end_layer_use(l, touch);
            }
        }

        for (int r = 0; r < c; ++r) {
            const int32_t tok = chunk.tokens[static_cast<size_t>(r)];
            Real* dst = grads.emb.ptr() + static_cast<int64_t>(tok) * cfg_.d_model;
            const Real* src = dh.ptr() + static_cast<int64_t>(r) * cfg_.d_model;
            for (int j = 0; j < cfg_.d_model; ++j) dst[j] += src[j];
        }
    }

    ModelConfig cfg_;
    PagedCache<Real> cache_;
    TapeStats tape_;
    bool offload_ = false;
    TierConfig tier_cfg_;
    bool ablate_grad_pages_ = false;
    std::unique_ptr<TieredEngine<Real>> engine_;
    std::vector<ChunkState> chunks_;
    std::optional<ScheduleLog> last_log_;
    std::optional<TransferHandle> pending_;
    uint64_t last_fwd_h2d_ = 0;
};

}  // namespace chunktrain
