// SPDX-License-Identifier: Apache-2.0
//
// Chunked causal attention over the paged cache: page retrieval scoring,
// Top-K / local / dense page selection, a streaming (online-softmax) forward
// that saves per-row logsumexp, and the exact backward that scatter-adds
// past-page gradients into the cache's gradient pages.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "chunktrain/config.hpp"
#include "chunktrain/paged_kv.hpp"
#include "chunktrain/tensor.hpp"

namespace chunktrain {

// ---------------------------------------------------------------------------
// Retrieval scoring (the vote)
// ---------------------------------------------------------------------------

// q: [(tokens) x qh x hd] for one chunk, k_avg: [n x kvh x hd] page
// representatives. For every query token and head, raw scores against the
// head's kv-group representatives are softmax-normalized over the n candidate
// pages, then summed over the tokens and heads of each query page, giving an
// m x n vote matrix (m = query pages in the chunk). The raw dot product is
// unscaled by default; score_scale adds the 1/sqrt(hd) factor.
template <class Real>
Tensor<Real> score_pages(const Tensor<Real>& q, const Tensor<Real>& k_avg, int page_size,
                         int gqa_group, bool score_scale = false) {
    if (q.rank() != 3 || k_avg.rank() != 3) throw ShapeError("score_pages: expected rank-3 inputs");
    const int64_t tokens = q.dim(0), qh = q.dim(1), hd = q.dim(2);
    const int64_t n = k_avg.dim(0);
    if (n < 1) throw ShapeError("score_pages: needs at least one candidate page");
    const int64_t m = (tokens + page_size - 1) / page_size;
    Tensor<Real> score({m, n});
    const Real scale = score_scale ? Real(1) / std::sqrt(static_cast<Real>(hd)) : Real(1);
    std::vector<Real> raw(static_cast<size_t>(n));
    for (int64_t t = 0; t < tokens; ++t) {
        const int64_t qpage = t / page_size;
        for (int64_t h = 0; h < qh; ++h) {
            const int64_t kvh = h / gqa_group;
            const Real* qv = q.ptr() + (t * qh + h) * hd;
            Real mx = -std::numeric_limits<Real>::infinity();
            for (int64_t p = 0; p < n; ++p) {
                const Real* kv = k_avg.ptr() + (p * k_avg.dim(1) + kvh) * hd;
                Real dot = 0;
                for (int64_t j = 0; j < hd; ++j) dot += qv[j] * kv[j];
                raw[static_cast<size_t>(p)] = dot * scale;
                mx = std::max(mx, raw[static_cast<size_t>(p)]);
            }
            Real sum = 0;
            for (int64_t p = 0; p < n; ++p) {
                raw[static_cast<size_t>(p)] = std::exp(raw[static_cast<size_t>(p)] - mx);
                sum += raw[static_cast<size_t>(p)];
            }
            const Real inv = Real(1) / sum;
            Real* srow = score.ptr() + qpage * n;
            for (int64_t p = 0; p < n; ++p) srow[p] += raw[static_cast<size_t>(p)] * inv;
        }
    }
    return score;
}

// The k highest-scoring candidate page ids, ties toward the lower id,
// returned ascending. k >= n degenerates to all pages.
inline std::vector<int32_t> select_topk(std::span<const double> score_row, int budget_pages) {
    const int n = static_cast<int>(score_row.size());
    if (budget_pages < 0) throw ShapeError("select_topk: negative budget");
    std::vector<int32_t> ids(static_cast<size_t>(n));
    std::iota(ids.begin(), ids.end(), 0);
    if (budget_pages < n) {
        std::partial_sort(ids.begin(), ids.begin() + budget_pages, ids.end(),
                          [&](int32_t a, int32_t b) {
                              const double sa = score_row[static_cast<size_t>(a)];
                              const double sb = score_row[static_cast<size_t>(b)];
                              if (sa != sb) return sa > sb;
                              return a < b;
                          });
        ids.resize(static_cast<size_t>(budget_pages));
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

template <class Real>
std::vector<int32_t> select_topk_row(const Tensor<Real>& score, int64_t row, int budget_pages) {
    const int64_t n = score.dim(1);
    std::vector<double> s(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) s[static_cast<size_t>(j)] = static_cast<double>(score(row, j));
    return select_topk(s, budget_pages);
}

// The most recent min(W, n) page ids, ascending.
inline std::vector<int32_t> select_recent(int n_pages, int window) {
    if (window < 0) throw ShapeError("select_recent: negative window");
    const int take = std::min(n_pages, window);
    std::vector<int32_t> ids(static_cast<size_t>(take));
    std::iota(ids.begin(), ids.end(), n_pages - take);
    return ids;
}

inline std::vector<int32_t> select_all(int n_pages) {
    std::vector<int32_t> ids(static_cast<size_t>(n_pages));
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
}

// ---------------------------------------------------------------------------
// Streaming attention forward / exact backward
// ---------------------------------------------------------------------------

template <class Real>
struct AttnSaved {
    Tensor<Real> out;  // [C x qh x hd]
    Tensor<Real> lse;  // [C x qh], log-sum-exp of the scaled logits
    // Page ids attended by each query page; cached at forward time and reused
    // verbatim in the backward pass (retrieval is not differentiated).
    std::vector<std::vector<int32_t>> selected;
};

namespace detail {

template <class Real>
struct OnlineRow {
    Real m = -std::numeric_limits<Real>::infinity();
    Real l = 0;
    std::vector<Real> acc;

    explicit OnlineRow(int64_t hd) : acc(static_cast<size_t>(hd), Real(0)) {}

    void update(Real logit, const Real* v, int64_t hd) {
        if (logit > m) {
            const Real corr = (l == Real(0)) ? Real(0) : std::exp(m - logit);
            for (int64_t j = 0; j < hd; ++j) acc[static_cast<size_t>(j)] *= corr;
            l *= corr;
            m = logit;
        }
        const Real w = std::exp(logit - m);
        l += w;
        for (int64_t j = 0; j < hd; ++j) acc[static_cast<size_t>(j)] += w * v[j];
    }
};

}  // namespace detail

// Causal attention of one chunk's queries over (selected past pages, then the
// chunk's own K/V prefix). q is [C x qh x hd] post-rope; k_cur/v_cur are
// [C x kvh x hd]. Past pages are read through gather_pages page by page with
// running (max, sum, acc) accumulators, so the softmax never materializes.
// Logits are scaled by 1/sqrt(hd).
template <class Real>
AttnSaved<Real> attn_forward(const ModelConfig& cfg, const Tensor<Real>& q,
                             PagedCache<Real>& cache, int layer,
                             std::vector<std::vector<int32_t>> selected,
                             const Tensor<Real>& k_cur, const Tensor<Real>& v_cur) {
    const int64_t c = q.dim(0), qh = q.dim(1), hd = q.dim(2);
    const int group = cfg.gqa_group();
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));
    const int p_sz = cfg.page_size;

    AttnSaved<Real> saved;
    saved.out = Tensor<Real>({c, qh, hd});
    saved.lse = Tensor<Real>({c, qh});
    saved.selected = std::move(selected);

    const int64_t n_qpages = (c + p_sz - 1) / p_sz;
    if (static_cast<int64_t>(saved.selected.size()) != n_qpages) {
        throw ShapeError("attn_forward: one selected-page list per query page required");
    }

    for (int64_t qp = 0; qp < n_qpages; ++qp) {
        const auto& page_ids = saved.selected[static_cast<size_t>(qp)];
        const auto gathered = cache.gather_pages(layer, page_ids);
        const int64_t past_rows = gathered.k.numel() ? gathered.k.dim(0) : 0;
        const int64_t row_begin = qp * p_sz;
        const int64_t row_end = std::min<int64_t>(c, row_begin + p_sz);
        for (int64_t t = row_begin; t < row_end; ++t) {
            for (int64_t h = 0; h < qh; ++h) {
                const int64_t kvh = h / group;
                const Real* qv = q.ptr() + (t * qh + h) * hd;
                detail::OnlineRow<Real> acc(hd);
                for (int64_t s = 0; s < past_rows; ++s) {
                    if (!gathered.valid[static_cast<size_t>(s)]) continue;
                    const Real* kv = gathered.k.ptr() + (s * cfg.n_kv_heads + kvh) * hd;
                    Real dot = 0;
                    for (int64_t j = 0; j < hd; ++j) dot += qv[j] * kv[j];
                    acc.update(dot * scale, gathered.v.ptr() + (s * cfg.n_kv_heads + kvh) * hd, hd);
                }
                for (int64_t s = 0; s <= t; ++s) {  // causal prefix of the chunk itself
                    const Real* kv = k_cur.ptr() + (s * cfg.n_kv_heads + kvh) * hd;
                    Real dot = 0;
                    for (int64_t j = 0; j < hd; ++j) dot += qv[j] * kv[j];
                    acc.update(dot * scale, v_cur.ptr() + (s * cfg.n_kv_heads + kvh) * hd, hd);
                }
                Real* o = saved.out.ptr() + (t * qh + h) * hd;
                const Real inv = Real(1) / acc.l;
                for (int64_t j = 0; j < hd; ++j) o[j] = acc.acc[static_cast<size_t>(j)] * inv;
                saved.lse(t, h) = acc.m + std::log(acc.l);
            }
        }
    }
    return saved;
}

template <class Real>
struct AttnGrads {
    Tensor<Real> dq;      // [C x qh x hd]
    Tensor<Real> dk_cur;  // [C x kvh x hd]
    Tensor<Real> dv_cur;  // [C x kvh x hd]
};

// Exact backward of attn_forward. Attention weights are rebuilt from the
// saved logsumexp (p = exp(logit - lse)), the per-row correction term is
// D = rowsum(dO * O), and gradients to past pages go straight into the
// cache's gradient pages via scatter_add — they are never returned as fresh
// tensors.
template <class Real>
AttnGrads<Real> attn_backward(const ModelConfig& cfg, const Tensor<Real>& dout,
                              const Tensor<Real>& q, PagedCache<Real>& cache, int layer,
                              const Tensor<Real>& k_cur, const Tensor<Real>& v_cur,
                              const AttnSaved<Real>& saved) {
    const int64_t c = q.dim(0), qh = q.dim(1), hd = q.dim(2);
    if (!dout.same_shape(saved.out)) throw ShapeError("attn_backward: dO shape mismatch");
    const int group = cfg.gqa_group();
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));
    const int p_sz = cfg.page_size;

    AttnGrads<Real> g;
    g.dq = Tensor<Real>({c, qh, hd});
    g.dk_cur = Tensor<Real>({c, cfg.n_kv_heads, cfg.head_dim});
    g.dv_cur = Tensor<Real>({c, cfg.n_kv_heads, cfg.head_dim});

    const int64_t n_qpages = (c + p_sz - 1) / p_sz;
    for (int64_t qp = 0; qp < n_qpages; ++qp) {
        const auto& page_ids = saved.selected[static_cast<size_t>(qp)];
        const auto gathered = cache.gather_pages(layer, page_ids);
        const int64_t past_rows = gathered.k.numel() ? gathered.k.dim(0) : 0;
        Tensor<Real> dk_past({past_rows, cfg.n_kv_heads, cfg.head_dim});
        Tensor<Real> dv_past({past_rows, cfg.n_kv_heads, cfg.head_dim});

        const int64_t row_begin = qp * p_sz;
        const int64_t row_end = std::min<int64_t>(c, row_begin + p_sz);
        for (int64_t t = row_begin; t < row_end; ++t) {
            for (int64_t h = 0; h < qh; ++h) {
                const int64_t kvh = h / group;
                const Real* qv = q.ptr() + (t * qh + h) * hd;
                const Real* dov = dout.ptr() + (t * qh + h) * hd;
                const Real* ov = saved.out.ptr() + (t * qh + h) * hd;
                const Real lse = saved.lse(t, h);
                Real dcorr = 0;  // D = rowsum(dO * O)
                for (int64_t j = 0; j < hd; ++j) dcorr += dov[j] * ov[j];
                Real* dqv = g.dq.ptr() + (t * qh + h) * hd;

                auto accumulate = [&](const Real* kv, const Real* vv, Real* dkv, Real* dvv) {
                    Real dot = 0;
                    for (int64_t j = 0; j < hd; ++j) dot += qv[j] * kv[j];
                    const Real p = std::exp(dot * scale - lse);
                    Real dov_dot_v = 0;
                    for (int64_t j = 0; j < hd; ++j) dov_dot_v += dov[j] * vv[j];
                    const Real dlogit = p * (dov_dot_v - dcorr) * scale;
                    for (int64_t j = 0; j < hd; ++j) {
                        dqv[j] += dlogit * kv[j];
                        dkv[j] += dlogit * qv[j];
                        dvv[j] += p * dov[j];
                    }
                };

                for (int64_t s = 0; s < past_rows; ++s) {
                    if (!gathered.valid[static_cast<size_t>(s)]) continue;
                    accumulate(gathered.k.ptr() + (s * cfg.n_kv_heads + kvh) * hd,
                               gathered.v.ptr() + (s * cfg.n_kv_heads + kvh) * hd,
                               dk_past.ptr() + (s * cfg.n_kv_heads + kvh) * hd,
                               dv_past.ptr() + (s * cfg.n_kv_heads + kvh) * hd);
                }
                for (int64_t s = 0; s <= t; ++s) {
                    accumulate(k_cur.ptr() + (s * cfg.n_kv_heads + kvh) * hd,
                               v_cur.ptr() + (s * cfg.n_kv_heads + kvh) * hd,
                               g.dk_cur.ptr() + (s * cfg.n_kv_heads + kvh) * hd,
                               g.dv_cur.ptr() + (s * cfg.n_kv_heads + kvh) * hd);
                }
            }
        }
        if (!page_ids.empty()) {
            cache.scatter_add_grads(layer, page_ids, dk_past, dv_past);
        }
    }
    return g;
}

}  // namespace chunktrain
