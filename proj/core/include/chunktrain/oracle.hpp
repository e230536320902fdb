// SPDX-License-Identifier: Apache-2.0
//
// Full-sequence reference: exact causal attention over the whole sequence in
// one parallel pass, mathematically identical to the chunked path (same
// kernels, same rope positions, same loss over T-1 predictions). The only
// difference under test is the chunking/caching machinery. A second,
// independent naive attention (triple loop, monolithic softmax) is kept here
// for double-checking the attention kernels themselves.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "chunktrain/chunk_trainer.hpp"
#include "chunktrain/model.hpp"
#include "chunktrain/ops.hpp"
#include "chunktrain/tape.hpp"

namespace chunktrain {

// ---------------------------------------------------------------------------
// Gradient comparison report
// ---------------------------------------------------------------------------

struct GradReportRow {
    std::string name;
    int layer = -1;  // -1 for globals
    double l2_err = 0;
    double rel_err = 0;
    double ref_norm = 0;
};

struct GradReport {
    std::vector<GradReportRow> rows;
    double max_rel_err = 0;

    double mean_l2() const {
        if (rows.empty()) return 0;
        double s = 0;
        for (const auto& r : rows) s += r.l2_err;
        return s / static_cast<double>(rows.size());
    }
};

std::string grad_report_to_json(const GradReport& rep);

template <class Real>
GradReport compare_grads(const ParamGrads<Real>& test, const ParamGrads<Real>& ref) {
    GradReport rep;
    std::vector<const Tensor<Real>*> ts, rs;
    std::vector<std::pair<std::string, int>> names;
    test.visit([&](const char* n, int l, const Tensor<Real>& t) {
        ts.push_back(&t);
        names.emplace_back(n, l);
    });
    ref.visit([&](const char*, int, const Tensor<Real>& t) { rs.push_back(&t); });
    if (ts.size() != rs.size()) throw ShapeError("compare_grads: parameter sets differ");
    for (size_t i = 0; i < ts.size(); ++i) {
        if (!ts[i]->same_shape(*rs[i])) throw ShapeError("compare_grads: shape mismatch");
        GradReportRow row;
        row.name = names[i].first;
        row.layer = names[i].second;
        row.l2_err = l2_diff(*ts[i], *rs[i]);
        row.ref_norm = l2_norm(*rs[i]);
        row.rel_err = row.ref_norm > 0 ? row.l2_err / row.ref_norm : row.l2_err;
        rep.max_rel_err = std::max(rep.max_rel_err, row.rel_err);
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Full-sequence forward/backward
// ---------------------------------------------------------------------------

template <class Real>
struct OracleResult {
    double loss = 0;
    ParamGrads<Real> grads;
};

// Exact parallel pass over tokens[T]. Attention per row is a monolithic
// softmax over the causal prefix (logits buffered, max-subtracted) — a
// deliberately different summation scheme from the streaming path. Saved
// activations are registered with `tape` when given; they scale with T,
// which is the contrast case for the constant-memory claim.
template <class Real>
OracleResult<Real> full_forward_backward(const ModelConfig& cfg, const ModelParams<Real>& params,
                                         std::span<const int32_t> tokens,
                                         TapeStats* tape = nullptr) {
    cfg.validate();
    const int64_t t_total = static_cast<int64_t>(tokens.size());
    if (t_total == 0) throw StateError("full_forward_backward: empty sequence");
    const int64_t qh = cfg.n_q_heads, hd = cfg.head_dim, kvh = cfg.n_kv_heads;
    const int group = cfg.gqa_group();
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));

    struct Saved {
        Tensor<Real> attn_norm_in, attn_normed, q, k, v, out, lse;
        Tensor<Real> mlp_norm_in, mlp_normed, mlp_pre, mlp_act;
    };
    std::vector<Saved> saved(static_cast<size_t>(cfg.n_layers));

    Tensor<Real> h({t_total, cfg.d_model});
    for (int64_t r = 0; r < t_total; ++r) {
        const int32_t tok = tokens[static_cast<size_t>(r)];
        if (tok < 0 || tok >= cfg.vocab_size) throw StateError("token id out of range");
        const Real* src = params.emb.ptr() + static_cast<int64_t>(tok) * cfg.d_model;
        std::copy(src, src + cfg.d_model, h.ptr() + r * cfg.d_model);
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerParams<Real>& lp = params.layers[static_cast<size_t>(l)];
        Saved& sv = saved[static_cast<size_t>(l)];
        sv.attn_norm_in = h;
        sv.attn_normed = rmsnorm(h, lp.attn_norm, static_cast<Real>(kRmsNormEps));
        sv.q = rope(detail::as_3d(linear(sv.attn_normed, lp.wq), qh, hd), 0,
                    static_cast<Real>(cfg.rope_base));
        sv.k = rope(detail::as_3d(linear(sv.attn_normed, lp.wk), kvh, hd), 0,
                    static_cast<Real>(cfg.rope_base));
        sv.v = detail::as_3d(linear(sv.attn_normed, lp.wv), kvh, hd);

        sv.out = Tensor<Real>({t_total, qh, hd});
        sv.lse = Tensor<Real>({t_total, qh});
        std::vector<Real> logits(static_cast<size_t>(t_total));
        for (int64_t t = 0; t < t_total; ++t) {
            for (int64_t hh = 0; hh < qh; ++hh) {
                const int64_t kv = hh / group;
                const Real* qv = sv.q.ptr() + (t * qh + hh) * hd;
                Real mx = -std::numeric_limits<Real>::infinity();
                for (int64_t s = 0; s <= t; ++s) {
                    const Real* kr = sv.k.ptr() + (s * kvh + kv) * hd;
                    Real dot = 0;
                    for (int64_t j = 0; j < hd; ++j) dot += qv[j] * kr[j];
                    logits[static_cast<size_t>(s)] = dot * scale;
                    mx = std::max(mx, logits[static_cast<size_t>(s)]);
                }
                Real sum = 0;
                Real* ov = sv.out.ptr() + (t * qh + hh) * hd;
                std::fill(ov, ov + hd, Real(0));
                for (int64_t s = 0; s <= t; ++s) {
                    const Real w = std::exp(logits[static_cast<size_t>(s)] - mx);
                    sum += w;
                    const Real* vv = sv.v.ptr() + (s * kvh + kv) * hd;
                    for (int64_t j = 0; j < hd; ++j) ov[j] += w * vv[j];
                }
                const Real inv = Real(1) / sum;
                for (int64_t j = 0; j < hd; ++j) ov[j] *= inv;
                sv.lse(t, hh) = mx + std::log(sum);
            }
        }

        Tensor<Real> h2 = h;
        h2.add_(linear(detail::as_2d(sv.out), lp.wo));
        sv.mlp_norm_in = h2;
        sv.mlp_normed = rmsnorm(h2, lp.mlp_norm, static_cast<Real>(kRmsNormEps));
        sv.mlp_pre = linear(sv.mlp_normed, lp.w_up);
        sv.mlp_act = silu(sv.mlp_pre);
        Tensor<Real> h_next = h2;
        h_next.add_(linear(sv.mlp_act, lp.w_down));
        h = std::move(h_next);
    }

    Tensor<Real> final_norm_in = h;
    Tensor<Real> fn = rmsnorm(h, params.final_norm, static_cast<Real>(kRmsNormEps));
    Tensor<Real> logits2 = linear(fn, params.unemb);

    std::vector<int32_t> targets(static_cast<size_t>(t_total), kIgnoreTarget);
    for (int64_t r = 0; r + 1 < t_total; ++r) {
        targets[static_cast<size_t>(r)] = tokens[static_cast<size_t>(r + 1)];
    }
    const Real loss_scale = t_total > 1 ? Real(1) / static_cast<Real>(t_total - 1) : Real(1);
    auto ce = cross_entropy_scaled(logits2, std::span<const int32_t>(targets), loss_scale);

    int64_t tape_bytes = 0;
    if (tape) {
        tape_bytes = static_cast<int64_t>(final_norm_in.bytes() + fn.bytes());
        for (const auto& sv : saved) {
            tape_bytes += static_cast<int64_t>(
                sv.attn_norm_in.bytes() + sv.attn_normed.bytes() + sv.q.bytes() + sv.k.bytes() +
                sv.v.bytes() + sv.out.bytes() + sv.lse.bytes() + sv.mlp_norm_in.bytes() +
                sv.mlp_normed.bytes() + sv.mlp_pre.bytes() + sv.mlp_act.bytes());
        }
        tape->on_alloc(tape_bytes);
    }

    OracleResult<Real> res;
    res.loss = t_total > 1 ? static_cast<double>(ce.loss) / static_cast<double>(t_total - 1) : 0.0;
    res.grads = ParamGrads<Real>::zeros_like_config(cfg);

    Tensor<Real> dfn;
    linear_backward(fn, params.unemb, ce.dlogits, &dfn, &res.grads.unemb);
    Tensor<Real> dh;
    rmsnorm_backward(final_norm_in, params.final_norm, static_cast<Real>(kRmsNormEps), dfn, &dh,
                     &res.grads.final_norm);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerParams<Real>& lp = params.layers[static_cast<size_t>(l)];
        LayerParams<Real>& lg = res.grads.layers[static_cast<size_t>(l)];
        const Saved& sv = saved[static_cast<size_t>(l)];

        Tensor<Real> ds;
        linear_backward(sv.mlp_act, lp.w_down, dh, &ds, &lg.w_down);
        Tensor<Real> du = silu_backward(sv.mlp_pre, ds);
        Tensor<Real> db;
        linear_backward(sv.mlp_normed, lp.w_up, du, &db, &lg.w_up);
        Tensor<Real> dh2;
        rmsnorm_backward(sv.mlp_norm_in, lp.mlp_norm, static_cast<Real>(kRmsNormEps), db, &dh2,
                         &lg.mlp_norm);
        dh2.add_(dh);

        Tensor<Real> dattn_flat;
        linear_backward(detail::as_2d(sv.out), lp.wo, dh2, &dattn_flat, &lg.wo);
        Tensor<Real> dout = detail::as_3d(dattn_flat, qh, hd);

        Tensor<Real> dq({t_total, qh, hd});
        Tensor<Real> dk({t_total, kvh, hd});
        Tensor<Real> dv({t_total, kvh, hd});
        for (int64_t t = 0; t < t_total; ++t) {
            for (int64_t hh = 0; hh < qh; ++hh) {
                const int64_t kv = hh / group;
                const Real* qv = sv.q.ptr() + (t * qh + hh) * hd;
                const Real* dov = dout.ptr() + (t * qh + hh) * hd;
                const Real* ov = sv.out.ptr() + (t * qh + hh) * hd;
                const Real lse = sv.lse(t, hh);
                Real dcorr = 0;
                for (int64_t j = 0; j < hd; ++j) dcorr += dov[j] * ov[j];
                Real* dqv = dq.ptr() + (t * qh + hh) * hd;
                for (int64_t s = 0; s <= t; ++s) {
                    const Real* kr = sv.k.ptr() + (s * kvh + kv) * hd;
                    const Real* vr = sv.v.ptr() + (s * kvh + kv) * hd;
                    Real dot = 0;
                    for (int64_t j = 0; j < hd; ++j) dot += qv[j] * kr[j];
                    const Real p = std::exp(dot * scale - lse);
                    Real dov_dot_v = 0;
                    for (int64_t j = 0; j < hd; ++j) dov_dot_v += dov[j] * vr[j];
                    const Real dlogit = p * (dov_dot_v - dcorr) * scale;
                    Real* dkr = dk.ptr() + (s * kvh + kv) * hd;
                    Real* dvr = dv.ptr() + (s * kvh + kv) * hd;
                    for (int64_t j = 0; j < hd; ++j) {
                        dqv[j] += dlogit * kr[j];
                        dkr[j] += dlogit * qv[j];
                        dvr[j] += p * dov[j];
                    }
                }
            }
        }

        Tensor<Real> dq_pre = rope_backward(dq, 0, static_cast<Real>(cfg.rope_base));
        Tensor<Real> dk_pre = rope_backward(dk, 0, static_cast<Real>(cfg.rope_base));
        Tensor<Real> da_q, da_k, da_v;
        linear_backward(sv.attn_normed, lp.wq, detail::as_2d(dq_pre), &da_q, &lg.wq);
        linear_backward(sv.attn_normed, lp.wk, detail::as_2d(dk_pre), &da_k, &lg.wk);
        linear_backward(sv.attn_normed, lp.wv, detail::as_2d(dv), &da_v, &lg.wv);
        da_q.add_(da_k);
        da_q.add_(da_v);

        Tensor<Real> dxn;
        rmsnorm_backward(sv.attn_norm_in, lp.attn_norm, static_cast<Real>(kRmsNormEps), da_q,
                         &dxn, &lg.attn_norm);
        dxn.add_(dh2);
        dh = std::move(dxn);
    }

    for (int64_t r = 0; r < t_total; ++r) {
        const int32_t tok = tokens[static_cast<size_t>(r)];
        Real* dst = res.grads.emb.ptr() + static_cast<int64_t>(tok) * cfg.d_model;
        const Real* src = dh.ptr() + r * cfg.d_model;
        for (int j = 0; j < cfg.d_model; ++j) dst[j] += src[j];
    }

    if (tape) tape->on_free(tape_bytes);
    return res;
}

// ---------------------------------------------------------------------------
// Independent naive attention (triple loop), for checking attention itself
// ---------------------------------------------------------------------------

template <class Real>
struct NaiveAttnResult {
    Tensor<Real> out;  // [tq x qh x hd]
    Tensor<Real> dq;
    Tensor<Real> dk;   // [tk x kvh x hd]
    Tensor<Real> dv;
};

// Query row t attends keys [0, past_len + t]. Probabilities are materialized
// per row; forward and backward share nothing with the streaming kernels.
template <class Real>
NaiveAttnResult<Real> naive_attention_fwd_bwd(const Tensor<Real>& q, const Tensor<Real>& k,
                                              const Tensor<Real>& v, int64_t past_len,
                                              const Tensor<Real>& dout, int gqa_group) {
    const int64_t tq = q.dim(0), qh = q.dim(1), hd = q.dim(2);
    const int64_t tk = k.dim(0), kvh = k.dim(1);
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));
    NaiveAttnResult<Real> res;
    res.out = Tensor<Real>({tq, qh, hd});
    res.dq = Tensor<Real>({tq, qh, hd});
    res.dk = Tensor<Real>({tk, kvh, hd});
    res.dv = Tensor<Real>({tk, kvh, hd});
    std::vector<Real> p(static_cast<size_t>(tk));
    for (int64_t t = 0; t < tq; ++t) {
        const int64_t limit = std::min(tk - 1, past_len + t);
        for (int64_t hh = 0; hh < qh; ++hh) {
            const int64_t kv = hh / gqa_group;
            const Real* qv = q.ptr() + (t * qh + hh) * hd;
            Real mx = -std::numeric_limits<Real>::infinity();
            for (int64_t s = 0; s <= limit; ++s) {
                Real dot = 0;
                const Real* kr = k.ptr() + (s * kvh + kv) * hd;
                for (int64_t j = 0; j < hd; ++j) dot += qv[j] * kr[j];
                p[static_cast<size_t>(s)] = dot * scale;
                mx = std::max(mx, p[static_cast<size_t>(s)]);
            }
            Real sum = 0;
            for (int64_t s = 0; s <= limit; ++s) {
                p[static_cast<size_t>(s)] = std::exp(p[static_cast<size_t>(s)] - mx);
                sum += p[static_cast<size_t>(s)];
            }
            for (int64_t s = 0; s <= limit; ++s) p[static_cast<size_t>(s)] /= sum;

            Real* ov = res.out.ptr() + (t * qh + hh) * hd;
            for (int64_t s = 0; s <= limit; ++s) {
                const Real* vr = v.ptr() + (s * kvh + kv) * hd;
                for (int64_t j = 0; j < hd; ++j) ov[j] += p[static_cast<size_t>(s)] * vr[j];
            }

            const Real* dov = dout.ptr() + (t * qh + hh) * hd;
            Real dcorr = 0;
            for (int64_t s = 0; s <= limit; ++s) {
                const Real* vr = v.ptr() + (s * kvh + kv) * hd;
                Real dot = 0;
                for (int64_t j = 0; j < hd; ++j) dot += dov[j] * vr[j];
                dcorr += p[static_cast<size_t>(s)] * dot;
            }
            Real* dqv = res.dq.ptr() + (t * qh + hh) * hd;
            for (int64_t s = 0; s <= limit; ++s) {
                const Real* kr = k.ptr() + (s * kvh + kv) * hd;
                const Real* vr = v.ptr() + (s * kvh + kv) * hd;
                Real dov_dot_v = 0;
                for (int64_t j = 0; j < hd; ++j) dov_dot_v += dov[j] * vr[j];
                const Real dlogit = p[static_cast<size_t>(s)] * (dov_dot_v - dcorr) * scale;
                Real* dkr = res.dk.ptr() + (s * kvh + kv) * hd;
                Real* dvr = res.dv.ptr() + (s * kvh + kv) * hd;
                for (int64_t j = 0; j < hd; ++j) {
                    dqv[j] += dlogit * kr[j];
                    dkr[j] += dlogit * qv[j];
                    dvr[j] += p[static_cast<size_t>(s)] * dov[j];
                }
            }
        }
    }
    return res;
}

}  // namespace chunktrain
