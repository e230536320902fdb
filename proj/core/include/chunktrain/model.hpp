// SPDX-License-Identifier: Apache-2.0
//
// Toy decoder-only transformer parameters, initialization, Adam, and the
// flat binary checkpoint format.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "chunktrain/config.hpp"
#include "chunktrain/ops.hpp"
#include "chunktrain/tensor.hpp"

namespace chunktrain {

template <class Real>
struct LayerParams {
    Tensor<Real> wq;          // [d_model x n_q_heads*head_dim]
    Tensor<Real> wk;          // [d_model x n_kv_heads*head_dim]
    Tensor<Real> wv;          // [d_model x n_kv_heads*head_dim]
    Tensor<Real> wo;          // [n_q_heads*head_dim x d_model]
    Tensor<Real> w_up;        // [d_model x d_ff]
    Tensor<Real> w_down;      // [d_ff x d_model]
    Tensor<Real> attn_norm;   // [d_model]
    Tensor<Real> mlp_norm;    // [d_model]
};

// Also used as the gradient store dTheta: shapes mirror exactly.
template <class Real>
struct ModelParams {
    Tensor<Real> emb;         // [vocab x d_model]
    Tensor<Real> unemb;       // [d_model x vocab]
    Tensor<Real> final_norm;  // [d_model]
    std::vector<LayerParams<Real>> layers;

    static ModelParams zeros_like_config(const ModelConfig& cfg) {
        cfg.validate();
        ModelParams p;
        const int64_t d = cfg.d_model;
        const int64_t qd = static_cast<int64_t>(cfg.n_q_heads) * cfg.head_dim;
        const int64_t kd = static_cast<int64_t>(cfg.n_kv_heads) * cfg.head_dim;
        p.emb = Tensor<Real>({cfg.vocab_size, d});
        p.unemb = Tensor<Real>({d, cfg.vocab_size});
        p.final_norm = Tensor<Real>({d});
        p.layers.resize(static_cast<size_t>(cfg.n_layers));
        for (auto& l : p.layers) {
            l.wq = Tensor<Real>({d, qd});
            l.wk = Tensor<Real>({d, kd});
            l.wv = Tensor<Real>({d, kd});
            l.wo = Tensor<Real>({qd, d});
            l.w_up = Tensor<Real>({d, cfg.d_ff});
            l.w_down = Tensor<Real>({cfg.d_ff, d});
            l.attn_norm = Tensor<Real>({d});
            l.mlp_norm = Tensor<Real>({d});
        }
        return p;
    }

    // Visits every parameter tensor in a fixed, documented order. layer is -1
    // for the global tensors. The checkpoint format and Adam state rely on
    // this order being stable.
    template <class F>
    void visit(F&& f) {
        f("emb", -1, emb);
        f("unemb", -1, unemb);
        f("final_norm", -1, final_norm);
        for (size_t i = 0; i < layers.size(); ++i) {
            const int li = static_cast<int>(i);
            f("wq", li, layers[i].wq);
            f("wk", li, layers[i].wk);
            f("wv", li, layers[i].wv);
            f("wo", li, layers[i].wo);
            f("w_up", li, layers[i].w_up);
            f("w_down", li, layers[i].w_down);
            f("attn_norm", li, layers[i].attn_norm);
            f("mlp_norm", li, layers[i].mlp_norm);
        }
    }

    template <class F>
    void visit(F&& f) const {
        const_cast<ModelParams*>(this)->visit(
            [&](const char* name, int layer, Tensor<Real>& t) {
                f(name, layer, static_cast<const Tensor<Real>&>(t));
            });
    }

    int64_t param_count() const {
        int64_t n = 0;
        visit([&](const char*, int, const Tensor<Real>& t) { n += t.numel(); });
        return n;
    }

    void zero() {
        visit([](const char*, int, Tensor<Real>& t) { t.fill(Real(0)); });
    }

    void add_scaled(const ModelParams& other, Real s) {
        auto it = [&](auto& self, auto& o) {
            for (size_t i = 0; i < self.data.size(); ++i) self.data[i] += s * o.data[i];
        };
        it(emb, other.emb);
        it(unemb, other.unemb);
        it(final_norm, other.final_norm);
        for (size_t i = 0; i < layers.size(); ++i) {
            it(layers[i].wq, other.layers[i].wq);
            it(layers[i].wk, other.layers[i].wk);
            it(layers[i].wv, other.layers[i].wv);
            it(layers[i].wo, other.layers[i].wo);
            it(layers[i].w_up, other.layers[i].w_up);
            it(layers[i].w_down, other.layers[i].w_down);
            it(layers[i].attn_norm, other.layers[i].attn_norm);
            it(layers[i].mlp_norm, other.layers[i].mlp_norm);
        }
    }
};

template <class Real>
using ParamGrads = ModelParams<Real>;

// Weights ~ Normal(0, d_model^-1/2), norm gains at one. Deterministic in the
// seed: one RNG stream consumed in visit order.
template <class Real>
ModelParams<Real> init_params(const ModelConfig& cfg, uint64_t seed) {
    ModelParams<Real> p = ModelParams<Real>::zeros_like_config(cfg);
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    Rng rng(seed);
    p.visit([&](const char* name, int, Tensor<Real>& t) {
        const std::string n(name);
        if (n == "attn_norm" || n == "mlp_norm" || n == "final_norm") {
            t.fill(Real(1));
        } else {
            for (auto& x : t.data) x = static_cast<Real>(rng.normal() * std_dev);
        }
    });
    return p;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamHyperParams {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
};

template <class Real>
struct AdamState {
    ModelParams<Real> m;
    ModelParams<Real> v;

    static AdamState zeros_like(const ModelConfig& cfg) {
        AdamState s;
        s.m = ModelParams<Real>::zeros_like_config(cfg);
        s.v = ModelParams<Real>::zeros_like_config(cfg);
        return s;
    }
};

// Bias-corrected Adam, applied in place; grads are read-only. t counts from 1.
template <class Real>
void adam_step(ModelParams<Real>& params, const ParamGrads<Real>& grads, AdamState<Real>& state,
               const AdamHyperParams& hp, int64_t t) {
    if (t < 1) throw StateError("adam_step: t must be >= 1");
    const Real b1 = static_cast<Real>(hp.beta1);
    const Real b2 = static_cast<Real>(hp.beta2);
    const Real bc1 = Real(1) - static_cast<Real>(std::pow(hp.beta1, static_cast<double>(t)));
    const Real bc2 = Real(1) - static_cast<Real>(std::pow(hp.beta2, static_cast<double>(t)));
    const Real lr = static_cast<Real>(hp.lr);
    const Real eps = static_cast<Real>(hp.eps);

    std::vector<Tensor<Real>*> pts, gts, mts, vts;
    params.visit([&](const char*, int, Tensor<Real>& x) { pts.push_back(&x); });
    const_cast<ParamGrads<Real>&>(grads).visit(
        [&](const char*, int, Tensor<Real>& x) { gts.push_back(&x); });
    state.m.visit([&](const char*, int, Tensor<Real>& x) { mts.push_back(&x); });
    state.v.visit([&](const char*, int, Tensor<Real>& x) { vts.push_back(&x); });

    for (size_t k = 0; k < pts.size(); ++k) {
        auto& p = pts[k]->data;
        const auto& g = gts[k]->data;
        auto& m = mts[k]->data;
        auto& v = vts[k]->data;
        for (size_t i = 0; i < p.size(); ++i) {
            m[i] = b1 * m[i] + (Real(1) - b1) * g[i];
            v[i] = b2 * v[i] + (Real(1) - b2) * g[i] * g[i];
            const Real mhat = m[i] / bc1;
            const Real vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint: magic "OOMB", version u32, then per tensor
//   name_len u32 | name bytes | rank u32 | dims u64[] | f32 data
// all little-endian, data always stored as f32.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f32(std::ostream& os, float v) {
    uint32_t u = 0;
    std::memcpy(&u, &v, 4);
    put_u32(os, u);
}

inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("checkpoint: truncated file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw IoError("checkpoint: truncated file");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

inline float get_f32(std::istream& is) {
    const uint32_t u = get_u32(is);
    float v = 0;
    std::memcpy(&v, &u, 4);
    return v;
}

}  // namespace detail

constexpr char kCheckpointMagic[4] = {'O', 'O', 'M', 'B'};
constexpr uint32_t kCheckpointVersion = 1;

template <class Real>
void save_checkpoint(const std::string& path, const ModelParams<Real>& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, 4);
    detail::put_u32(os, kCheckpointVersion);
    params.visit([&](const char* name, int layer, const Tensor<Real>& t) {
        std::string full(name);
        if (layer >= 0) full = "layers." + std::to_string(layer) + "." + full;
        detail::put_u32(os, static_cast<uint32_t>(full.size()));
        os.write(full.data(), static_cast<std::streamsize>(full.size()));
        detail::put_u32(os, static_cast<uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) detail::put_u64(os, static_cast<uint64_t>(t.dim(i)));
        for (Real v : t.data) detail::put_f32(os, static_cast<float>(v));
    });
    if (!os) throw IoError("checkpoint write failed: " + path);
}

// Loads into an existing parameter set; every stored tensor must match a
// parameter by name and shape, and every parameter must be present.
template <class Real>
void load_checkpoint(const std::string& path, ModelParams<Real>& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw IoError("checkpoint: bad magic");
    }
    const uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion) {
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    }
    size_t loaded = 0;
    params.visit([&](const char* name, int layer, Tensor<Real>& t) {
        std::string expect(name);
        if (layer >= 0) expect = "layers." + std::to_string(layer) + "." + expect;
        const uint32_t name_len = detail::get_u32(is);
        std::string got(name_len, '\0');
        is.read(got.data(), name_len);
        if (!is || got != expect) {
            throw IoError("checkpoint: expected tensor '" + expect + "', found '" + got + "'");
        }
        const uint32_t rank = detail::get_u32(is);
        if (rank != static_cast<uint32_t>(t.rank())) throw IoError("checkpoint: rank mismatch for " + got);
        for (int i = 0; i < t.rank(); ++i) {
            if (detail::get_u64(is) != static_cast<uint64_t>(t.dim(i))) {
                throw IoError("checkpoint: shape mismatch for " + got);
            }
        }
        for (auto& v : t.data) v = static_cast<Real>(detail::get_f32(is));
        ++loaded;
    });
    (void)loaded;
}

}  // namespace chunktrain
