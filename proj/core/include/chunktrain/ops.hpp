// SPDX-License-Identifier: Apache-2.0
//
// Dense kernels with analytic backward passes. All layouts are row-major,
// all functions are pure, and gradient outputs marked "accum" are added to
// (callers zero them once per step).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "chunktrain/tensor.hpp"

namespace chunktrain {

// ---------------------------------------------------------------------------
// linear: y = x W, x [m x k], W [k x n]
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
        throw ShapeError("linear: inner dimensions do not match (" + x.shape_str() + " * " +
                         w.shape_str() + ")");
    }
    const int64_t m = x.dim(0), k = x.dim(1), n = w.dim(0) ? w.dim(1) : 0;
    Tensor<Real> y({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const Real* xrow = x.ptr() + i * k;
        Real* yrow = y.ptr() + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const Real xv = xrow[p];
            if (xv == Real(0)) continue;
            const Real* wrow = w.ptr() + p * n;
            for (int64_t j = 0; j < n; ++j) {
                yrow[j] += xv * wrow[j];
            }
        }
    }
    return y;
}

// dX = dY W^T, dW += x^T dY.
template <class Real>
void linear_backward(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& dy,
                     Tensor<Real>* dx, Tensor<Real>* dw_accum) {
    const int64_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
    if (dy.dim(0) != m || dy.dim(1) != n) {
        throw ShapeError("linear_backward: dY shape mismatch");
    }
    if (dx != nullptr) {
        *dx = Tensor<Real>({m, k});
        for (int64_t i = 0; i < m; ++i) {
            const Real* dyrow = dy.ptr() + i * n;
            Real* dxrow = dx->ptr() + i * k;
            for (int64_t p = 0; p < k; ++p) {
                const Real* wrow = w.ptr() + p * n;
                Real acc = 0;
                for (int64_t j = 0; j < n; ++j) {
                    acc += dyrow[j] * wrow[j];
                }
                dxrow[p] = acc;
            }
        }
    }
    if (dw_accum != nullptr) {
        if (!dw_accum->same_shape(w)) throw ShapeError("linear_backward: dW shape mismatch");
        for (int64_t i = 0; i < m; ++i) {
            const Real* xrow = x.ptr() + i * k;
            const Real* dyrow = dy.ptr() + i * n;
            for (int64_t p = 0; p < k; ++p) {
                const Real xv = xrow[p];
                if (xv == Real(0)) continue;
                Real* dwrow = dw_accum->ptr() + p * n;
                for (int64_t j = 0; j < n; ++j) {
                    dwrow[j] += xv * dyrow[j];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// softmax over the last dimension of a 2-D tensor, per-row max subtraction
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> softmax_rows(const Tensor<Real>& x) {
    if (x.rank() != 2) throw ShapeError("softmax_rows: expected rank-2 input");
    const int64_t m = x.dim(0), n = x.dim(1);
    Tensor<Real> y({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const Real* xr = x.ptr() + i * n;
        Real* yr = y.ptr() + i * n;
        Real mx = xr[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        Real sum = 0;
        for (int64_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        const Real inv = Real(1) / sum;
        for (int64_t j = 0; j < n; ++j) yr[j] *= inv;
    }
    return y;
}

// dx = y * (dy - rowsum(dy * y))
template <class Real>
Tensor<Real> softmax_rows_backward(const Tensor<Real>& y, const Tensor<Real>& dy) {
    if (!y.same_shape(dy)) throw ShapeError("softmax_rows_backward: shape mismatch");
    const int64_t m = y.dim(0), n = y.dim(1);
    Tensor<Real> dx({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const Real* yr = y.ptr() + i * n;
        const Real* dyr = dy.ptr() + i * n;
        Real dot = 0;
        for (int64_t j = 0; j < n; ++j) dot += dyr[j] * yr[j];
        Real* dxr = dx.ptr() + i * n;
        for (int64_t j = 0; j < n; ++j) dxr[j] = yr[j] * (dyr[j] - dot);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// rmsnorm: y = x / sqrt(mean(x^2) + eps) * g, applied to rows of size d
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> rmsnorm(const Tensor<Real>& x, const Tensor<Real>& g, Real eps) {
    const int64_t d = g.numel();
    if (d <= 0 || x.numel() % d != 0) throw ShapeError("rmsnorm: gain size does not divide input");
    const int64_t rows = x.numel() / d;
    Tensor<Real> y = x;
    for (int64_t r = 0; r < rows; ++r) {
        const Real* xr = x.ptr() + r * d;
        Real* yr = y.ptr() + r * d;
        Real ms = 0;
        for (int64_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        ms = ms / static_cast<Real>(d) + eps;
        const Real inv = Real(1) / std::sqrt(ms);
        for (int64_t j = 0; j < d; ++j) yr[j] = xr[j] * inv * g.data[static_cast<size_t>(j)];
    }
    return y;
}

// dx_k = g_k dy_k inv - (inv^3 / d) x_k sum_j(dy_j g_j x_j); dg_j += dy_j x_j inv.
template <class Real>
void rmsnorm_backward(const Tensor<Real>& x, const Tensor<Real>& g, Real eps,
                      const Tensor<Real>& dy, Tensor<Real>* dx, Tensor<Real>* dg_accum) {
    const int64_t d = g.numel();
    const int64_t rows = x.numel() / d;
    if (dx != nullptr) *dx = Tensor<Real>(x.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const Real* xr = x.ptr() + r * d;
        const Real* dyr = dy.ptr() + r * d;
        Real ms = 0;
        for (int64_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        ms = ms / static_cast<Real>(d) + eps;
        const Real inv = Real(1) / std::sqrt(ms);
        if (dg_accum != nullptr) {
            for (int64_t j = 0; j < d; ++j) {
                dg_accum->data[static_cast<size_t>(j)] += dyr[j] * xr[j] * inv;
            }
        }
        if (dx != nullptr) {
            Real dot = 0;
            for (int64_t j = 0; j < d; ++j) dot += dyr[j] * g.data[static_cast<size_t>(j)] * xr[j];
            const Real c = inv * inv * inv * dot / static_cast<Real>(d);
            Real* dxr = dx->ptr() + r * d;
            for (int64_t j = 0; j < d; ++j) {
                dxr[j] = dyr[j] * g.data[static_cast<size_t>(j)] * inv - xr[j] * c;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// rotary position embedding over [t x h x d] with absolute positions
// ---------------------------------------------------------------------------

// Row r carries absolute position pos_offset + r. Each (2i, 2i+1) pair of the
// head dimension is rotated by angle pos * base^(-2i/d). `sign` -1 applies the
// inverse rotation, which is also the backward map (rotations are orthogonal).
//
// Angles and trig run in double regardless of Real: float argument reduction
// at large absolute positions (hundreds of radians) would otherwise lose
// several digits of the rotation itself.
template <class Real>
Tensor<Real> rope(const Tensor<Real>& x, int64_t pos_offset, Real base = Real(10000),
                  int sign = +1) {
    if (x.rank() != 3) throw ShapeError("rope: expected [t x h x d]");
    const int64_t t = x.dim(0), h = x.dim(1), d = x.dim(2);
    if (d % 2 != 0) throw ShapeError("rope: head dimension must be even");
    Tensor<Real> y(x.shape);
    std::vector<double> inv_freq(static_cast<size_t>(d / 2));
    for (int64_t i = 0; i < d / 2; ++i) {
        inv_freq[static_cast<size_t>(i)] = std::pow(
            static_cast<double>(base), -2.0 * static_cast<double>(i) / static_cast<double>(d));
    }
    std::vector<Real> cs(static_cast<size_t>(d));
    for (int64_t r = 0; r < t; ++r) {
        const double pos = static_cast<double>(sign) * static_cast<double>(pos_offset + r);
        for (int64_t i = 0; i < d / 2; ++i) {
            const double angle = pos * inv_freq[static_cast<size_t>(i)];
            cs[static_cast<size_t>(2 * i)] = static_cast<Real>(std::cos(angle));
            cs[static_cast<size_t>(2 * i + 1)] = static_cast<Real>(std::sin(angle));
        }
        for (int64_t hh = 0; hh < h; ++hh) {
            const Real* xr = x.ptr() + (r * h + hh) * d;
            Real* yr = y.ptr() + (r * h + hh) * d;
            for (int64_t i = 0; i < d / 2; ++i) {
                const Real c = cs[static_cast<size_t>(2 * i)];
                const Real s = cs[static_cast<size_t>(2 * i + 1)];
                const Real x0 = xr[2 * i], x1 = xr[2 * i + 1];
                yr[2 * i] = x0 * c - x1 * s;
                yr[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    return y;
}

template <class Real>
Tensor<Real> rope_backward(const Tensor<Real>& dy, int64_t pos_offset, Real base = Real(10000)) {
    return rope(dy, pos_offset, base, -1);
}

// ---------------------------------------------------------------------------
// silu: y = x * sigmoid(x)
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> silu(const Tensor<Real>& x) {
    Tensor<Real> y(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) {
        const Real s = Real(1) / (Real(1) + std::exp(-x.data[i]));
        y.data[i] = x.data[i] * s;
    }
    return y;
}

template <class Real>
Tensor<Real> silu_backward(const Tensor<Real>& x, const Tensor<Real>& dy) {
    if (!x.same_shape(dy)) throw ShapeError("silu_backward: shape mismatch");
    Tensor<Real> dx(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) {
        const Real s = Real(1) / (Real(1) + std::exp(-x.data[i]));
        dx.data[i] = dy.data[i] * s * (Real(1) + x.data[i] * (Real(1) - s));
    }
    return dx;
}

// ---------------------------------------------------------------------------
// cross entropy over rows of logits
// ---------------------------------------------------------------------------

template <class Real>
struct CrossEntropyResult {
    Real loss = 0;           // per the scaling mode below
    int64_t count = 0;       // rows that contributed (target != ignore)
    Tensor<Real> dlogits;
};

constexpr int32_t kIgnoreTarget = -1;

// Sum of per-row negative log-likelihoods; dlogits = (softmax - onehot) * scale.
// Rows whose target is kIgnoreTarget contribute nothing. The mean-loss
// convenience wrapper below fixes scale = 1/rows.
template <class Real>
CrossEntropyResult<Real> cross_entropy_scaled(const Tensor<Real>& logits,
                                              std::span<const int32_t> targets, Real scale) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: expected [t x V] logits");
    const int64_t t = logits.dim(0), v = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != t) {
        throw ShapeError("cross_entropy: one target per logits row required");
    }
    CrossEntropyResult<Real> res;
    res.dlogits = Tensor<Real>({t, v});
    Real loss_sum = 0;
    for (int64_t i = 0; i < t; ++i) {
        const int32_t tgt = targets[static_cast<size_t>(i)];
        if (tgt == kIgnoreTarget) continue;
        if (tgt < 0 || tgt >= v) {
            throw ShapeError("cross_entropy: target id out of range");
        }
        const Real* lr = logits.ptr() + i * v;
        Real mx = lr[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
        Real sum = 0;
        for (int64_t j = 0; j < v; ++j) sum += std::exp(lr[j] - mx);
        const Real lse = std::log(sum) + mx;
        loss_sum += lse - lr[tgt];
        Real* dr = res.dlogits.ptr() + i * v;
        const Real inv = Real(1) / sum;
        for (int64_t j = 0; j < v; ++j) dr[j] = std::exp(lr[j] - mx) * inv * scale;
        dr[tgt] -= scale;
        res.count += 1;
    }
    res.loss = loss_sum;
    return res;
}

// Mean loss over all rows; dlogits = (softmax - onehot) / t.
template <class Real>
CrossEntropyResult<Real> cross_entropy(const Tensor<Real>& logits,
                                       std::span<const int32_t> targets) {
    const int64_t t = logits.dim(0);
    auto res = cross_entropy_scaled(logits, targets, Real(1) / static_cast<Real>(t));
    res.loss /= static_cast<Real>(t);
    return res;
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking
// ---------------------------------------------------------------------------

// Central differences (f(x+e) - f(x-e)) / 2e against an analytic gradient,
// elementwise over the chosen coordinates; returns the max relative error.
// The function is evaluated in double regardless of the mode under test, so
// the difference quotient itself is not the noise floor.
struct FdCheckOptions {
    double eps = 1e-5;
    // 0 checks every coordinate; otherwise this many are sampled.
    int64_t max_coords = 0;
    uint64_t sample_seed = 0;
    // Below this magnitude both gradients count as zero.
    double zero_floor = 1e-9;
};

inline double fd_max_rel_err(const std::function<double(std::span<const double>)>& f,
                             std::span<double> theta, std::span<const double> analytic,
                             const FdCheckOptions& opt = {}) {
    if (theta.size() != analytic.size()) {
        throw ShapeError("fd_max_rel_err: gradient size mismatch");
    }
    std::vector<int64_t> coords;
    const int64_t n = static_cast<int64_t>(theta.size());
    if (opt.max_coords <= 0 || opt.max_coords >= n) {
        coords.resize(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
        Rng rng(opt.sample_seed);
        for (int64_t i = 0; i < opt.max_coords; ++i) {
            coords.push_back(static_cast<int64_t>(rng.below(static_cast<uint64_t>(n))));
        }
    }
    double worst = 0.0;
    for (int64_t c : coords) {
        const double saved = theta[static_cast<size_t>(c)];
        theta[static_cast<size_t>(c)] = saved + opt.eps;
        const double fp = f(theta);
        theta[static_cast<size_t>(c)] = saved - opt.eps;
        const double fm = f(theta);
        theta[static_cast<size_t>(c)] = saved;
        const double fd = (fp - fm) / (2.0 * opt.eps);
        const double an = analytic[static_cast<size_t>(c)];
        const double denom = std::max(std::abs(fd), std::abs(an));
        if (denom < opt.zero_floor) continue;
        worst = std::max(worst, std::abs(fd - an) / denom);
    }
    return worst;
}

}  // namespace chunktrain
