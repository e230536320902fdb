// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor. Real is float (default mode) or double
// (verification mode); the whole core is templated on it.
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "chunktrain/common.hpp"

namespace chunktrain {

template <class Real>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<Real> data;

    Tensor() = default;

    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(checked_numel(shape)), Real(0));
    }

    Tensor(std::vector<int64_t> s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != checked_numel(shape)) {
            throw ShapeError("tensor data size does not match shape");
        }
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int64_t> s, Real v) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }

    static Tensor identity(int64_t n) {
        Tensor t({n, n});
        for (int64_t i = 0; i < n; ++i) t(i, i) = Real(1);
        return t;
    }

    static Tensor randn(std::vector<int64_t> s, Rng& rng, double std_dev = 1.0) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = static_cast<Real>(rng.normal() * std_dev);
        return t;
    }

    static int64_t checked_numel(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t e : s) {
            if (e < 0) throw ShapeError("negative tensor extent");
            n *= e;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    size_t bytes() const { return data.size() * sizeof(Real); }
    int rank() const { return static_cast<int>(shape.size()); }

    int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    Real* ptr() { return data.data(); }
    const Real* ptr() const { return data.data(); }

    Real& operator()(int64_t i) { return data[static_cast<size_t>(i)]; }
    Real operator()(int64_t i) const { return data[static_cast<size_t>(i)]; }

    Real& operator()(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    Real operator()(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

    Real& operator()(int64_t i, int64_t j, int64_t k) {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    Real operator()(int64_t i, int64_t j, int64_t k) const {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }

    // Same buffer, different view; total element count must match.
    Tensor reshaped(std::vector<int64_t> s) const {
        if (checked_numel(s) != numel()) throw ShapeError("reshape changes element count");
        Tensor t;
        t.shape = std::move(s);
        t.data = data;
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (Real v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    void fill(Real v) {
        for (auto& x : data) x = v;
    }

    void add_(const Tensor& o) {
        if (!same_shape(o)) throw ShapeError("add_: shape mismatch");
        for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    }

    void scale_(Real s) {
        for (auto& x : data) x *= s;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << "]";
        return os.str();
    }
};

template <class Real>
double l2_norm(const Tensor<Real>& t) {
    double s = 0.0;
    for (Real v : t.data) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
}

template <class Real>
double l2_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (!a.same_shape(b)) throw ShapeError("l2_diff: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        s += d * d;
    }
    return std::sqrt(s);
}

template <class Real>
double max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    }
    return m;
}

// Relative L2 error of `test` against `ref`; zero reference falls back to the
// absolute norm so identical zero tensors report 0.
template <class Real>
double rel_l2_err(const Tensor<Real>& test, const Tensor<Real>& ref) {
    const double diff = l2_diff(test, ref);
    const double denom = l2_norm(ref);
    if (denom == 0.0) return diff;
    return diff / denom;
}

}  // namespace chunktrain
