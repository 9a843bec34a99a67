#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "pliv/rng.hpp"

namespace pliv {

// Dense row-major float tensor. Shapes are small (<= 4 dims in practice);
// everything heavy goes through the kernels, this is just storage.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> d;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), d(count(shape), 0.0f) {}
    Tensor(std::vector<int> s, float fill) : shape(std::move(s)), d(count(shape), fill) {}

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, float v) { return Tensor(std::move(s), v); }

    static Tensor randn(std::vector<int> s, Rng& rng, float stddev = 1.0f) {
        Tensor t(std::move(s));
        for (auto& v : t.d) v = float(rng.normal()) * stddev;
        return t;
    }

    static Tensor from(std::vector<int> s, std::vector<float> data) {
        Tensor t;
        t.shape = std::move(s);
        t.d = std::move(data);
        if (int64_t(t.d.size()) != count(t.shape)) throw std::invalid_argument("tensor: shape/data mismatch");
        return t;
    }

    int64_t numel() const { return int64_t(d.size()); }
    int dim(int i) const { return shape[size_t(i)]; }
    int ndim() const { return int(shape.size()); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor reshaped(std::vector<int> s) const {
        if (count(s) != numel()) throw std::invalid_argument("tensor: reshape numel mismatch");
        Tensor t;
        t.shape = std::move(s);
        t.d = d;
        return t;
    }

    float* data() { return d.data(); }
    const float* data() const { return d.data(); }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int v : s) {
            if (v < 0) throw std::invalid_argument("tensor: negative dim");
            n *= v;
        }
        return n;
    }
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.d.size(); ++i)
        if (a.d[i] != b.d[i]) return false;
    return true;
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
    assert(a.shape == b.shape);
    float m = 0.0f;
    for (size_t i = 0; i < a.d.size(); ++i) {
        float v = std::fabs(a.d[i] - b.d[i]);
        if (v > m) m = v;
    }
    return m;
}

}  // namespace pliv
