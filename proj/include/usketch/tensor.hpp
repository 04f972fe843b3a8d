#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "usketch/error.hpp"

namespace usketch {

// Dense [C, H, W] array, row-major. Scalars are [1,1,1], channel vectors
// [C,1,1]. This one layout carries latents, activations, images and weights
// (weights fold their trailing kernel dims into `w`).
template <typename S>
struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<S> v;

    Tensor() = default;
    Tensor(int c_, int h_, int w_, S fill = S(0))
        : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, fill) {}

    static Tensor scalar(S x) {
        Tensor t(1, 1, 1);
        t.v[0] = x;
        return t;
    }

    size_t numel() const { return v.size(); }
    size_t plane_size() const { return static_cast<size_t>(h) * w; }
    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }

    S& at(int ci, int y, int x) { return v[(static_cast<size_t>(ci) * h + y) * w + x]; }
    S at(int ci, int y, int x) const { return v[(static_cast<size_t>(ci) * h + y) * w + x]; }

    S* plane(int ci) { return v.data() + static_cast<size_t>(ci) * h * w; }
    const S* plane(int ci) const { return v.data() + static_cast<size_t>(ci) * h * w; }

    void fill(S x) { std::fill(v.begin(), v.end(), x); }

    std::string shape_str() const {
        return "[" + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + "]";
    }
};

template <typename S>
Tensor<S> zeros_like(const Tensor<S>& t) {
    return Tensor<S>(t.c, t.h, t.w);
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (!a.same_shape(b)) {
        throw InputError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
    }
}

// Norms and reductions accumulate in double regardless of S.
template <typename S>
double l2_norm(const Tensor<S>& t) {
    double acc = 0.0;
    for (S x : t.v) acc += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(acc);
}

template <typename S>
double sum_of_squares(const Tensor<S>& t) {
    double acc = 0.0;
    for (S x : t.v) acc += static_cast<double>(x) * static_cast<double>(x);
    return acc;
}

template <typename S>
bool all_finite(const Tensor<S>& t) {
    for (S x : t.v) {
        if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
}

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    Tensor<To> out(t.c, t.h, t.w);
    for (size_t i = 0; i < t.v.size(); ++i) out.v[i] = static_cast<To>(t.v[i]);
    return out;
}

}  // namespace usketch
