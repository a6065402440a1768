#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "edalane/rng.hpp"

namespace edalane {

struct Shape4 {
    int n = 0, c = 0, h = 0, w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape4&) const = default;

    std::string to_string() const {
        std::ostringstream os;
        os << n << "x" << c << "x" << h << "x" << w;
        return os.str();
    }
};

// Dense rank-4 tensor in batch-channel-height-width order, width fastest.
// The scalar type is float on the production path; the verification path
// instantiates the same code with double.
template <typename S>
struct TensorT {
    Shape4 shape;
    std::vector<S> data;
    std::vector<S> grad; // empty unless gradients are tracked

    TensorT() = default;
    explicit TensorT(Shape4 s) : shape(s), data(static_cast<std::size_t>(s.numel()), S(0)) {
        if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
            throw std::invalid_argument("tensor shape must be non-negative: " + s.to_string());
        }
    }
    TensorT(int n, int c, int h, int w) : TensorT(Shape4{n, c, h, w}) {}

    std::int64_t numel() const { return shape.numel(); }

    std::int64_t index(int n, int c, int h, int w) const {
        return ((static_cast<std::int64_t>(n) * shape.c + c) * shape.h + h) * shape.w + w;
    }
    S& at(int n, int c, int h, int w) { return data[static_cast<std::size_t>(index(n, c, h, w))]; }
    const S& at(int n, int c, int h, int w) const {
        return data[static_cast<std::size_t>(index(n, c, h, w))];
    }

    bool has_grad() const { return !grad.empty(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), S(0));
    }

    void fill(S v) { std::fill(data.begin(), data.end(), v); }

    void fill_normal(Rng& rng, double stddev) {
        for (auto& v : data) v = static_cast<S>(rng.normal() * stddev);
    }
    void fill_uniform(Rng& rng, double lo, double hi) {
        for (auto& v : data) v = static_cast<S>(lo + rng.uniform() * (hi - lo));
    }

    bool all_finite() const {
        for (S v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    template <typename T>
    TensorT<T> cast() const {
        TensorT<T> out(shape);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>; // 64-bit verification builds

enum class Mode { Train, Infer };

} // namespace edalane
