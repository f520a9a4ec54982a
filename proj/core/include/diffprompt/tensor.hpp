#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "diffprompt/errors.hpp"
#include "diffprompt/rng.hpp"

namespace dp {

// Dense row-major tensor. Shape is a small vector of extents; data is a flat
// buffer. All model code treats tensors as 2-D (rows x cols) where possible
// and carries spatial metadata separately, but the shape vector allows 3-D/4-D
// bookkeeping for conv inputs.
template <typename T>
struct TensorT {
    std::vector<int64_t> shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(std::vector<int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), T(0));
    }
    TensorT(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape))
            throw ShapeError("tensor data size does not match shape");
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t e : s) {
            if (e < 0) throw ShapeError("negative extent");
            n *= e;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    int64_t cols() const {
        if (shape.size() < 2) return shape.size() == 1 ? 1 : 0;
        int64_t c = 1;
        for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
        return c;
    }

    T& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& at(int64_t i) const { return data[static_cast<size_t>(i)]; }
    T& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    const T& at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    void fill_normal(Rng& rng, T stddev = T(1), T mean = T(0)) {
        for (auto& x : data) x = mean + stddev * static_cast<T>(rng.normal());
    }
    void fill_uniform(Rng& rng, T lo, T hi) {
        for (auto& x : data) x = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Tensor = TensorT<float>;

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace dp
