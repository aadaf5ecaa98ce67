// SPDX-License-Identifier: MIT
#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "voxelage/common.hpp"

namespace voxelage {

// Dense row-major tensor. The deep-learning code uses the NCDHW convention:
// {batch, channels, depth, height, width}, with width contiguous.
template <class T>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) { v.assign(numel(), T(0)); }
    Tensor(std::vector<int64_t> s, T fill) : shape(std::move(s)) { v.assign(numel(), fill); }

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

    int64_t dim(size_t i) const { return shape[i]; }
    size_t rank() const { return shape.size(); }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    void resize(const std::vector<int64_t>& s) {
        if (shape != s) {
            shape = s;
            v.assign(numel(), T(0));
        }
    }

    void zero() { std::fill(v.begin(), v.end(), T(0)); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << ")";
        return os.str();
    }
};

template <class T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw ValidationError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace voxelage
