#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "physemu/core.hpp"

namespace physemu {

// Dense row-major tensor. Plain value type: copies copy storage.
// Autograd lives in Var<T> (autograd.hpp); this is just data + shape.
template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        int64_t n = 1;
        for (int64_t d : shape_) {
            if (d < 0) raise<ShapeError>("Tensor: negative dimension ", d);
            n *= d;
        }
        v_.assign(static_cast<size_t>(n), T(0));
    }

    Tensor(std::vector<int64_t> shape, std::vector<T> values) : shape_(std::move(shape)), v_(std::move(values)) {
        int64_t n = 1;
        for (int64_t d : shape_) n *= d;
        if (n != numel()) raise<ShapeError>("Tensor: value count ", v_.size(), " does not match shape");
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int64_t> shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.v_.begin(), t.v_.end(), value);
        return t;
    }

    static Tensor scalar(T value) { return Tensor({}, {value}); }

    int64_t numel() const { return static_cast<int64_t>(v_.size()); }
    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<int64_t>& shape() const { return shape_; }

    int64_t size(int i) const {
        if (i < 0) i += rank();
        if (i < 0 || i >= rank()) raise<ShapeError>("Tensor::size: axis ", i, " out of range for rank ", rank());
        return shape_[static_cast<size_t>(i)];
    }

    T* data() { return v_.data(); }
    const T* data() const { return v_.data(); }
    std::vector<T>& vec() { return v_; }
    const std::vector<T>& vec() const { return v_; }

    T& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

    template <class... I>
    T& at(I... idx) {
        return v_[static_cast<size_t>(flat_index(idx...))];
    }
    template <class... I>
    const T& at(I... idx) const {
        return v_[static_cast<size_t>(flat_index(idx...))];
    }

    template <class... I>
    int64_t flat_index(I... idx) const {
        const int64_t ind[] = {static_cast<int64_t>(idx)...};
        const int n = sizeof...(idx);
        if (n != rank()) raise<ShapeError>("Tensor: indexed with ", n, " indices, rank is ", rank());
        int64_t flat = 0;
        for (int i = 0; i < n; ++i) flat = flat * shape_[static_cast<size_t>(i)] + ind[i];
        return flat;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<int64_t> shape) const {
        Tensor out(std::move(shape), v_);
        return out;
    }

    void fill(T value) { std::fill(v_.begin(), v_.end(), value); }

    void add_(const Tensor& o) {
        if (!same_shape(o)) raise<ShapeError>("Tensor::add_: shape mismatch ", shape_str(), " vs ", o.shape_str());
        for (size_t i = 0; i < v_.size(); ++i) v_[i] += o.v_[i];
    }

    void scale_(T c) {
        for (auto& x : v_) x *= c;
    }

    bool all_finite() const {
        for (const T& x : v_)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    T max_abs_diff(const Tensor& o) const {
        if (!same_shape(o)) raise<ShapeError>("max_abs_diff: shape mismatch");
        T m = T(0);
        for (size_t i = 0; i < v_.size(); ++i) m = std::max(m, static_cast<T>(std::abs(double(v_[i]) - double(o.v_[i]))));
        return m;
    }

    bool bit_identical(const Tensor& o) const {
        if (!same_shape(o)) return false;
        return std::memcmp(v_.data(), o.v_.data(), v_.size() * sizeof(T)) == 0;
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(v_[static_cast<size_t>(i)]);
        return out;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

private:
    std::vector<int64_t> shape_;
    std::vector<T> v_;
};

template <class T>
int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

} // namespace physemu
