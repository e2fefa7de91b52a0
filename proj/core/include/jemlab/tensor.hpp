#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "jemlab/errors.hpp"

namespace jemlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (const auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major n-dimensional array. T is float (training default) or
// double (oracle tests). Values are owned; copies are deep.
template <class T>
class Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor is float or double");

  public:
    Tensor() : shape_{}, data_(1, T{0}) {}  // scalar zero

    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T{0}) {
        check_extents(shape_);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents(shape_);
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), T{1}); }

    static Tensor scalar(T v) {
        Tensor t;
        t.data_[0] = v;
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const { return data_.size(); }
    bool is_scalar() const { return shape_.empty(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
        return data_[0];
    }

    // Multi-index access, mostly for tests and small hand computations.
    template <class... Ix>
    T& at(Ix... ix) {
        return data_[flat_index({static_cast<std::size_t>(ix)...})];
    }
    template <class... Ix>
    const T& at(Ix... ix) const {
        return data_[flat_index({static_cast<std::size_t>(ix)...})];
    }

    std::size_t flat_index(std::initializer_list<std::size_t> ix) const {
        if (ix.size() != shape_.size()) throw ShapeError("index rank mismatch");
        std::size_t flat = 0, axis = 0;
        for (const auto i : ix) {
            if (i >= shape_[axis]) throw ShapeError("index out of range");
            flat = flat * shape_[axis] + i;
            ++axis;
        }
        return flat;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(s) +
                             " changes element count");
        return Tensor(std::move(s), data_);
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  private:
    static void check_extents(const Shape& s) {
        for (const auto e : s)
            if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(s));
    }

    Shape shape_;
    std::vector<T> data_;
};

// ---- small elementwise helpers used outside the autodiff graph ----

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(where) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <class T>
void axpy_inplace(Tensor<T>& y, double a, const Tensor<T>& x) {
    check_same_shape(y, x, "axpy");
    auto yd = y.data();
    auto xd = x.data();
    for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += static_cast<T>(a) * xd[i];
}

template <class T>
void scale_inplace(Tensor<T>& t, double a) {
    for (auto& v : t.data()) v *= static_cast<T>(a);
}

template <class T>
void clamp_inplace(Tensor<T>& t, double lo, double hi) {
    for (auto& v : t.data()) v = std::clamp(v, static_cast<T>(lo), static_cast<T>(hi));
}

// Accumulates in double regardless of T; norm contracts are checked at 1e-9.
template <class T>
double sqnorm(const Tensor<T>& t) {
    double s = 0.0;
    for (const T v : t.data()) s += static_cast<double>(v) * static_cast<double>(v);
    return s;
}

template <class T>
double max_abs(const Tensor<T>& t) {
    double m = 0.0;
    for (const T v : t.data()) m = std::max(m, std::abs(static_cast<double>(v)));
    return m;
}

}  // namespace jemlab
