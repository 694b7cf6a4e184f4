// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "spanattn/memory_stats.hpp"
#include "spanattn/random.hpp"

namespace spanattn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_str(const Shape& shape);

template <typename T>
using Buffer = std::vector<T, TrackingAllocator<T>>;

/// Dense row-major array. `T` is float (runtime) or double (oracle/gradient
/// checks). The optional grad buffer, when present, matches the data shape.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{0});
    Tensor(Shape shape, std::span<const T> values);
    Tensor(Shape shape, std::initializer_list<T> values);

    static Tensor scalar(T v) { return Tensor(Shape{}, v); }
    static Tensor identity(std::size_t n);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t numel() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const;
    // 2-D helpers; both throw DimensionError on other ranks.
    std::size_t rows() const;
    std::size_t cols() const;
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return {data_.data(), data_.size()}; }
    std::span<const T> data() const noexcept { return {data_.data(), data_.size()}; }
    T* raw() noexcept { return data_.data(); }
    const T* raw() const noexcept { return data_.data(); }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }
    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * shape_.back() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_.back() + c]; }
    T item() const;

    std::span<T> row(std::size_t r) noexcept {
        const std::size_t n = shape_.back();
        return {data_.data() + r * n, n};
    }
    std::span<const T> row(std::size_t r) const noexcept {
        const std::size_t n = shape_.back();
        return {data_.data() + r * n, n};
    }

    bool requires_grad() const noexcept { return requires_grad_; }
    void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

    bool has_grad() const noexcept { return has_grad_; }
    std::span<T> grad() noexcept { return {grad_.data(), grad_.size()}; }
    std::span<const T> grad() const noexcept { return {grad_.data(), grad_.size()}; }
    /// Allocates a zero grad buffer if absent and returns it.
    std::span<T> ensure_grad();
    void zero_grad() noexcept;
    void clear_grad() noexcept {
        Buffer<T>{}.swap(grad_);
        has_grad_ = false;
    }

    Tensor reshaped(Shape shape) const;
    void fill(T v) noexcept;
    bool all_finite() const noexcept;

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) {
            out[i] = static_cast<U>(data_[i]);
        }
        return out;
    }

private:
    Shape shape_;
    Buffer<T> data_;
    Buffer<T> grad_;
    bool requires_grad_ = false;
    bool has_grad_ = false;
};

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace spanattn
