// SPDX-License-Identifier: Apache-2.0
#include "spanattn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "spanattn/errors.hpp"

namespace spanattn {

std::size_t shape_numel(const Shape& shape) noexcept {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::span<const T> values) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != values.size()) {
        throw DimensionError("tensor of shape " + shape_str(shape_) + " given " + std::to_string(values.size()) +
                             " values");
    }
    data_.assign(values.begin(), values.end());
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::initializer_list<T> values)
    : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

template <typename T>
Tensor<T> Tensor<T>::identity(std::size_t n) {
    Tensor out({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        out(i, i) = T{1};
    }
    return out;
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng& rng, double stddev) {
    Tensor out(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : out.data_) {
        v = static_cast<T>(dist(rng));
    }
    return out;
}

template <typename T>
Tensor<T> Tensor<T>::uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor out(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : out.data_) {
        v = static_cast<T>(dist(rng));
    }
    return out;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[axis];
}

template <typename T>
std::size_t Tensor<T>::rows() const {
    if (shape_.size() != 2) {
        throw DimensionError("rows() on non-matrix " + shape_str(shape_));
    }
    return shape_[0];
}

template <typename T>
std::size_t Tensor<T>::cols() const {
    if (shape_.size() != 2) {
        throw DimensionError("cols() on non-matrix " + shape_str(shape_));
    }
    return shape_[1];
}

template <typename T>
T Tensor<T>::item() const {
    if (data_.size() != 1) {
        throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    }
    return data_[0];
}

template <typename T>
std::span<T> Tensor<T>::ensure_grad() {
    if (!has_grad_) {
        grad_.assign(data_.size(), T{0});
        has_grad_ = true;
    }
    return grad();
}

template <typename T>
void Tensor<T>::zero_grad() noexcept {
    std::fill(grad_.begin(), grad_.end(), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
        throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data());
}

template <typename T>
void Tensor<T>::fill(T v) noexcept {
    std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

template class Tensor<float>;
template class Tensor<double>;
template double max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace spanattn
