// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <deque>
#include <memory>
#include <span>
#include <vector>

#include "spanattn/tensor.hpp"

namespace spanattn {

template <typename T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; invalid once the tape is consumed.
template <typename T>
class Var {
public:
    Var() = default;

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    Tape<T>* tape() const noexcept { return tape_; }
    std::uint32_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }
    bool needs_grad() const;

private:
    friend class Tape<T>;
    Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

    Tape<T>* tape_ = nullptr;
    std::uint32_t id_ = 0;
};

/// Ordered record of primitive applications. Node ids are assigned in
/// creation order, which is a topological order of the graph; backward
/// walks the ids in reverse and visits every node at most once.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Constant input; never receives a gradient.
    Var<T> constant(Tensor<T> value);
    /// Leaf that aliases an external tensor. Gradients accumulate into
    /// `param.grad()` when `param.requires_grad()`. Repeated calls with the
    /// same tensor return the same node.
    Var<T> param(Tensor<T>& param);
    /// Records the result of a primitive. `backward` is dropped when no
    /// parent needs a gradient.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn backward);
    Var<T> record(Tensor<T> value, std::span<const Var<T>> parents, BackwardFn backward);

    const Tensor<T>& value(std::uint32_t id) const;
    bool needs_grad(std::uint32_t id) const;
    /// Gradient of the node's output, as seen from inside a backward function.
    std::span<const T> grad(std::uint32_t id) const;
    /// Mutable gradient accumulator for a parent; allocated on first use.
    /// Returns an empty span when the parent does not need a gradient.
    std::span<T> grad_sink(std::uint32_t id);

    /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. The loss
    /// must be a single-element tensor. Consumes the tape.
    void backward(Var<T> loss);

    std::size_t size() const noexcept { return nodes_.size(); }
    bool consumed() const noexcept { return consumed_; }
    /// Number of backward functions executed by the last backward() call.
    std::size_t backward_visits() const noexcept { return backward_visits_; }

    /// Disables finite-value checks on recorded outputs (used by fault tests).
    void set_check_finite(bool on) noexcept { check_finite_ = on; }
    /// When disabled, parameters bound afterwards are treated as constants
    /// and no backward closures are kept (inference).
    void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T>* external = nullptr;
        Buffer<T> grad;
        bool needs_grad = false;
        BackwardFn backward;
    };

    void require_live() const;

    std::deque<Node> nodes_;
    std::vector<std::pair<const Tensor<T>*, std::uint32_t>> params_;
    bool consumed_ = false;
    bool check_finite_ = true;
    bool grad_enabled_ = true;
    std::size_t backward_visits_ = 0;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape_->value(id_);
}

template <typename T>
bool Var<T>::needs_grad() const {
    return tape_->needs_grad(id_);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace spanattn
