// SPDX-License-Identifier: Apache-2.0
#include "spanattn/tape.hpp"

#include <algorithm>

#include "spanattn/errors.hpp"

namespace spanattn {

template <typename T>
void Tape<T>::require_live() const {
    if (consumed_) {
        throw UsageError("tape already consumed by backward()");
    }
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    require_live();
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

template <typename T>
Var<T> Tape<T>::param(Tensor<T>& param) {
    require_live();
    for (const auto& [ptr, id] : params_) {
        if (ptr == &param) {
            return Var<T>(this, id);
        }
    }
    Node n;
    n.external = &param;
    n.needs_grad = grad_enabled_ && param.requires_grad();
    nodes_.push_back(std::move(n));
    const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
    params_.emplace_back(&param, id);
    return Var<T>(this, id);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn backward) {
    return record(std::move(value), std::span<const Var<T>>(parents.begin(), parents.size()), std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::span<const Var<T>> parents, BackwardFn backward) {
    require_live();
    if (check_finite_ && !value.all_finite()) {
        throw NumericError("non-finite value produced by primitive (shape " + shape_str(value.shape()) + ")");
    }
    Node n;
    n.value = std::move(value);
    for (const Var<T>& p : parents) {
        if (p.tape() != this) {
            throw UsageError("operand recorded on a different tape");
        }
        n.needs_grad = n.needs_grad || nodes_[p.id()].needs_grad;
    }
    if (n.needs_grad) {
        n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

template <typename T>
const Tensor<T>& Tape<T>::value(std::uint32_t id) const {
    require_live();
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
}

template <typename T>
bool Tape<T>::needs_grad(std::uint32_t id) const {
    return nodes_[id].needs_grad;
}

template <typename T>
std::span<const T> Tape<T>::grad(std::uint32_t id) const {
    const Node& n = nodes_[id];
    if (n.external) {
        return n.external->grad();
    }
    return {n.grad.data(), n.grad.size()};
}

template <typename T>
std::span<T> Tape<T>::grad_sink(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.needs_grad) {
        return {};
    }
    if (n.external) {
        return n.external->ensure_grad();
    }
    if (n.grad.empty()) {
        n.grad.assign(n.value.numel(), T{0});
    }
    return {n.grad.data(), n.grad.size()};
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
    require_live();
    if (loss.tape() != this) {
        throw UsageError("loss belongs to a different tape");
    }
    if (value(loss.id()).numel() != 1) {
        throw UsageError("backward() requires a scalar loss, got shape " + shape_str(value(loss.id()).shape()));
    }
    backward_visits_ = 0;
    if (nodes_[loss.id()].needs_grad) {
        // The loss is never a parameter leaf in practice, but handle it.
        auto seed = grad_sink(loss.id());
        seed[0] += T{1};
        for (std::int64_t i = loss.id(); i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.backward || n.grad.empty()) {
                continue;
            }
            n.backward(*this, static_cast<std::uint32_t>(i));
            ++backward_visits_;
            Buffer<T>{}.swap(n.grad);
        }
    }
    nodes_.clear();
    params_.clear();
    consumed_ = true;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace spanattn
