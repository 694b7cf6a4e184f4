// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>

#include "spanattn/ops.hpp"
#include "spanattn/random.hpp"
#include "spanattn/tape.hpp"
#include "spanattn/tensor.hpp"

namespace spanattn {

/// Low-rank update for a weight stored as [d_in x d_out] (inputs are row
/// vectors). With A [r x d_in] and B [d_out x r], the effective weight is
/// W + (alpha / r) * (B A)^T.
template <typename T>
struct LoRAAdapter {
    std::string target;
    std::size_t rank = 0;
    double alpha = 0.0;
    Tensor<T> a;
    Tensor<T> b;

    static LoRAAdapter create(std::string target, std::size_t d_in, std::size_t d_out, std::size_t rank,
                              double alpha, Rng& rng);

    T scaling() const { return static_cast<T>(alpha / static_cast<double>(rank)); }
    std::size_t num_params() const { return a.numel() + b.numel(); }
    /// (alpha / r) * (B A)^T with the shape of the target weight.
    Tensor<T> delta() const;
};

/// Effective weight on the tape; gradients reach W (if trainable), A and B.
template <typename T>
Var<T> adapted_weight(Tape<T>& tape, Tensor<T>& weight, LoRAAdapter<T>& adapter);

extern template struct LoRAAdapter<float>;
extern template struct LoRAAdapter<double>;

}  // namespace spanattn
