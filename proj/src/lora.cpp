// SPDX-License-Identifier: Apache-2.0
#include "spanattn/lora.hpp"

#include <cmath>

#include "spanattn/errors.hpp"

namespace spanattn {

template <typename T>
LoRAAdapter<T> LoRAAdapter<T>::create(std::string target, std::size_t d_in, std::size_t d_out, std::size_t rank,
                                      double alpha, Rng& rng) {
    if (rank == 0) {
        throw ConfigError("LoRA rank must be at least 1 (target " + target + ")");
    }
    LoRAAdapter ad;
    ad.target = std::move(target);
    ad.rank = rank;
    ad.alpha = alpha;
    ad.a = Tensor<T>::randn({rank, d_in}, rng, 1.0 / std::sqrt(static_cast<double>(rank)));
    ad.b = Tensor<T>({d_out, rank}, T{0});
    return ad;
}

template <typename T>
Tensor<T> LoRAAdapter<T>::delta() const {
    // (B A)^T = A^T B^T, computed as [d_in x d_out] directly.
    const std::size_t d_in = a.cols();
    const std::size_t d_out = b.rows();
    Tensor<T> out({d_in, d_out});
    kernels::gemm(a.raw(), b.raw(), out.raw(), d_in, rank, d_out, true, true, false);
    const T s = scaling();
    for (auto& e : out.data()) {
        e *= s;
    }
    return out;
}

template <typename T>
Var<T> adapted_weight(Tape<T>& tape, Tensor<T>& weight, LoRAAdapter<T>& adapter) {
    if (adapter.a.cols() != weight.rows() || adapter.b.rows() != weight.cols()) {
        throw DimensionError("LoRA adapter for " + adapter.target + " does not match weight " +
                             shape_str(weight.shape()));
    }
    auto ba = matmul(tape.param(adapter.b), tape.param(adapter.a));
    return add(tape.param(weight), scale(transpose(ba), adapter.scaling()));
}

template struct LoRAAdapter<float>;
template struct LoRAAdapter<double>;
template Var<float> adapted_weight<float>(Tape<float>&, Tensor<float>&, LoRAAdapter<float>&);
template Var<double> adapted_weight<double>(Tape<double>&, Tensor<double>&, LoRAAdapter<double>&);

}  // namespace spanattn
