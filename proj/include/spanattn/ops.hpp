// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "spanattn/mask.hpp"
#include "spanattn/tape.hpp"
#include "spanattn/tensor.hpp"

namespace spanattn {

inline constexpr std::size_t kDefaultMaxConvWidth = 16;
inline constexpr int kIgnoreTarget = -1;

struct RopeConfig {
    double base = 10000.0;
    // Width of each rotary group (a head); 0 means the full row.
    std::size_t group = 0;
    // Linear position interpolation: positions are multiplied by this factor.
    double position_scale = 1.0;
};

template <typename T>
struct SoftmaxResult {
    Tensor<T> probs;
    std::vector<bool> fully_masked;

    bool any_fully_masked() const;
};

// ---------------------------------------------------------------------------
// Value-level kernels (no tape).

namespace kernels {

/// C = op(A) * op(B) where op transposes when the flag is set; C is overwritten
/// when `accumulate` is false and added to otherwise.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a, bool trans_b,
          bool accumulate);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

/// Row-wise softmax over the last axis with an optional additive mask.
/// Fully-masked rows yield zeros and are flagged.
template <typename T>
SoftmaxResult<T> masked_softmax(const Tensor<T>& scores, const AdditiveMask* mask);

template <typename T>
Tensor<T> rope_embed(const Tensor<T>& x, std::span<const std::size_t> positions, const RopeConfig& cfg,
                     bool inverse = false);

template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                        std::size_t max_width = kDefaultMaxConvWidth);

}  // namespace kernels

// ---------------------------------------------------------------------------
// Differentiable primitives. All operands must live on the same tape.

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
/// a * b^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b);
template <typename T>
Var<T> transpose(Var<T> a);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T s);
/// a[m x n] + bias[n] broadcast over rows.
template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias);
/// a[m x n] * v[n] broadcast over rows.
template <typename T>
Var<T> mul_rowvec(Var<T> a, Var<T> v);

template <typename T>
Var<T> sum(Var<T> a);
template <typename T>
Var<T> mean(Var<T> a);

template <typename T>
Var<T> sigmoid(Var<T> a);
template <typename T>
Var<T> silu(Var<T> a);

/// y = x / sqrt(mean(x^2) + eps) * gain, per row.
template <typename T>
Var<T> rmsnorm(Var<T> x, Var<T> gain, T eps = T(1e-5));

template <typename T>
Var<T> masked_softmax(Var<T> scores, const AdditiveMask& mask, std::vector<bool>* fully_masked = nullptr);
template <typename T>
Var<T> softmax(Var<T> scores);

template <typename T>
Var<T> rope_embed(Var<T> x, std::span<const std::size_t> positions, const RopeConfig& cfg = {});

/// Depthwise causal convolution; out[t, c] = bias[c] + sum_s kernel[s, c] * x[t - s, c].
template <typename T>
Var<T> causal_conv1d(Var<T> x, Var<T> kernel, Var<T> bias, std::size_t max_width = kDefaultMaxConvWidth);

/// h_t = a * h_{t-1} + b * u_t with h_0 = 0, channel-wise.
template <typename T>
Var<T> linear_recurrence(Var<T> u, Var<T> a, Var<T> b);

template <typename T>
Var<T> embedding(Var<T> table, std::span<const int> tokens);

/// Mean next-token cross entropy over targets != kIgnoreTarget.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets);

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end);
template <typename T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> rows);
template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end);
template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts);

template <typename T>
void backward(Var<T> loss) {
    loss.tape()->backward(loss);
}

}  // namespace spanattn
