// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "spanattn/mask.hpp"
#include "spanattn/ops.hpp"
#include "spanattn/tape.hpp"
#include "spanattn/tensor.hpp"

namespace spanattn {

/// Projection weights of one attention layer. Inputs are row vectors, so
/// W_Q/W_K/W_V are [d x d_model] and W_o is [d_model x d].
template <typename T>
struct AttentionParams {
    Tensor<T> wq;
    Tensor<T> wk;
    Tensor<T> wv;
    Tensor<T> wo;
    std::size_t heads = 1;

    static AttentionParams random(std::size_t d, std::size_t d_model, std::size_t heads, Rng& rng);

    std::size_t d() const { return wq.rows(); }
    std::size_t d_model() const { return wq.cols(); }
    void validate() const;
};

struct AttentionOptions {
    std::size_t heads = 1;
    bool use_rope = true;
    double rope_base = 10000.0;
    double rope_position_scale = 1.0;

    RopeConfig rope_for(std::size_t d_model) const;
};

/// Tape handles for the four projections (possibly adapter-augmented).
template <typename T>
struct AttentionVars {
    Var<T> wq;
    Var<T> wk;
    Var<T> wv;
    Var<T> wo;
};

template <typename T>
AttentionVars<T> bind(Tape<T>& tape, AttentionParams<T>& p);

/// Q, K, V after projection and RoPE at absolute positions 0..L-1.
template <typename T>
struct Projection {
    Var<T> q;
    Var<T> k;
    Var<T> v;
};

template <typename T>
Projection<T> project_qkv(Var<T> x, const AttentionVars<T>& w, const AttentionOptions& opts);

/// Scaled dot-product attention over head slices of `q`, `k`, `v` under
/// `mask` ([rows(q) x rows(k)]). Returns the concatenated head outputs,
/// before the output projection. Scores are scaled by 1/sqrt(d_model/heads).
template <typename T>
Var<T> multi_head_attend(Var<T> q, Var<T> k, Var<T> v, const AdditiveMask& mask, std::size_t heads,
                         std::vector<bool>* fully_masked = nullptr);

AdditiveMask causal_mask(std::size_t len);
AdditiveMask full_mask(std::size_t len);
/// Query t sees keys max(0, t - window + 1) .. t.
AdditiveMask sliding_window_mask(std::size_t len, std::size_t window);
/// Causal attention restricted to consecutive `chunk`-token blocks (last one may be shorter).
AdditiveMask block_diagonal_mask(std::size_t len, std::size_t chunk);

template <typename T>
Var<T> full_attention(Var<T> x, const AttentionVars<T>& w, const AttentionOptions& opts, bool causal);
template <typename T>
Var<T> sliding_window_attention(Var<T> x, const AttentionVars<T>& w, const AttentionOptions& opts,
                                std::size_t window);
template <typename T>
Var<T> block_diagonal_attention(Var<T> x, const AttentionVars<T>& w, const AttentionOptions& opts,
                                std::size_t chunk);
/// Dense O(L^2) attention under an arbitrary mask. A query row with no
/// visible key is an InvariantError.
template <typename T>
Var<T> masked_oracle_attention(Var<T> x, const AttentionVars<T>& w, const AttentionOptions& opts,
                               const AdditiveMask& mask);

// Value-level conveniences that evaluate on a private tape.
template <typename T>
Tensor<T> full_attention(const Tensor<T>& x, AttentionParams<T>& p, const AttentionOptions& opts, bool causal);
template <typename T>
Tensor<T> sliding_window_attention(const Tensor<T>& x, AttentionParams<T>& p, const AttentionOptions& opts,
                                   std::size_t window);
template <typename T>
Tensor<T> block_diagonal_attention(const Tensor<T>& x, AttentionParams<T>& p, const AttentionOptions& opts,
                                   std::size_t chunk);
template <typename T>
Tensor<T> masked_oracle_attention(const Tensor<T>& x, AttentionParams<T>& p, const AttentionOptions& opts,
                                  const AdditiveMask& mask);

/// Per-head attention probabilities [L x L] under `mask`.
template <typename T>
std::vector<Tensor<T>> attention_weights(const Tensor<T>& x, AttentionParams<T>& p, const AttentionOptions& opts,
                                         const AdditiveMask& mask);

}  // namespace spanattn
