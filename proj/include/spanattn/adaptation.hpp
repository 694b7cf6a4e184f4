// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "spanattn/hybrid_model.hpp"

namespace spanattn {

/// LoRA: adapters on the attention projections only.
/// LoRA+: LoRA plus the token embedding and every normalization gain.
/// HyLoRA: LoRA+ plus the SSM causal-conv kernels and biases.
/// Full: every base tensor trainable, no adapters (from-scratch training).
enum class PolicyKind { LoRA, LoRAPlus, HyLoRA, Full };

std::string_view to_string(PolicyKind k);
/// Accepts lora, lora+, hylora, full.
PolicyKind parse_policy(std::string_view name);

struct AdapterPolicy {
    PolicyKind kind = PolicyKind::HyLoRA;
    std::size_t rank = 32;
    double alpha = 64.0;
    /// Weights that receive adapters. Empty selects every attention
    /// projection (wq, wk, wv, wo of each attention layer).
    std::vector<std::string> targets;
    /// HyLoRA only: also train the conv biases, not just the kernels.
    bool train_conv_bias = true;

    /// Policy with alpha = 2 * rank, the ratio used for rank sweeps.
    static AdapterPolicy with_rank(PolicyKind kind, std::size_t rank);
};

struct PolicyPartition {
    std::vector<std::string> trainable;  // base tensors and adapter matrices
    std::vector<std::string> frozen;
    std::vector<std::string> adapted;  // targets that received adapters
    std::size_t trainable_params = 0;
    std::size_t frozen_params = 0;
    std::size_t adapter_params = 0;
    std::size_t conv_params = 0;  // trainable conv kernel + bias scalars
};

/// Attaches adapters and sets requires_grad so exactly the policy's tensors
/// train. Unknown targets raise ConfigError; applying twice raises UsageError.
template <typename T>
PolicyPartition apply_policy(HybridModel<T>& model, const AdapterPolicy& policy, std::uint64_t seed);

/// Folds every adapter into its weight and detaches it. Raises UsageError
/// when no adapters are attached (including a second merge).
template <typename T>
void merge_adapters(HybridModel<T>& model);

/// Closed-form trainable-parameter count of `policy` on a fresh model.
std::size_t expected_trainable_count(const ModelConfig& cfg, const AdapterPolicy& policy);
/// Closed-form adapter-matrix parameter count.
std::size_t expected_adapter_count(const ModelConfig& cfg, const AdapterPolicy& policy);

/// Writes the adapter matrices together with every other tensor the policy
/// trains, so a base checkpoint plus this file restores the tuned model.
template <typename T>
void save_adapters(const std::string& path, HybridModel<T>& model);
/// Attaches (or overwrites) adapters and trained tensors from `path`.
template <typename T>
void load_adapters(const std::string& path, HybridModel<T>& model);

}  // namespace spanattn
