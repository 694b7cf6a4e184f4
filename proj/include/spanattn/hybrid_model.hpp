// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "spanattn/attention.hpp"
#include "spanattn/lora.hpp"
#include "spanattn/se_attn.hpp"
#include "spanattn/tape.hpp"
#include "spanattn/tensor.hpp"

namespace spanattn {

struct ModelConfig {
    std::size_t vocab = 260;
    std::size_t d = 64;
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t layers = 4;
    /// SSM layers per attention layer; 3 gives the 3:1 blend.
    std::size_t ssm_per_attn = 3;
    /// Channel count e of the SSM value/gate streams.
    std::size_t ssm_width = 64;
    std::size_t conv_width = 4;
    bool tied_head = false;
    double rope_base = 10000.0;
    /// Linear position interpolation factor (1 = none).
    double rope_position_scale = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(std::string_view text);
    bool operator==(const ModelConfig&) const = default;
};

enum class LayerKind { SSM, Attention };

/// Layer i is attention when (i + 1) is a multiple of ssm_per_attn + 1.
/// If that yields no attention layer, the last layer becomes one.
std::vector<LayerKind> layer_plan(const ModelConfig& cfg);

template <typename T>
struct SSMLayer {
    Tensor<T> norm;       // [d]
    Tensor<T> in_proj;    // [d x 2e]: value stream then gate stream
    Tensor<T> conv_weight;  // [w x e], row s multiplies x[t - s]
    Tensor<T> conv_bias;  // [e]
    Tensor<T> decay;      // [e], a = sigmoid(decay)
    Tensor<T> gain;       // [e]
    Tensor<T> out_proj;   // [e x d]
};

template <typename T>
struct AttentionLayer {
    Tensor<T> norm;  // [d]
    AttentionParams<T> attn;
};

template <typename T>
struct Layer {
    LayerKind kind = LayerKind::SSM;
    SSMLayer<T> ssm;
    AttentionLayer<T> attn;
};

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T>* tensor = nullptr;
};

enum class AttentionVariant { Full, SlidingWindow, SE, SENoMem, SERandom, SELandmark, S2 };

std::string_view to_string(AttentionVariant v);
/// Accepts: full, sw, se, se_nomem, se_random, se_landmark, s2.
AttentionVariant parse_attention_variant(std::string_view name);
bool is_se_variant(AttentionVariant v);

/// How attention layers are evaluated for one forward call.
struct AttentionRuntime {
    AttentionVariant variant = AttentionVariant::Full;
    SEAttnConfig se;
    std::size_t window = 64;
    /// Advances the chunk-size stream of SE variants.
    std::uint64_t step = 0;
    /// If set, receives one trace per SE attention layer in order.
    std::vector<RetrievalTrace>* traces = nullptr;
    /// If set, receives the variant name used by every attention layer.
    std::vector<std::string>* dispatch = nullptr;
};

template <typename T>
class HybridModel {
public:
    HybridModel() = default;
    explicit HybridModel(const ModelConfig& cfg);
    HybridModel(const HybridModel&) = delete;
    HybridModel& operator=(const HybridModel&) = delete;
    HybridModel(HybridModel&&) = default;
    HybridModel& operator=(HybridModel&&) = default;

    const ModelConfig& config() const { return cfg_; }
    std::vector<Layer<T>>& layers() { return layers_; }
    const std::vector<Layer<T>>& layers() const { return layers_; }
    Tensor<T>& embed() { return embed_; }
    Tensor<T>& final_norm() { return final_norm_; }
    Tensor<T>& head() { return head_; }
    std::size_t num_attention_layers() const;

    /// Base parameters followed by adapter matrices, in a stable order.
    std::vector<NamedParam<T>> named_parameters();
    /// Tensor for `name`, or nullptr.
    Tensor<T>* find(std::string_view name);
    std::size_t num_parameters();

    std::map<std::string, LoRAAdapter<T>>& adapters() { return adapters_; }
    const std::map<std::string, LoRAAdapter<T>>& adapters() const { return adapters_; }
    bool adapters_merged() const { return merged_; }
    void set_adapters_merged(bool m) { merged_ = m; }
    /// Free-form tag recorded in checkpoints (e.g. the adaptation policy).
    std::string policy_tag;

    /// Weight `w` named `name` on the tape, with its adapter applied if one
    /// is attached and not merged.
    Var<T> weight(Tape<T>& tape, const std::string& name, Tensor<T>& w);

private:
    ModelConfig cfg_;
    Tensor<T> embed_;
    std::vector<Layer<T>> layers_;
    Tensor<T> final_norm_;
    Tensor<T> head_;
    std::map<std::string, LoRAAdapter<T>> adapters_;
    bool merged_ = false;
};

/// Closed-form base parameter count (adapters excluded).
std::size_t expected_parameter_count(const ModelConfig& cfg);

/// x + out_proj(sigmoid(z) * scan(conv(u))) with [u | z] = in_proj(norm(x)).
template <typename T>
Var<T> ssm_forward(Tape<T>& tape, Var<T> x, SSMLayer<T>& layer, HybridModel<T>* model = nullptr,
                   const std::string& prefix = {});

/// Next-token logits [L x vocab] recorded on `tape`.
template <typename T>
Var<T> model_forward(Tape<T>& tape, HybridModel<T>& model, std::span<const int> tokens,
                     const AttentionRuntime& rt);

/// Inference-only logits; parameters are read, never marked for gradients.
template <typename T>
Tensor<T> model_logits(HybridModel<T>& model, std::span<const int> tokens, const AttentionRuntime& rt);

struct AdamWConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    /// Global gradient-norm clip; 0 disables.
    double clip_norm = 1.0;
    std::size_t warmup_steps = 0;

    /// Linear warmup to `lr`, then constant.
    double lr_at(std::size_t step) const;
};

template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    /// Updates every tensor with requires_grad() using its grad(), then
    /// clears the gradients. Tensors without gradients are left untouched.
    void step(std::span<Tensor<T>* const> params, double lr);
    const AdamWConfig& config() const { return cfg_; }
    std::size_t steps_taken() const { return t_; }
    /// Global L2 norm of the last gradient before clipping.
    double last_grad_norm() const { return last_norm_; }

private:
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };
    AdamWConfig cfg_;
    std::unordered_map<const Tensor<T>*, Moments> state_;
    std::size_t t_ = 0;
    double last_norm_ = 0.0;
};

struct TrainExample {
    std::vector<int> tokens;
    /// Same length as tokens; kIgnoreTarget marks positions without loss.
    std::vector<int> targets;
};

/// Standard next-token targets: targets[t] = tokens[t + 1], last ignored.
TrainExample next_token_example(std::vector<int> tokens);

/// One optimizer step on the mean loss over `batch`. Returns that loss.
template <typename T>
double train_step(HybridModel<T>& model, std::span<const TrainExample> batch, AdamW<T>& opt,
                  const AttentionRuntime& rt, double lr);

/// Trainable tensors (requires_grad) of the model, in registry order.
template <typename T>
std::vector<Tensor<T>*> trainable_parameters(HybridModel<T>& model);

template <typename T>
void save_checkpoint(const std::string& path, HybridModel<T>& model);
template <typename T>
HybridModel<T> load_checkpoint(const std::string& path);

/// FNV-1a over the raw bytes of the given tensors.
template <typename T>
std::uint64_t parameter_checksum(std::span<Tensor<T>* const> tensors);

extern template class HybridModel<float>;
extern template class HybridModel<double>;

}  // namespace spanattn
