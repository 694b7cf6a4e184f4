// SPDX-License-Identifier: Apache-2.0
#include "spanattn/adaptation.hpp"

#include <algorithm>
#include <set>

#include "json.hpp"
#include "spanattn/checkpoint.hpp"
#include "spanattn/errors.hpp"

namespace spanattn {

namespace {

constexpr std::uint64_t kAdapterStream = 0x4c4f5241;

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

bool is_norm(std::string_view name) {
    return name == "final_norm" || ends_with(name, ".norm");
}

bool is_conv(std::string_view name, bool with_bias) {
    return ends_with(name, ".conv.weight") || (with_bias && ends_with(name, ".conv.bias"));
}

std::vector<std::string> default_targets(const ModelConfig& cfg) {
    std::vector<std::string> out;
    const auto plan = layer_plan(cfg);
    for (std::size_t i = 0; i < plan.size(); ++i) {
        if (plan[i] == LayerKind::Attention) {
            for (const char* w : {"wq", "wk", "wv", "wo"}) {
                out.push_back("layers." + std::to_string(i) + ".attn." + w);
            }
        }
    }
    return out;
}

bool base_trainable(std::string_view name, const AdapterPolicy& p) {
    switch (p.kind) {
        case PolicyKind::Full: return true;
        case PolicyKind::LoRA: return false;
        case PolicyKind::LoRAPlus: return name == "embed" || is_norm(name);
        case PolicyKind::HyLoRA: return name == "embed" || is_norm(name) || is_conv(name, p.train_conv_bias);
    }
    return false;
}

}  // namespace

std::string_view to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::LoRA: return "lora";
        case PolicyKind::LoRAPlus: return "lora+";
        case PolicyKind::HyLoRA: return "hylora";
        case PolicyKind::Full: return "full";
    }
    return "lora";
}

PolicyKind parse_policy(std::string_view name) {
    for (auto k : {PolicyKind::LoRA, PolicyKind::LoRAPlus, PolicyKind::HyLoRA, PolicyKind::Full}) {
        if (to_string(k) == name) {
            return k;
        }
    }
    throw ConfigError("unknown adaptation policy '" + std::string(name) + "' (expected lora, lora+, hylora, full)");
}

AdapterPolicy AdapterPolicy::with_rank(PolicyKind kind, std::size_t rank) {
    AdapterPolicy p;
    p.kind = kind;
    p.rank = rank;
    p.alpha = 2.0 * static_cast<double>(rank);
    return p;
}

template <typename T>
PolicyPartition apply_policy(HybridModel<T>& model, const AdapterPolicy& policy, std::uint64_t seed) {
    if (!model.adapters().empty()) {
        throw UsageError("apply_policy: adapters already attached");
    }
    PolicyPartition part;
    std::vector<std::string> targets;
    if (policy.kind != PolicyKind::Full) {
        if (policy.rank == 0) {
            throw ConfigError("adaptation.rank must be at least 1");
        }
        targets = policy.targets.empty() ? default_targets(model.config()) : policy.targets;
        // Validate everything before mutating the model.
        std::set<std::string> seen;
        for (const auto& t : targets) {
            Tensor<T>* w = model.find(t);
            if (w == nullptr || w->rank() != 2) {
                throw ConfigError("adaptation target '" + t + "' is not a weight matrix of this model");
            }
            if (!seen.insert(t).second) {
                throw ConfigError("adaptation target '" + t + "' listed twice");
            }
        }
    }
    for (auto& np : model.named_parameters()) {
        np.tensor->set_requires_grad(base_trainable(np.name, policy));
    }
    Rng rng(derive_seed(seed, {kAdapterStream}));
    for (const auto& t : targets) {
        Tensor<T>* w = model.find(t);
        auto ad = LoRAAdapter<T>::create(t, w->rows(), w->cols(), policy.rank, policy.alpha, rng);
        ad.a.set_requires_grad(true);
        ad.b.set_requires_grad(true);
        part.adapter_params += ad.num_params();
        model.adapters().emplace(t, std::move(ad));
        part.adapted.push_back(t);
    }
    model.policy_tag = std::string(to_string(policy.kind));
    for (auto& np : model.named_parameters()) {
        if (np.tensor->requires_grad()) {
            part.trainable.push_back(np.name);
            part.trainable_params += np.tensor->numel();
            if (is_conv(np.name, true)) {
                part.conv_params += np.tensor->numel();
            }
        } else {
            part.frozen.push_back(np.name);
            part.frozen_params += np.tensor->numel();
        }
    }
    return part;
}

template <typename T>
void merge_adapters(HybridModel<T>& model) {
    if (model.adapters().empty()) {
        throw UsageError(model.adapters_merged() ? "merge_adapters: adapters were already merged"
                                                 : "merge_adapters: no adapters attached");
    }
    for (auto& [name, ad] : model.adapters()) {
        Tensor<T>* w = model.find(name);
        auto delta = ad.delta();
        auto wd = w->data();
        auto dd = delta.data();
        for (std::size_t i = 0; i < wd.size(); ++i) {
            wd[i] += dd[i];
        }
    }
    model.adapters().clear();
    model.set_adapters_merged(true);
}

std::size_t expected_adapter_count(const ModelConfig& cfg, const AdapterPolicy& policy) {
    if (policy.kind == PolicyKind::Full) {
        return 0;
    }
    HybridModel<float> shape_only(cfg);
    std::size_t n = 0;
    for (const auto& t : policy.targets.empty() ? default_targets(cfg) : policy.targets) {
        Tensor<float>* w = shape_only.find(t);
        if (w == nullptr) {
            throw ConfigError("adaptation target '" + t + "' is not a weight of this model");
        }
        n += policy.rank * (w->rows() + w->cols());
    }
    return n;
}

std::size_t expected_trainable_count(const ModelConfig& cfg, const AdapterPolicy& policy) {
    const std::size_t d = cfg.d;
    const std::size_t e = cfg.ssm_width;
    const auto plan = layer_plan(cfg);
    const auto n_ssm = static_cast<std::size_t>(std::count(plan.begin(), plan.end(), LayerKind::SSM));
    if (policy.kind == PolicyKind::Full) {
        return expected_parameter_count(cfg);
    }
    std::size_t n = expected_adapter_count(cfg, policy);
    if (policy.kind == PolicyKind::LoRA) {
        return n;
    }
    // Embedding plus one gain of width d per layer and the final norm.
    n += cfg.vocab * d + d * (plan.size() + 1);
    if (policy.kind == PolicyKind::HyLoRA) {
        n += n_ssm * (cfg.conv_width * e + (policy.train_conv_bias ? e : 0));
    }
    return n;
}

template <typename T>
void save_adapters(const std::string& path, HybridModel<T>& model) {
    nlohmann::json meta;
    meta["kind"] = "adapters";
    meta["policy"] = model.policy_tag;
    meta["config"] = nlohmann::json::parse(model.config().to_json());
    meta["adapters"] = nlohmann::json::array();
    for (const auto& [name, ad] : model.adapters()) {
        meta["adapters"].push_back({{"target", name}, {"rank", ad.rank}, {"alpha", ad.alpha}});
    }
    std::vector<ContainerView<T>> items;
    for (auto& np : model.named_parameters()) {
        if (np.tensor->requires_grad()) {
            items.push_back({np.name, np.tensor});
        }
    }
    write_container<T>(path, meta.dump(), items);
}

template <typename T>
void load_adapters(const std::string& path, HybridModel<T>& model) {
    auto c = read_container(path);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(c.meta_json);
        if (meta.at("kind") != "adapters") {
            throw InputError(path + ": not an adapter checkpoint");
        }
        if (ModelConfig::from_json(meta.at("config").dump()) != model.config()) {
            throw InputError(path + ": adapters were trained for a different model configuration");
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ": bad metadata: " + e.what());
    }
    Rng unused(0);
    for (const auto& aj : meta.at("adapters")) {
        const std::string target = aj.at("target");
        Tensor<T>* w = model.find(target);
        if (w == nullptr) {
            throw InputError(path + ": adapter target " + target + " not in model");
        }
        model.adapters().insert_or_assign(
            target, LoRAAdapter<T>::create(target, w->rows(), w->cols(), aj.at("rank"), aj.at("alpha"), unused));
    }
    model.policy_tag = meta.value("policy", model.policy_tag);
    for (const auto& e : c.entries) {
        Tensor<T>* t = model.find(e.name);
        if (t == nullptr || t->shape() != e.shape) {
            throw InputError(path + ": tensor " + e.name + " does not fit the model");
        }
        auto data = t->data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            data[i] = static_cast<T>(e.values[i]);
        }
    }
}

#define SPANATTN_INSTANTIATE(T)                                                                     \
    template PolicyPartition apply_policy<T>(HybridModel<T>&, const AdapterPolicy&, std::uint64_t); \
    template void merge_adapters<T>(HybridModel<T>&);                                               \
    template void save_adapters<T>(const std::string&, HybridModel<T>&);                            \
    template void load_adapters<T>(const std::string&, HybridModel<T>&);

SPANATTN_INSTANTIATE(float)
SPANATTN_INSTANTIATE(double)
#undef SPANATTN_INSTANTIATE

}  // namespace spanattn
