// SPDX-License-Identifier: Apache-2.0
#include "spanattn/hybrid_model.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "spanattn/checkpoint.hpp"
#include "spanattn/errors.hpp"

namespace spanattn {

namespace {

constexpr std::uint64_t kInitStream = 0x494e4954;

}  // namespace

void ModelConfig::validate() const {
    if (vocab < 2) {
        throw ConfigError("model.vocab must be at least 2");
    }
    if (d == 0 || d_model == 0 || ssm_width == 0 || layers == 0) {
        throw ConfigError("model dimensions and layer count must be positive");
    }
    if (heads == 0 || d_model % heads != 0) {
        throw ConfigError("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.heads (" +
                          std::to_string(heads) + ")");
    }
    if ((d_model / heads) % 2 != 0) {
        throw ConfigError("model.d_model / model.heads must be even for rotary embeddings");
    }
    if (conv_width == 0 || conv_width > kDefaultMaxConvWidth) {
        throw ConfigError("model.conv_width must be in [1, " + std::to_string(kDefaultMaxConvWidth) + "]");
    }
    if (!(rope_position_scale > 0.0) || !(rope_base > 1.0)) {
        throw ConfigError("rotary base must exceed 1 and position scale must be positive");
    }
}

std::string ModelConfig::to_json() const {
    nlohmann::json j{{"vocab", vocab},
                     {"d", d},
                     {"d_model", d_model},
                     {"heads", heads},
                     {"layers", layers},
                     {"ssm_per_attn", ssm_per_attn},
                     {"ssm_width", ssm_width},
                     {"conv_width", conv_width},
                     {"tied_head", tied_head},
                     {"rope_base", rope_base},
                     {"rope_position_scale", rope_position_scale},
                     {"seed", seed}};
    return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
    ModelConfig c;
    try {
        auto j = nlohmann::json::parse(text);
        c.vocab = j.at("vocab");
        c.d = j.at("d");
        c.d_model = j.at("d_model");
        c.heads = j.at("heads");
        c.layers = j.at("layers");
        c.ssm_per_attn = j.at("ssm_per_attn");
        c.ssm_width = j.at("ssm_width");
        c.conv_width = j.at("conv_width");
        c.tied_head = j.at("tied_head");
        c.rope_base = j.at("rope_base");
        c.rope_position_scale = j.at("rope_position_scale");
        c.seed = j.at("seed");
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("model config JSON: ") + e.what());
    }
    c.validate();
    return c;
}

std::vector<LayerKind> layer_plan(const ModelConfig& cfg) {
    std::vector<LayerKind> plan(cfg.layers, LayerKind::SSM);
    bool any = false;
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        if ((i + 1) % (cfg.ssm_per_attn + 1) == 0) {
            plan[i] = LayerKind::Attention;
            any = true;
        }
    }
    if (!any && !plan.empty()) {
        plan.back() = LayerKind::Attention;
    }
    return plan;
}

std::string_view to_string(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::Full: return "full";
        case AttentionVariant::SlidingWindow: return "sw";
        case AttentionVariant::SE: return "se";
        case AttentionVariant::SENoMem: return "se_nomem";
        case AttentionVariant::SERandom: return "se_random";
        case AttentionVariant::SELandmark: return "se_landmark";
        case AttentionVariant::S2: return "s2";
    }
    return "full";
}

AttentionVariant parse_attention_variant(std::string_view name) {
    for (auto v : {AttentionVariant::Full, AttentionVariant::SlidingWindow, AttentionVariant::SE,
                   AttentionVariant::SENoMem, AttentionVariant::SERandom, AttentionVariant::SELandmark,
                   AttentionVariant::S2}) {
        if (to_string(v) == name) {
            return v;
        }
    }
    throw ConfigError("unknown attention variant '" + std::string(name) +
                      "' (expected full, sw, se, se_nomem, se_random, se_landmark)");
}

bool is_se_variant(AttentionVariant v) {
    return v == AttentionVariant::SE || v == AttentionVariant::SENoMem || v == AttentionVariant::SERandom ||
           v == AttentionVariant::SELandmark;
}

std::size_t expected_parameter_count(const ModelConfig& cfg) {
    const std::size_t d = cfg.d;
    const std::size_t e = cfg.ssm_width;
    const std::size_t ssm = d + d * 2 * e + cfg.conv_width * e + 3 * e + e * d;
    const std::size_t attn = d + 3 * d * cfg.d_model + cfg.d_model * d;
    std::size_t n = cfg.vocab * d + d + (cfg.tied_head ? 0 : d * cfg.vocab);
    for (auto kind : layer_plan(cfg)) {
        n += kind == LayerKind::SSM ? ssm : attn;
    }
    return n;
}

template <typename T>
HybridModel<T>::HybridModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(cfg_.seed, {kInitStream}));
    const std::size_t d = cfg_.d;
    const std::size_t e = cfg_.ssm_width;
    const double inv_d = 1.0 / std::sqrt(static_cast<double>(d));
    embed_ = Tensor<T>::randn({cfg_.vocab, d}, rng, 1.0);
    for (auto kind : layer_plan(cfg_)) {
        Layer<T> layer;
        layer.kind = kind;
        if (kind == LayerKind::SSM) {
            auto& s = layer.ssm;
            s.norm = Tensor<T>({d}, T{1});
            s.in_proj = Tensor<T>::randn({d, 2 * e}, rng, inv_d);
            s.conv_weight = Tensor<T>::randn({cfg_.conv_width, e}, rng, 0.5 / std::sqrt(double(cfg_.conv_width)));
            for (std::size_t c = 0; c < e; ++c) {
                s.conv_weight(0, c) += T{1};
            }
            s.conv_bias = Tensor<T>({e}, T{0});
            // Decays spread over (0.5, 0.99); gains 1 - a keep the state an EMA.
            auto a = Tensor<T>::uniform({e}, rng, 0.5, 0.99);
            s.decay = Tensor<T>({e});
            s.gain = Tensor<T>({e});
            for (std::size_t c = 0; c < e; ++c) {
                s.decay[c] = static_cast<T>(std::log(a[c] / (T{1} - a[c])));
                s.gain[c] = T{1} - a[c];
            }
            s.out_proj = Tensor<T>::randn({e, d}, rng, 1.0 / std::sqrt(static_cast<double>(e)));
        } else {
            layer.attn.norm = Tensor<T>({d}, T{1});
            layer.attn.attn = AttentionParams<T>::random(d, cfg_.d_model, cfg_.heads, rng);
        }
        layers_.push_back(std::move(layer));
    }
    final_norm_ = Tensor<T>({d}, T{1});
    if (!cfg_.tied_head) {
        head_ = Tensor<T>::randn({d, cfg_.vocab}, rng, inv_d);
    }
    for (auto& np : named_parameters()) {
        np.tensor->set_requires_grad(true);
    }
}

template <typename T>
std::size_t HybridModel<T>::num_attention_layers() const {
    return static_cast<std::size_t>(std::count_if(layers_.begin(), layers_.end(),
                                                  [](const Layer<T>& l) { return l.kind == LayerKind::Attention; }));
}

template <typename T>
std::vector<NamedParam<T>> HybridModel<T>::named_parameters() {
    std::vector<NamedParam<T>> out;
    out.push_back({"embed", &embed_});
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        auto& l = layers_[i];
        if (l.kind == LayerKind::SSM) {
            out.push_back({p + "ssm.norm", &l.ssm.norm});
            out.push_back({p + "ssm.in_proj", &l.ssm.in_proj});
            out.push_back({p + "ssm.conv.weight", &l.ssm.conv_weight});
            out.push_back({p + "ssm.conv.bias", &l.ssm.conv_bias});
            out.push_back({p + "ssm.decay", &l.ssm.decay});
            out.push_back({p + "ssm.gain", &l.ssm.gain});
            out.push_back({p + "ssm.out_proj", &l.ssm.out_proj});
        } else {
            out.push_back({p + "attn.norm", &l.attn.norm});
            out.push_back({p + "attn.wq", &l.attn.attn.wq});
            out.push_back({p + "attn.wk", &l.attn.attn.wk});
            out.push_back({p + "attn.wv", &l.attn.attn.wv});
            out.push_back({p + "attn.wo", &l.attn.attn.wo});
        }
    }
    out.push_back({"final_norm", &final_norm_});
    if (!cfg_.tied_head) {
        out.push_back({"head", &head_});
    }
    for (auto& [name, ad] : adapters_) {
        out.push_back({name + ".lora_a", &ad.a});
        out.push_back({name + ".lora_b", &ad.b});
    }
    return out;
}

template <typename T>
Tensor<T>* HybridModel<T>::find(std::string_view name) {
    for (auto& np : named_parameters()) {
        if (np.name == name) {
            return np.tensor;
        }
    }
    return nullptr;
}

template <typename T>
std::size_t HybridModel<T>::num_parameters() {
    std::size_t n = 0;
    for (auto& np : named_parameters()) {
        n += np.tensor->numel();
    }
    return n;
}

template <typename T>
Var<T> HybridModel<T>::weight(Tape<T>& tape, const std::string& name, Tensor<T>& w) {
    if (!merged_) {
        auto it = adapters_.find(name);
        if (it != adapters_.end()) {
            return adapted_weight(tape, w, it->second);
        }
    }
    return tape.param(w);
}

template <typename T>
Var<T> ssm_forward(Tape<T>& tape, Var<T> x, SSMLayer<T>& layer, HybridModel<T>* model, const std::string& prefix) {
    auto w = [&](const char* name, Tensor<T>& t) {
        return model != nullptr ? model->weight(tape, prefix + name, t) : tape.param(t);
    };
    const std::size_t e = layer.decay.numel();
    auto h = rmsnorm(x, w("norm", layer.norm));
    auto uz = matmul(h, w("in_proj", layer.in_proj));
    auto u = causal_conv1d(slice_cols(uz, 0, e), w("conv.weight", layer.conv_weight),
                           w("conv.bias", layer.conv_bias));
    auto state = linear_recurrence(u, sigmoid(w("decay", layer.decay)), w("gain", layer.gain));
    auto gated = mul(state, sigmoid(slice_cols(uz, e, 2 * e)));
    return add(x, matmul(gated, w("out_proj", layer.out_proj)));
}

template <typename T>
Var<T> model_forward(Tape<T>& tape, HybridModel<T>& model, std::span<const int> tokens, const AttentionRuntime& rt) {
    if (tokens.empty()) {
        throw InputError("model_forward: empty token sequence");
    }
    const auto& cfg = model.config();
    AttentionOptions opts;
    opts.heads = cfg.heads;
    opts.rope_base = cfg.rope_base;
    opts.rope_position_scale = cfg.rope_position_scale;

    auto table = model.weight(tape, "embed", model.embed());
    auto x = embedding(table, tokens);
    std::uint64_t attn_index = 0;
    for (std::size_t i = 0; i < model.layers().size(); ++i) {
        auto& layer = model.layers()[i];
        const std::string prefix = "layers." + std::to_string(i) + ".";
        if (layer.kind == LayerKind::SSM) {
            x = ssm_forward(tape, x, layer.ssm, &model, prefix + "ssm.");
            continue;
        }
        auto& ap = layer.attn.attn;
        auto h = rmsnorm(x, model.weight(tape, prefix + "attn.norm", layer.attn.norm));
        AttentionVars<T> w{model.weight(tape, prefix + "attn.wq", ap.wq), model.weight(tape, prefix + "attn.wk", ap.wk),
                           model.weight(tape, prefix + "attn.wv", ap.wv),
                           model.weight(tape, prefix + "attn.wo", ap.wo)};
        Var<T> y;
        switch (rt.variant) {
            case AttentionVariant::Full:
                y = full_attention(h, w, opts, true);
                break;
            case AttentionVariant::SlidingWindow:
                y = sliding_window_attention(h, w, opts, rt.window);
                break;
            case AttentionVariant::S2:
                throw ConfigError("S2-Attn is not available in this build");
            default: {
                SEAttnConfig se = rt.se;
                se.variant = rt.variant == AttentionVariant::SENoMem    ? SEVariant::NoMem
                             : rt.variant == AttentionVariant::SERandom ? SEVariant::Random
                             : rt.variant == AttentionVariant::SELandmark ? SEVariant::Landmark
                                                                          : SEVariant::Standard;
                SECallContext ctx;
                ctx.layer = attn_index;
                ctx.step = rt.step;
                auto r = se_attn_forward(h, w, opts, se, ctx);
                y = r.out;
                if (rt.traces != nullptr) {
                    rt.traces->push_back(std::move(r.trace));
                }
            }
        }
        if (rt.dispatch != nullptr) {
            rt.dispatch->emplace_back(to_string(rt.variant));
        }
        x = add(x, y);
        ++attn_index;
    }
    x = rmsnorm(x, model.weight(tape, "final_norm", model.final_norm()));
    if (cfg.tied_head) {
        return matmul_nt(x, table);
    }
    return matmul(x, model.weight(tape, "head", model.head()));
}

template <typename T>
Tensor<T> model_logits(HybridModel<T>& model, std::span<const int> tokens, const AttentionRuntime& rt) {
    Tape<T> tape;
    tape.set_grad_enabled(false);
    return model_forward(tape, model, tokens, rt).value();
}

double AdamWConfig::lr_at(std::size_t step) const {
    if (warmup_steps == 0 || step >= warmup_steps) {
        return lr;
    }
    return lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
}

template <typename T>
void AdamW<T>::step(std::span<Tensor<T>* const> params, double lr) {
    ++t_;
    double sq = 0.0;
    for (auto* p : params) {
        if (p->requires_grad() && p->has_grad()) {
            for (T g : p->grad()) {
                sq += static_cast<double>(g) * static_cast<double>(g);
            }
        }
    }
    last_norm_ = std::sqrt(sq);
    if (!std::isfinite(last_norm_)) {
        throw NumericError("non-finite gradient norm at optimizer step " + std::to_string(t_));
    }
    const double clip = cfg_.clip_norm > 0.0 && last_norm_ > cfg_.clip_norm ? cfg_.clip_norm / last_norm_ : 1.0;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto* p : params) {
        if (!p->requires_grad() || !p->has_grad()) {
            continue;
        }
        auto& st = state_[p];
        if (st.m.size() != p->numel()) {
            st.m.assign(p->numel(), 0.0);
            st.v.assign(p->numel(), 0.0);
        }
        auto g = p->grad();
        auto w = p->data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = static_cast<double>(g[i]) * clip;
            st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gi;
            st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double upd = (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + cfg_.eps) +
                               cfg_.weight_decay * static_cast<double>(w[i]);
            w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * upd);
        }
        p->clear_grad();
    }
}

TrainExample next_token_example(std::vector<int> tokens) {
    TrainExample ex;
    ex.targets.assign(tokens.size(), kIgnoreTarget);
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        ex.targets[t] = tokens[t + 1];
    }
    ex.tokens = std::move(tokens);
    return ex;
}

template <typename T>
std::vector<Tensor<T>*> trainable_parameters(HybridModel<T>& model) {
    std::vector<Tensor<T>*> out;
    for (auto& np : model.named_parameters()) {
        if (np.tensor->requires_grad()) {
            out.push_back(np.tensor);
        }
    }
    return out;
}

template <typename T>
double train_step(HybridModel<T>& model, std::span<const TrainExample> batch, AdamW<T>& opt,
                  const AttentionRuntime& rt, double lr) {
    if (batch.empty()) {
        throw UsageError("train_step: empty batch");
    }
    auto params = trainable_parameters(model);
    for (auto* p : params) {
        p->clear_grad();
    }
    double total = 0.0;
    const T inv_b = T{1} / static_cast<T>(batch.size());
    for (const auto& ex : batch) {
        if (ex.targets.size() != ex.tokens.size()) {
            throw InputError("train_step: targets and tokens differ in length");
        }
        Tape<T> tape;
        auto loss = cross_entropy(model_forward(tape, model, ex.tokens, rt), std::span<const int>(ex.targets));
        total += static_cast<double>(loss.value().item());
        tape.backward(scale(loss, inv_b));
    }
    opt.step(params, lr);
    return total / static_cast<double>(batch.size());
}

template <typename T>
void save_checkpoint(const std::string& path, HybridModel<T>& model) {
    nlohmann::json meta;
    meta["kind"] = "model";
    meta["config"] = nlohmann::json::parse(model.config().to_json());
    meta["policy"] = model.policy_tag;
    meta["merged"] = model.adapters_merged();
    meta["adapters"] = nlohmann::json::array();
    for (const auto& [name, ad] : model.adapters()) {
        meta["adapters"].push_back({{"target", name}, {"rank", ad.rank}, {"alpha", ad.alpha}});
    }
    meta["trainable"] = nlohmann::json::array();
    std::vector<ContainerView<T>> items;
    for (auto& np : model.named_parameters()) {
        items.push_back({np.name, np.tensor});
        if (np.tensor->requires_grad()) {
            meta["trainable"].push_back(np.name);
        }
    }
    write_container<T>(path, meta.dump(), items);
}

template <typename T>
HybridModel<T> load_checkpoint(const std::string& path) {
    auto c = read_container(path);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(c.meta_json);
        if (meta.at("kind") != "model") {
            throw InputError(path + ": not a model checkpoint");
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ": bad metadata: " + e.what());
    }
    HybridModel<T> model(ModelConfig::from_json(meta.at("config").dump()));
    model.policy_tag = meta.value("policy", "");
    model.set_adapters_merged(meta.value("merged", false));
    Rng unused(0);
    for (const auto& aj : meta.at("adapters")) {
        const std::string target = aj.at("target");
        Tensor<T>* w = model.find(target);
        if (w == nullptr) {
            throw InputError(path + ": adapter target " + target + " not in model");
        }
        model.adapters().emplace(target, LoRAAdapter<T>::create(target, w->rows(), w->cols(), aj.at("rank"),
                                                                aj.at("alpha"), unused));
    }
    auto params = model.named_parameters();
    if (params.size() != c.entries.size()) {
        throw InputError(path + ": parameter count mismatch");
    }
    std::vector<std::string> trainable = meta.value("trainable", std::vector<std::string>{});
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = c.entries[i];
        if (e.name != params[i].name || e.shape != params[i].tensor->shape()) {
            throw InputError(path + ": unexpected tensor " + e.name);
        }
        auto data = params[i].tensor->data();
        for (std::size_t k = 0; k < data.size(); ++k) {
            data[k] = static_cast<T>(e.values[k]);
        }
        params[i].tensor->set_requires_grad(std::find(trainable.begin(), trainable.end(), e.name) != trainable.end());
    }
    return model;
}

template <typename T>
std::uint64_t parameter_checksum(std::span<Tensor<T>* const> tensors) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto* t : tensors) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(t->raw());
        for (std::size_t i = 0; i < t->numel() * sizeof(T); ++i) {
            h = (h ^ bytes[i]) * 0x100000001b3ULL;
        }
    }
    return h;
}

#define SPANATTN_INSTANTIATE(T)                                                                                   \
    template class HybridModel<T>;                                                                               \
    template Var<T> ssm_forward<T>(Tape<T>&, Var<T>, SSMLayer<T>&, HybridModel<T>*, const std::string&);         \
    template Var<T> model_forward<T>(Tape<T>&, HybridModel<T>&, std::span<const int>, const AttentionRuntime&);  \
    template Tensor<T> model_logits<T>(HybridModel<T>&, std::span<const int>, const AttentionRuntime&);          \
    template class AdamW<T>;                                                                                     \
    template std::vector<Tensor<T>*> trainable_parameters<T>(HybridModel<T>&);                                   \
    template double train_step<T>(HybridModel<T>&, std::span<const TrainExample>, AdamW<T>&,                     \
                                  const AttentionRuntime&, double);                                              \
    template void save_checkpoint<T>(const std::string&, HybridModel<T>&);                                       \
    template HybridModel<T> load_checkpoint<T>(const std::string&);                                              \
    template std::uint64_t parameter_checksum<T>(std::span<Tensor<T>* const>);

SPANATTN_INSTANTIATE(float)
SPANATTN_INSTANTIATE(double)
#undef SPANATTN_INSTANTIATE

}  // namespace spanattn
