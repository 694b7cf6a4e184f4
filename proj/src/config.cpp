// SPDX-License-Identifier: Apache-2.0
#include "spanattn/config.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "spanattn/errors.hpp"

namespace spanattn {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    for (std::string item; std::getline(ss, item, ',');) {
        item = trim(item);
        if (item.empty()) {
            throw ConfigError("empty list element");
        }
        out.push_back(item);
    }
    if (out.empty()) {
        throw ConfigError("empty list");
    }
    return out;
}

std::uint64_t to_u64(const std::string& v) {
    std::uint64_t x = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc{} || p != v.data() + v.size()) {
        throw ConfigError("expected a non-negative integer, got '" + v + "'");
    }
    return x;
}

std::size_t to_size(const std::string& v) {
    return static_cast<std::size_t>(to_u64(v));
}

double to_double(const std::string& v) {
    std::size_t used = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty()) {
        throw ConfigError("expected a number, got '" + v + "'");
    }
    return x;
}

bool to_bool(const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("expected true or false, got '" + v + "'");
}

std::vector<std::size_t> to_sizes(const std::string& v) {
    std::vector<std::size_t> out;
    for (const auto& s : split_list(v)) {
        out.push_back(to_size(s));
    }
    return out;
}

template <typename T>
std::string join_values(const std::vector<T>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) {
        os << (i ? "," : "") << v[i];
    }
    return os.str();
}

std::string fmt_double(double x) {
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
}

struct Key {
    std::string name;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

#define SIZE_KEY(key, field)                                                             \
    Key { key, [](ExperimentConfig& c, const std::string& v) { c.field = to_size(v); }, \
          [](const ExperimentConfig& c) { return std::to_string(c.field); } }
#define U64_KEY(key, field)                                                             \
    Key { key, [](ExperimentConfig& c, const std::string& v) { c.field = to_u64(v); }, \
          [](const ExperimentConfig& c) { return std::to_string(c.field); } }
#define DOUBLE_KEY(key, field)                                                             \
    Key { key, [](ExperimentConfig& c, const std::string& v) { c.field = to_double(v); }, \
          [](const ExperimentConfig& c) { return fmt_double(c.field); } }
#define BOOL_KEY(key, field)                                                             \
    Key { key, [](ExperimentConfig& c, const std::string& v) { c.field = to_bool(v); }, \
          [](const ExperimentConfig& c) { return std::string(c.field ? "true" : "false"); } }
#define STRING_KEY(key, field)                                                      \
    Key { key, [](ExperimentConfig& c, const std::string& v) { c.field = v; }, \
          [](const ExperimentConfig& c) { return c.field; } }
#define SIZES_KEY(key, field)                                                             \
    Key { key, [](ExperimentConfig& c, const std::string& v) { c.field = to_sizes(v); }, \
          [](const ExperimentConfig& c) { return join_values(c.field); } }

const std::vector<Key>& schema() {
    static const std::vector<Key> keys = {
        SIZE_KEY("model.vocab", model.vocab),
        SIZE_KEY("model.d", model.d),
        SIZE_KEY("model.d_model", model.d_model),
        SIZE_KEY("model.heads", model.heads),
        SIZE_KEY("model.layers", model.layers),
        SIZE_KEY("model.ssm_per_attn", model.ssm_per_attn),
        SIZE_KEY("model.ssm_width", model.ssm_width),
        SIZE_KEY("model.conv_width", model.conv_width),
        BOOL_KEY("model.tied_head", model.tied_head),
        DOUBLE_KEY("model.rope_base", model.rope_base),
        DOUBLE_KEY("model.rope_position_scale", model.rope_position_scale),
        U64_KEY("model.seed", model.seed),

        Key{"attention.variant",
            [](ExperimentConfig& c, const std::string& v) { c.variant = parse_attention_variant(v); },
            [](const ExperimentConfig& c) { return std::string(to_string(c.variant)); }},
        SIZES_KEY("attention.chunk_sizes", se.chunk_sizes),
        SIZE_KEY("attention.block_size", se.block_size),
        SIZE_KEY("attention.top_k", se.top_k),
        SIZE_KEY("attention.window", window),
        BOOL_KEY("attention.per_head_summary", se.per_head_summary),

        Key{"adaptation.policy", [](ExperimentConfig& c, const std::string& v) { c.policy.kind = parse_policy(v); },
            [](const ExperimentConfig& c) { return std::string(to_string(c.policy.kind)); }},
        SIZE_KEY("adaptation.rank", policy.rank),
        DOUBLE_KEY("adaptation.alpha", policy.alpha),
        Key{"adaptation.targets",
            [](ExperimentConfig& c, const std::string& v) { c.policy.targets = v == "attention" ? std::vector<std::string>{} : split_list(v); },
            [](const ExperimentConfig& c) {
                return c.policy.targets.empty() ? std::string("attention") : join_values(c.policy.targets);
            }},
        BOOL_KEY("adaptation.train_conv_bias", policy.train_conv_bias),
        DOUBLE_KEY("adaptation.lr", opt.lr),
        SIZE_KEY("adaptation.warmup_steps", opt.warmup_steps),
        DOUBLE_KEY("adaptation.weight_decay", opt.weight_decay),
        DOUBLE_KEY("adaptation.clip_norm", opt.clip_norm),
        SIZE_KEY("adaptation.steps", steps),
        U64_KEY("adaptation.seed", seed),

        STRING_KEY("data.task", data.task),
        SIZE_KEY("data.context_length", data.context_length),
        SIZE_KEY("data.batch", data.batch),
        SIZE_KEY("data.pool", data.pool),
        Key{"data.loss", [](ExperimentConfig& c, const std::string& v) { c.data.loss = parse_loss_mode(v); },
            [](const ExperimentConfig& c) { return std::string(to_string(c.data.loss)); }},

        Key{"eval.tasks", [](ExperimentConfig& c, const std::string& v) { c.eval_tasks = split_list(v); },
            [](const ExperimentConfig& c) { return join_values(c.eval_tasks); }},
        SIZES_KEY("eval.context_lengths", eval_lengths),
        SIZE_KEY("eval.instances", eval_instances),
        BOOL_KEY("eval.perplexity", eval_ppl),

        STRING_KEY("paths.checkpoint", checkpoint),
        STRING_KEY("paths.init_checkpoint", init_checkpoint),

        Key{"bench.variants",
            [](ExperimentConfig& c, const std::string& v) {
                c.bench_variants.clear();
                for (const auto& s : split_list(v)) {
                    c.bench_variants.push_back(parse_attention_variant(s));
                }
            },
            [](const ExperimentConfig& c) {
                std::vector<std::string> names;
                for (auto v : c.bench_variants) names.emplace_back(to_string(v));
                return join_values(names);
            }},
        SIZES_KEY("bench.lengths", bench_lengths),
        SIZE_KEY("bench.d", bench.d),
        SIZE_KEY("bench.d_model", bench.d_model),
        SIZE_KEY("bench.heads", bench.heads),
        SIZE_KEY("bench.M", bench.M),
        SIZE_KEY("bench.S", bench.S),
        SIZE_KEY("bench.k", bench.k),
        SIZE_KEY("bench.window", bench.window),
        SIZE_KEY("bench.warmup", bench.warmup),
        SIZE_KEY("bench.reps", bench.reps),
    };
    return keys;
}

#undef SIZE_KEY
#undef U64_KEY
#undef DOUBLE_KEY
#undef BOOL_KEY
#undef STRING_KEY
#undef SIZES_KEY

bool known_task(std::string_view t) {
    for (auto name : ruler_tasks()) {
        if (name == t) return true;
    }
    return false;
}

}  // namespace

void ExperimentConfig::validate() const {
    auto fail = [](const std::string& key, const std::string& what) { throw ConfigError(key + ": " + what); };
    try {
        model.validate();
    } catch (const ConfigError& e) {
        fail("model", e.what());
    }
    if (model.vocab < 260) {
        fail("model.vocab", "byte tokenizer needs at least 260 ids");
    }
    try {
        se.validate();
    } catch (const ConfigError& e) {
        fail("attention", e.what());
    }
    if (window == 0) fail("attention.window", "must be positive");
    if (policy.kind != PolicyKind::Full && policy.rank == 0) fail("adaptation.rank", "must be positive");
    if (!(opt.lr >= 0.0)) fail("adaptation.lr", "must be non-negative");
    if (!(opt.clip_norm >= 0.0)) fail("adaptation.clip_norm", "must be non-negative");
    if (!known_task(data.task)) fail("data.task", "unknown task '" + data.task + "'");
    if (data.context_length < 2) fail("data.context_length", "must be at least 2");
    if (data.batch == 0) fail("data.batch", "must be positive");
    for (const auto& t : eval_tasks) {
        if (!known_task(t)) fail("eval.tasks", "unknown task '" + t + "'");
    }
    for (auto L : eval_lengths) {
        if (L < 2) fail("eval.context_lengths", "lengths must be at least 2");
    }
    if (eval_instances == 0) fail("eval.instances", "must be positive");
    if (checkpoint.empty()) fail("paths.checkpoint", "must not be empty");
    for (auto v : bench_variants) {
        if (v == AttentionVariant::S2) fail("bench.variants", "s2 is not available");
    }
    for (auto L : bench_lengths) {
        if (L == 0) fail("bench.lengths", "lengths must be positive");
    }
    try {
        bench.validate();
    } catch (const ConfigError& e) {
        fail("bench", e.what());
    }
}

std::string ExperimentConfig::to_text() const {
    std::string out;
    for (const auto& k : schema()) {
        out += k.name + " = " + k.get(*this) + "\n";
    }
    return out;
}

std::uint64_t ExperimentConfig::hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : to_text()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

void ExperimentConfig::override_seed(std::uint64_t s) {
    model.seed = s;
    seed = s;
    se.seed = s;
    bench.seed = s;
}

AttentionRuntime ExperimentConfig::runtime() const {
    AttentionRuntime rt;
    rt.variant = variant;
    rt.se = se;
    rt.window = window;
    return rt;
}

ExperimentConfig parse_config(std::string_view text, std::string_view source) {
    std::map<std::string, const Key*> index;
    for (const auto& k : schema()) {
        index[k.name] = &k;
    }
    ExperimentConfig cfg;
    std::set<std::string> seen;
    std::istringstream in{std::string(text)};
    std::size_t lineno = 0;
    auto where = [&] { return std::string(source) + ":" + std::to_string(lineno) + ": "; };
    for (std::string raw; std::getline(in, raw);) {
        ++lineno;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(where() + "expected 'section.key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto it = index.find(key);
        if (it == index.end()) {
            throw ConfigError(where() + "unknown key '" + key + "'");
        }
        if (!seen.insert(key).second) {
            throw ConfigError(where() + "duplicate key '" + key + "'");
        }
        if (value.empty() && key != "paths.init_checkpoint") {
            throw ConfigError(where() + "missing value for '" + key + "'");
        }
        try {
            it->second->set(cfg, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where() + key + ": " + e.what());
        }
    }
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(source) + ": " + e.what());
    }
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw MissingArtifactError("config file not found: " + path);
    }
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), path);
}

}  // namespace spanattn
