// SPDX-License-Identifier: Apache-2.0
// Flat "section.key = value" experiment configuration.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "spanattn/adaptation.hpp"
#include "spanattn/bench.hpp"
#include "spanattn/experiment.hpp"
#include "spanattn/hybrid_model.hpp"

namespace spanattn {

struct ExperimentConfig {
    ModelConfig model;

    AttentionVariant variant = AttentionVariant::SE;
    SEAttnConfig se;
    std::size_t window = 64;

    AdapterPolicy policy{PolicyKind::Full, 32, 64.0, {}, true};
    AdamWConfig opt;
    std::size_t steps = 100;
    std::uint64_t seed = 0;

    DataConfig data;

    std::vector<std::string> eval_tasks{"niah_single_1"};
    std::vector<std::size_t> eval_lengths{256};
    std::size_t eval_instances = 20;
    bool eval_ppl = false;

    std::string checkpoint = "checkpoint.bin";
    /// Optional starting point for fine-tuning; empty trains from scratch.
    std::string init_checkpoint;

    std::vector<AttentionVariant> bench_variants{AttentionVariant::Full, AttentionVariant::SE};
    std::vector<std::size_t> bench_lengths{256, 512, 1024};
    ProfileConfig bench;

    /// Cross-field checks; raises ConfigError naming the offending key.
    void validate() const;
    /// Canonical text with every key, in schema order. parse_config(to_text()) == *this.
    std::string to_text() const;
    /// FNV-1a of to_text().
    std::uint64_t hash() const;
    /// Sets every seed (model init, data, SE streams, bench) to `seed`.
    void override_seed(std::uint64_t seed);
    AttentionRuntime runtime() const;
};

/// Parses config text. Syntax errors, unknown keys, duplicates and
/// ill-typed values raise ConfigError prefixed with "source:line:".
/// The result is validated before it is returned.
ExperimentConfig parse_config(std::string_view text, std::string_view source = "<config>");
/// MissingArtifactError when the file does not exist.
ExperimentConfig load_config(const std::string& path);

}  // namespace spanattn
