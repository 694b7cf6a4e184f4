// SPDX-License-Identifier: Apache-2.0
// Task-driven training and evaluation loops shared by the CLI and the
// acceptance harness. Models are float.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "spanattn/evalgen.hpp"
#include "spanattn/hybrid_model.hpp"

namespace spanattn {

enum class LossMode { All, Answer };

std::string_view to_string(LossMode m);
LossMode parse_loss_mode(std::string_view name);

struct DataConfig {
    std::string task = "niah_single_1";
    std::size_t context_length = 256;
    std::size_t batch = 4;
    LossMode loss = LossMode::All;
    /// Number of distinct training instances cycled through; 0 draws a fresh
    /// instance for every example.
    std::size_t pool = 0;
};

/// Next-token example over prompt + target. In Answer mode only the target
/// tokens carry loss.
TrainExample task_example(const TaskInstance& inst, LossMode loss);

/// Seed of the i-th training instance at `step`; disjoint from eval_instance_seed.
std::uint64_t train_instance_seed(std::uint64_t seed, std::size_t step, std::size_t i);
std::uint64_t eval_instance_seed(std::uint64_t seed, std::size_t i);

std::vector<TrainExample> make_batch(const DataConfig& data, std::uint64_t seed, std::size_t step);

struct TrainLogRow {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double tokens_per_s = 0.0;
};

struct TrainRunConfig {
    std::size_t steps = 100;
    AdamWConfig opt;
    AttentionRuntime runtime;
    std::uint64_t seed = 0;
};

/// Runs `steps` optimizer steps on freshly generated task data. `on_step`
/// (optional) sees every row as it is produced.
std::vector<TrainLogRow> train_on_task(HybridModel<float>& model, const DataConfig& data, const TrainRunConfig& run,
                                       const std::function<void(const TrainLogRow&)>& on_step = {});

struct EvalOutcome {
    std::string task;
    std::size_t context_length = 0;
    std::string variant;
    double recall = 0.0;
    std::size_t instances = 0;
    /// The generator cannot build this task at this length.
    bool infeasible = false;
    std::string note;
};

/// Greedy-decodes each instance's answer after its prompt and averages recall.
/// Instances are split across `threads` workers.
EvalOutcome eval_recall(HybridModel<float>& model, std::string_view task, std::size_t context_length,
                        std::size_t instances, const AttentionRuntime& rt, std::uint64_t seed, std::size_t threads = 1);

/// Perplexity on generated task text of the given window.
double eval_perplexity(HybridModel<float>& model, std::string_view task, std::size_t context_length,
                       std::size_t instances, const AttentionRuntime& rt, std::uint64_t seed);

}  // namespace spanattn
