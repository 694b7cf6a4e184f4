// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spanattn/tensor.hpp"

namespace spanattn {

enum class HaystackKind { Repeat, EssaySurrogate, Needle };
enum class NeedleKeyKind { Words, Uuids };
enum class NeedleValueKind { Numbers, Uuids };

struct NIAHSpec {
    HaystackKind haystack = HaystackKind::Repeat;
    NeedleKeyKind key_kind = NeedleKeyKind::Words;
    NeedleValueKind value_kind = NeedleValueKind::Numbers;
    std::size_t num_keys = 1;
    std::size_t num_values = 1;
    std::size_t num_queries = 1;
    std::size_t context_length = 256;
    std::uint64_t seed = 0;
};

/// The eight standard NIAH configurations by task name (niah_single_1 ...
/// niah_multiquery). num_keys is raised to num_queries where needed, since
/// every queried key must be present.
NIAHSpec niah_preset(std::string_view task, std::size_t context_length, std::uint64_t seed);

struct Needle {
    std::string key;
    std::string value;
    std::size_t slot = 0;        // sentence boundary the needle was inserted at
    std::size_t char_offset = 0;  // byte offset of the needle in the prompt
};

struct TaskInstance {
    std::string task;
    std::uint64_t seed = 0;
    std::size_t context_length = 0;
    std::string prompt;
    std::string target;
    std::vector<std::string> answers;
    std::vector<Needle> needles;
    std::size_t num_slots = 0;
    std::size_t query_offset = 0;

    /// Byte tokens of prompt + target; exactly context_length long.
    std::vector<int> tokens() const;
    std::size_t prompt_tokens() const { return prompt.size(); }

    std::string to_json() const;
    static TaskInstance from_json(std::string_view line);
};

/// Sentences of the repeated-noise haystack, cycled in order.
std::span<const std::string_view> repeat_noise_sentences();

TaskInstance gen_niah(const NIAHSpec& spec);

/// Chains of "VAR X = ..." assignments: chain 0 is the queried one, the
/// others are distractors with different values.
TaskInstance gen_variable_tracking(std::size_t chains, std::size_t hops, std::size_t context_length,
                                   std::uint64_t seed);

enum class WordsKind { Common, Frequent };

struct WordsParams {
    // Common words extraction.
    std::size_t freq_cw = 30;
    std::size_t freq_ucw = 3;
    std::size_t num_cw = 10;
    /// Distractor words; 0 fills whatever the context leaves.
    std::size_t num_ucw = 0;
    // Frequent words extraction.
    double alpha = 2.0;
    std::size_t vocab = 50;
    std::size_t num_words = 0;  // 0 fills the context
    std::size_t top = 3;
    /// 0 sizes the context to fit the word list exactly.
    std::size_t context_length = 0;
};

TaskInstance gen_words_extraction(WordsKind kind, const WordsParams& params, std::uint64_t seed);

/// Word list section of a CWE/FWE prompt (between "Words:" and the query).
std::vector<std::string> extraction_words(const TaskInstance& inst);

/// Fraction of expected answers found verbatim in `output`.
double score_recall(std::string_view output, const TaskInstance& inst);

/// Next-token logits [L x vocab] for a token sequence.
using LogitsFn = std::function<Tensor<float>(std::span<const int>)>;

/// exp(mean next-token cross entropy) over consecutive non-overlapping
/// windows of `window` tokens; a shorter tail is ignored.
double perplexity(const LogitsFn& model, std::span<const int> stream, std::size_t window);

/// Greedy continuation of `prompt`, stopping at `max_new` tokens or EOS.
std::vector<int> greedy_decode(const LogitsFn& model, std::span<const int> prompt, std::size_t max_new);

/// The eleven task names in canonical order.
std::span<const std::string_view> ruler_tasks();
/// Groups NIAH-S, NIAH-M, NIAH-M-QV, VT, CF-WE and their member tasks.
const std::vector<std::pair<std::string, std::vector<std::string>>>& ruler_groups();
/// Group means plus "Average" over all eleven tasks. Missing tasks raise InputError.
std::vector<std::pair<std::string, double>> aggregate_ruler(const std::map<std::string, double>& task_scores);

/// Desk-scale instance for one of the eleven tasks.
TaskInstance generate_task(std::string_view task, std::size_t context_length, std::uint64_t seed);

}  // namespace spanattn
