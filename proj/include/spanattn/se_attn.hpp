// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spanattn/attention.hpp"
#include "spanattn/mask.hpp"
#include "spanattn/random.hpp"
#include "spanattn/tape.hpp"
#include "spanattn/tensor.hpp"

namespace spanattn {

enum class SEVariant { Standard, NoMem, Random, Landmark };

std::string_view to_string(SEVariant v);
SEVariant parse_se_variant(std::string_view name);

struct SEAttnConfig {
    std::vector<std::size_t> chunk_sizes{16, 32};
    std::size_t block_size = 8;
    std::size_t top_k = 2;
    SEVariant variant = SEVariant::Standard;
    std::uint64_t seed = 0;
    /// Summarize memory blocks with per-head attention instead of one
    /// attention over the full d_model width. Selection stays shared.
    bool per_head_summary = false;

    void validate() const;
};

/// One S-token slice of the projected (and rotated) Q/K/V.
template <typename T>
struct MemoryBlock {
    std::size_t index = 0;
    std::size_t start = 0;
    std::size_t end = 0;
    Tensor<T> q;
    Tensor<T> k;
    Tensor<T> v;
    Tensor<T> summary;
};

/// Splits rows of q/k/v into consecutive blocks of `block_size` rows; the
/// final block may be shorter. Summaries are left empty.
template <typename T>
std::vector<MemoryBlock<T>> split_memory_blocks(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                                std::size_t block_size);

/// Mean over rows of the non-causal self-attention output of the block,
/// scaled by 1/sqrt(width) per head.
template <typename T>
Tensor<T> summarize_block(const MemoryBlock<T>& block, std::size_t heads = 1);

/// One-query cross-attention from a fixed landmark vector over the block.
template <typename T>
Tensor<T> landmark_summarize(const MemoryBlock<T>& block, const Tensor<T>& landmark);

/// The shared, non-learnable landmark query for a given width and seed.
template <typename T>
Tensor<T> landmark_vector(std::size_t d_model, std::uint64_t seed);

/// Number of blocks whose token range ends at or before `chunk_start`.
/// Blocks are contiguous from position 0, so the past is always a prefix.
template <typename T>
std::size_t past_block_count(const std::vector<MemoryBlock<T>>& blocks, std::size_t chunk_start);

template <typename T>
struct RelevancyResult {
    std::vector<T> scores;  // one entry per memory block
    std::size_t past = 0;   // leading entries that are retrievable
    bool fully_masked = false;
};

/// R_ij = sum over chunk rows of (Q_i c_j), masked to past blocks and
/// normalized with softmax((R + mask) / sqrt(d_model)).
template <typename T>
RelevancyResult<T> relevancy_scores(const Tensor<T>& q_chunk, const std::vector<MemoryBlock<T>>& blocks,
                                    std::size_t chunk_start);

/// Indices of the retrieved blocks, ascending. Only the first `past`
/// entries of `scores` are eligible. Ties resolve to the lower index.
template <typename T>
std::vector<std::size_t> select_top_k(std::span<const T> scores, std::size_t past, std::size_t k, SEVariant variant,
                                      Rng& rng);

struct ChunkTrace {
    std::size_t index = 0;
    std::size_t start = 0;
    std::size_t end = 0;
    std::size_t past_blocks = 0;
    bool fully_masked = false;
    std::vector<double> relevancy;
    std::vector<std::size_t> selected;

    bool operator==(const ChunkTrace&) const = default;
};

struct RetrievalTrace {
    std::size_t length = 0;
    std::size_t chunk_size = 0;
    std::size_t block_size = 0;
    std::size_t top_k = 0;
    SEVariant variant = SEVariant::Standard;
    std::vector<ChunkTrace> chunks;

    std::size_t num_blocks() const { return block_size == 0 ? 0 : (length + block_size - 1) / block_size; }
    std::string to_json() const;
    static RetrievalTrace from_json(std::string_view text);

    bool operator==(const RetrievalTrace&) const = default;
};

/// Throws InvariantError unless every selection is distinct, ascending,
/// strictly in the past of its chunk, and chunk ranges tile [0, length).
void validate_trace(const RetrievalTrace& trace);

/// Dense L x L visibility pattern implied by a trace.
AdditiveMask trace_pattern(const RetrievalTrace& trace, std::size_t length, std::size_t chunk_size,
                           std::size_t block_size);
AdditiveMask trace_pattern(const RetrievalTrace& trace);

/// Chunk size for one call, drawn from cfg.chunk_sizes with a stream keyed
/// by (seed, layer, step).
std::size_t draw_chunk_size(const SEAttnConfig& cfg, std::uint64_t layer, std::uint64_t step);

struct SECallContext {
    std::uint64_t layer = 0;
    std::uint64_t step = 0;
    /// When set, selection and chunk size are taken from this trace.
    const RetrievalTrace* forced = nullptr;
};

template <typename T>
struct SEAttnOutput {
    Var<T> out;
    RetrievalTrace trace;
};

template <typename T>
SEAttnOutput<T> se_attn_forward(Var<T> x, const AttentionVars<T>& w, const AttentionOptions& opts,
                                const SEAttnConfig& cfg, const SECallContext& ctx = {});

template <typename T>
struct SEAttnResult {
    Tensor<T> out;
    RetrievalTrace trace;
};

template <typename T>
SEAttnResult<T> se_attn_forward(const Tensor<T>& x, AttentionParams<T>& p, const AttentionOptions& opts,
                                const SEAttnConfig& cfg, const SECallContext& ctx = {});

}  // namespace spanattn
