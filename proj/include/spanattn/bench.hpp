// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "spanattn/hybrid_model.hpp"

namespace spanattn {

struct CostModelInput {
    std::size_t L = 0;
    std::size_t M = 0;  // chunk size
    std::size_t S = 0;  // memory block size
    std::size_t k = 0;  // retrieved blocks per chunk
    std::size_t d_model = 0;
    std::size_t window = 0;  // sliding window only
    AttentionVariant variant = AttentionVariant::SE;
    /// Adds T*U*log2(U) for the per-chunk top-k sort (T chunks, U blocks).
    bool include_topk_sort = false;

    void validate() const;
};

struct CostEstimate {
    double ops = 0.0;
    /// S*k >= M: the retrieved blocks are no longer small next to the chunk,
    /// so the chunk stage is underestimated.
    bool bound_violated = false;
};

/// Multiply-accumulate counts with unit constants:
///   SE / SE-landmark: d (L S + L M + L^2 / S)
///   SE-NoMem / SE-Random: d L M
///   Full: d L^2, sliding window: d L window.
CostEstimate analytic_cost(const CostModelInput& in);

struct ProfileConfig {
    std::size_t d = 64;
    std::size_t d_model = 64;
    std::size_t heads = 1;
    std::size_t M = 128;
    std::size_t S = 32;
    std::size_t k = 4;
    std::size_t window = 128;
    std::size_t warmup = 1;
    std::size_t reps = 5;
    std::uint64_t seed = 0;
    /// Allocation ceiling for capped points; 0 means unlimited.
    std::size_t max_bytes = 0;

    void validate() const;
};

struct ProfileRecord {
    AttentionVariant variant = AttentionVariant::Full;
    std::size_t L = 0;
    std::size_t M = 0;
    std::size_t S = 0;
    std::size_t k = 0;
    double median_s = 0.0;
    double min_s = 0.0;
    double max_s = 0.0;
    std::size_t reps = 0;
    std::size_t peak_bytes = 0;
    double analytic_ops = 0.0;
    /// Out of memory: timings are empty and peak_bytes holds the ceiling hit.
    bool capped = false;
};

/// One training step (forward, backward, AdamW update) of a single
/// attention layer on random inputs, in float. Warm-up steps are discarded.
ProfileRecord profile_step(AttentionVariant variant, std::size_t L, const ProfileConfig& cfg);

std::vector<ProfileRecord> profile_grid(std::span<const AttentionVariant> variants, std::span<const std::size_t> lengths,
                                        const ProfileConfig& cfg);

/// Least-squares slope of log(y) on log(x).
double loglog_slope(std::span<const double> x, std::span<const double> y);
/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

void write_profile_csv(std::ostream& out, std::span<const ProfileRecord> records);

}  // namespace spanattn
