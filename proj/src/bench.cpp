// SPDX-License-Identifier: Apache-2.0
#include "spanattn/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <new>
#include <numeric>

#include "spanattn/attention.hpp"
#include "spanattn/errors.hpp"
#include "spanattn/memory_stats.hpp"
#include "spanattn/se_attn.hpp"

namespace spanattn {

void CostModelInput::validate() const {
    if (L == 0 || d_model == 0) {
        throw ConfigError("cost model: L and d_model must be positive");
    }
    if (variant == AttentionVariant::SlidingWindow && window == 0) {
        throw ConfigError("cost model: sliding window needs window > 0");
    }
    if (is_se_variant(variant) && (M == 0 || S == 0)) {
        throw ConfigError("cost model: SE variants need M and S > 0");
    }
    if (variant == AttentionVariant::S2) {
        throw ConfigError("cost model: s2 is not available");
    }
}

CostEstimate analytic_cost(const CostModelInput& in) {
    in.validate();
    const double d = static_cast<double>(in.d_model);
    const double L = static_cast<double>(in.L);
    const double M = static_cast<double>(in.M);
    const double S = static_cast<double>(in.S);
    CostEstimate e;
    switch (in.variant) {
        case AttentionVariant::Full: e.ops = d * L * L; break;
        case AttentionVariant::SlidingWindow: e.ops = d * L * static_cast<double>(in.window); break;
        case AttentionVariant::SENoMem:
        case AttentionVariant::SERandom: e.ops = d * L * M; break;
        case AttentionVariant::SE:
        case AttentionVariant::SELandmark: {
            e.ops = d * (L * S + L * M + L * L / S);
            if (in.include_topk_sort) {
                const double chunks = std::ceil(L / M);
                const double blocks = std::ceil(L / S);
                e.ops += chunks * blocks * std::log2(std::max(blocks, 1.0));
            }
            break;
        }
        case AttentionVariant::S2: break;
    }
    e.bound_violated = is_se_variant(in.variant) && in.variant != AttentionVariant::SENoMem && in.S * in.k >= in.M;
    return e;
}

void ProfileConfig::validate() const {
    if (d == 0 || d_model == 0 || heads == 0 || d_model % heads != 0) {
        throw ConfigError("profile: d, d_model must be positive and heads must divide d_model");
    }
    if (reps < 5) {
        throw ConfigError("profile: at least 5 repetitions are required");
    }
    if (M == 0 || S == 0 || window == 0) {
        throw ConfigError("profile: M, S and window must be positive");
    }
}

namespace {

struct BudgetExceeded {};

// Runs one step; throws std::bad_alloc when the tracked footprint passes max_bytes.
double one_step(AttentionVariant variant, const Tensor<float>& x, AttentionParams<float>& p,
                const AttentionOptions& opts, const SEAttnConfig& se, AdamW<float>& opt, std::size_t step,
                std::size_t max_bytes) {
    const auto t0 = std::chrono::steady_clock::now();
    {
        Tape<float> tape;
        auto xv = tape.constant(x);
        auto w = bind(tape, p);
        Var<float> out;
        switch (variant) {
            case AttentionVariant::Full: out = full_attention(xv, w, opts, true); break;
            case AttentionVariant::SlidingWindow: out = sliding_window_attention(xv, w, opts, se.chunk_sizes[0]); break;
            case AttentionVariant::S2: throw ConfigError("s2 attention is not available");
            default: {
                SEAttnConfig cfg = se;
                cfg.variant = variant == AttentionVariant::SENoMem    ? SEVariant::NoMem
                              : variant == AttentionVariant::SERandom ? SEVariant::Random
                              : variant == AttentionVariant::SELandmark ? SEVariant::Landmark
                                                                        : SEVariant::Standard;
                SECallContext ctx;
                ctx.step = step;
                out = se_attn_forward(xv, w, opts, cfg, ctx).out;
            }
        }
        auto loss = mean(mul(out, out));
        tape.backward(loss);
        if (max_bytes != 0 && MemoryStats::peak() > max_bytes) {
            throw std::bad_alloc();
        }
    }
    Tensor<float>* params[] = {&p.wq, &p.wk, &p.wv, &p.wo};
    opt.step(params, opt.config().lr);
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count();
}

}  // namespace

ProfileRecord profile_step(AttentionVariant variant, std::size_t L, const ProfileConfig& cfg) {
    cfg.validate();
    ProfileRecord rec;
    rec.variant = variant;
    rec.L = L;
    rec.M = cfg.M;
    rec.S = cfg.S;
    rec.k = cfg.k;
    CostModelInput cin{L, cfg.M, cfg.S, cfg.k, cfg.d_model, cfg.window, variant, false};
    rec.analytic_ops = analytic_cost(cin).ops;

    Rng rng(derive_seed(cfg.seed, {0x50524f46, L}));
    auto p = AttentionParams<float>::random(cfg.d, cfg.d_model, cfg.heads, rng);
    auto x = Tensor<float>::randn({L, cfg.d}, rng);
    AttentionOptions opts;
    opts.heads = cfg.heads;
    SEAttnConfig se;
    se.chunk_sizes = {variant == AttentionVariant::SlidingWindow ? cfg.window : cfg.M};
    se.block_size = cfg.S;
    se.top_k = cfg.k;
    se.seed = cfg.seed;
    AdamWConfig ocfg;
    ocfg.lr = 1e-4;
    AdamW<float> opt(ocfg);

    std::vector<double> times;
    try {
        for (std::size_t i = 0; i < cfg.warmup; ++i) {
            one_step(variant, x, p, opts, se, opt, i, cfg.max_bytes);
        }
        std::size_t peak = 0;
        for (std::size_t i = 0; i < cfg.reps; ++i) {
            MemoryStats::reset_peak();
            const std::size_t base = MemoryStats::current();
            times.push_back(one_step(variant, x, p, opts, se, opt, cfg.warmup + i, cfg.max_bytes));
            peak = std::max(peak, MemoryStats::peak() - base);
        }
        rec.peak_bytes = peak;
    } catch (const std::bad_alloc&) {
        rec.capped = true;
        rec.peak_bytes = cfg.max_bytes != 0 ? cfg.max_bytes : MemoryStats::peak();
        return rec;
    }
    std::sort(times.begin(), times.end());
    rec.reps = times.size();
    rec.min_s = times.front();
    rec.max_s = times.back();
    const std::size_t n = times.size();
    rec.median_s = n % 2 == 1 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
    return rec;
}

std::vector<ProfileRecord> profile_grid(std::span<const AttentionVariant> variants, std::span<const std::size_t> lengths,
                                        const ProfileConfig& cfg) {
    std::vector<ProfileRecord> out;
    for (auto v : variants) {
        for (auto L : lengths) {
            out.push_back(profile_step(v, L, cfg));
        }
    }
    return out;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw InputError("slope needs two equally sized series of at least 2 points");
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0) || !(y[i] > 0.0)) {
            throw InputError("log-log slope needs positive values");
        }
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(y.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    if (sxx == 0.0) {
        throw InputError("log-log slope: x values are all equal");
    }
    return sxy / sxx;
}

namespace {

std::vector<double> ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) {
            r[idx[t]] = avg;
        }
        i = j + 1;
    }
    return r;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw InputError("spearman needs two equally sized series of at least 2 points");
    }
    const auto rx = ranks(x);
    const auto ry = ranks(y);
    const double n = static_cast<double>(x.size());
    const double mean = (n + 1.0) / 2.0;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mean) * (ry[i] - mean);
        sxx += (rx[i] - mean) * (rx[i] - mean);
        syy += (ry[i] - mean) * (ry[i] - mean);
    }
    if (sxx == 0.0 || syy == 0.0) {
        return 0.0;
    }
    return sxy / std::sqrt(sxx * syy);
}

void write_profile_csv(std::ostream& out, std::span<const ProfileRecord> records) {
    out << "variant,L,M,S,k,median_s,min_s,max_s,peak_bytes,analytic_ops\n";
    out.precision(9);
    for (const auto& r : records) {
        out << to_string(r.variant) << ',' << r.L << ',' << r.M << ',' << r.S << ',' << r.k << ',';
        if (r.capped) {
            out << "capped,capped,capped,";
        } else {
            out << r.median_s << ',' << r.min_s << ',' << r.max_s << ',';
        }
        out << r.peak_bytes << ',' << std::llround(r.analytic_ops) << '\n';
    }
}

}  // namespace spanattn
