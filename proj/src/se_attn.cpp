// SPDX-License-Identifier: Apache-2.0
#include "spanattn/se_attn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "json.hpp"

#include "spanattn/errors.hpp"

namespace spanattn {

namespace {

constexpr std::uint64_t kChunkStream = 0x43;
constexpr std::uint64_t kSelectStream = 0x53;
constexpr std::uint64_t kLandmarkStream = 0x4c;

template <typename T>
Tensor<T> copy_rows(const Tensor<T>& src, std::size_t r0, std::size_t r1) {
    const std::size_t c = src.cols();
    Tensor<T> out({r1 - r0, c});
    std::copy(src.raw() + r0 * c, src.raw() + r1 * c, out.raw());
    return out;
}

template <typename T>
Tensor<T> copy_cols(const Tensor<T>& src, std::size_t c0, std::size_t c1) {
    Tensor<T> out({src.rows(), c1 - c0});
    for (std::size_t r = 0; r < src.rows(); ++r) {
        for (std::size_t c = c0; c < c1; ++c) {
            out(r, c - c0) = src(r, c);
        }
    }
    return out;
}

// Mean row of softmax(q k^T / sqrt(width)) v with no mask.
template <typename T>
void attention_mean(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, T* out) {
    auto scores = kernels::matmul_nt(q, k);
    const T s = T{1} / std::sqrt(static_cast<T>(q.cols()));
    for (auto& e : scores.data()) {
        e *= s;
    }
    auto probs = kernels::masked_softmax(scores, nullptr).probs;
    auto a = kernels::matmul(probs, v);
    const std::size_t rows = a.rows();
    for (std::size_t c = 0; c < a.cols(); ++c) {
        T acc{0};
        for (std::size_t r = 0; r < rows; ++r) {
            acc += a(r, c);
        }
        out[c] = acc / static_cast<T>(rows);
    }
}

std::size_t ceil_div(std::size_t a, std::size_t b) {
    return (a + b - 1) / b;
}

}  // namespace

std::string_view to_string(SEVariant v) {
    switch (v) {
        case SEVariant::Standard: return "se";
        case SEVariant::NoMem: return "se_nomem";
        case SEVariant::Random: return "se_random";
        case SEVariant::Landmark: return "se_landmark";
    }
    return "se";
}

SEVariant parse_se_variant(std::string_view name) {
    for (auto v : {SEVariant::Standard, SEVariant::NoMem, SEVariant::Random, SEVariant::Landmark}) {
        if (to_string(v) == name) {
            return v;
        }
    }
    throw ConfigError("unknown SE-Attn variant '" + std::string(name) + "'");
}

void SEAttnConfig::validate() const {
    if (block_size == 0) {
        throw ConfigError("se_attn: block size must be at least 1");
    }
    if (chunk_sizes.empty()) {
        throw ConfigError("se_attn: chunk size set is empty");
    }
    for (auto m : chunk_sizes) {
        if (m < block_size) {
            throw ConfigError("se_attn: chunk size " + std::to_string(m) + " is smaller than block size " +
                              std::to_string(block_size));
        }
    }
}

template <typename T>
std::vector<MemoryBlock<T>> split_memory_blocks(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                                std::size_t block_size) {
    if (block_size == 0) {
        throw ConfigError("se_attn: block size must be at least 1");
    }
    if (k.shape() != q.shape() || v.rows() != q.rows()) {
        throw DimensionError("se_attn: Q/K/V row counts differ");
    }
    const std::size_t len = q.rows();
    std::vector<MemoryBlock<T>> blocks;
    blocks.reserve(ceil_div(len, block_size));
    for (std::size_t s = 0; s < len; s += block_size) {
        MemoryBlock<T> b;
        b.index = blocks.size();
        b.start = s;
        b.end = std::min(len, s + block_size);
        b.q = copy_rows(q, b.start, b.end);
        b.k = copy_rows(k, b.start, b.end);
        b.v = copy_rows(v, b.start, b.end);
        blocks.push_back(std::move(b));
    }
    return blocks;
}

template <typename T>
Tensor<T> summarize_block(const MemoryBlock<T>& block, std::size_t heads) {
    const std::size_t dm = block.k.cols();
    if (heads == 0 || dm % heads != 0) {
        throw ConfigError("se_attn: d_model not divisible by head count");
    }
    Tensor<T> c({dm});
    if (heads == 1) {
        attention_mean(block.q, block.k, block.v, c.raw());
        return c;
    }
    const std::size_t hd = dm / heads;
    for (std::size_t h = 0; h < heads; ++h) {
        attention_mean(copy_cols(block.q, h * hd, (h + 1) * hd), copy_cols(block.k, h * hd, (h + 1) * hd),
                       copy_cols(block.v, h * hd, (h + 1) * hd), c.raw() + h * hd);
    }
    return c;
}

template <typename T>
Tensor<T> landmark_summarize(const MemoryBlock<T>& block, const Tensor<T>& landmark) {
    if (landmark.numel() != block.k.cols()) {
        throw DimensionError("se_attn: landmark width " + std::to_string(landmark.numel()) + " != d_model " +
                             std::to_string(block.k.cols()));
    }
    Tensor<T> c({block.k.cols()});
    attention_mean(landmark.reshaped({1, landmark.numel()}), block.k, block.v, c.raw());
    return c;
}

template <typename T>
Tensor<T> landmark_vector(std::size_t d_model, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {kLandmarkStream}));
    return Tensor<T>::randn({d_model}, rng, 1.0);
}

template <typename T>
std::size_t past_block_count(const std::vector<MemoryBlock<T>>& blocks, std::size_t chunk_start) {
    std::size_t n = 0;
    while (n < blocks.size() && blocks[n].end <= chunk_start) {
        ++n;
    }
    return n;
}

template <typename T>
RelevancyResult<T> relevancy_scores(const Tensor<T>& q_chunk, const std::vector<MemoryBlock<T>>& blocks,
                                    std::size_t chunk_start) {
    RelevancyResult<T> res;
    res.scores.assign(blocks.size(), T{0});
    res.past = past_block_count(blocks, chunk_start);
    if (res.past == 0) {
        res.fully_masked = true;
        return res;
    }
    const std::size_t dm = q_chunk.cols();
    // sum_t (Q_i c_j)_t == (sum_t Q_i[t]) . c_j
    std::vector<T> qsum(dm, T{0});
    for (std::size_t r = 0; r < q_chunk.rows(); ++r) {
        for (std::size_t c = 0; c < dm; ++c) {
            qsum[c] += q_chunk(r, c);
        }
    }
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dm));
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < res.past; ++j) {
        const auto& cj = blocks[j].summary;
        if (cj.numel() != dm) {
            throw DimensionError("se_attn: block " + std::to_string(j) + " has no summary of width d_model");
        }
        T r{0};
        for (std::size_t c = 0; c < dm; ++c) {
            r += qsum[c] * cj[c];
        }
        res.scores[j] = r * inv_sqrt;
        mx = std::max(mx, res.scores[j]);
    }
    T z{0};
    for (std::size_t j = 0; j < res.past; ++j) {
        res.scores[j] = std::exp(res.scores[j] - mx);
        z += res.scores[j];
    }
    for (std::size_t j = 0; j < res.past; ++j) {
        res.scores[j] /= z;
    }
    return res;
}

template <typename T>
std::vector<std::size_t> select_top_k(std::span<const T> scores, std::size_t past, std::size_t k, SEVariant variant,
                                      Rng& rng) {
    std::vector<std::size_t> out;
    if (variant == SEVariant::NoMem || k == 0 || past == 0) {
        return out;
    }
    std::vector<std::size_t> idx(past);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t take = std::min(k, past);
    if (variant == SEVariant::Random) {
        // Partial Fisher-Yates: the first `take` slots are a uniform draw
        // without replacement.
        for (std::size_t i = 0; i < take; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, past - 1);
            std::swap(idx[i], idx[pick(rng)]);
        }
    } else {
        if (scores.size() < past) {
            throw DimensionError("se_attn: fewer scores than past blocks");
        }
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    }
    out.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    std::sort(out.begin(), out.end());
    return out;
}

std::string RetrievalTrace::to_json() const {
    nlohmann::json j;
    j["length"] = length;
    j["chunk_size"] = chunk_size;
    j["block_size"] = block_size;
    j["top_k"] = top_k;
    j["variant"] = std::string(to_string(variant));
    j["chunks"] = nlohmann::json::array();
    for (const auto& c : chunks) {
        nlohmann::json cj;
        cj["index"] = c.index;
        cj["start"] = c.start;
        cj["end"] = c.end;
        cj["past_blocks"] = c.past_blocks;
        cj["fully_masked"] = c.fully_masked;
        cj["relevancy"] = c.relevancy;
        cj["selected"] = c.selected;
        j["chunks"].push_back(std::move(cj));
    }
    return j.dump();
}

RetrievalTrace RetrievalTrace::from_json(std::string_view text) {
    RetrievalTrace t;
    try {
        auto j = nlohmann::json::parse(text);
        t.length = j.at("length").get<std::size_t>();
        t.chunk_size = j.at("chunk_size").get<std::size_t>();
        t.block_size = j.at("block_size").get<std::size_t>();
        t.top_k = j.at("top_k").get<std::size_t>();
        t.variant = parse_se_variant(j.at("variant").get<std::string>());
        for (const auto& cj : j.at("chunks")) {
            ChunkTrace c;
            c.index = cj.at("index").get<std::size_t>();
            c.start = cj.at("start").get<std::size_t>();
            c.end = cj.at("end").get<std::size_t>();
            c.past_blocks = cj.at("past_blocks").get<std::size_t>();
            c.fully_masked = cj.at("fully_masked").get<bool>();
            c.relevancy = cj.at("relevancy").get<std::vector<double>>();
            c.selected = cj.at("selected").get<std::vector<std::size_t>>();
            t.chunks.push_back(std::move(c));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("retrieval trace: ") + e.what());
    }
    return t;
}

void validate_trace(const RetrievalTrace& trace) {
    if (trace.chunk_size == 0 || trace.block_size == 0) {
        throw InvariantError("trace: chunk and block sizes must be positive");
    }
    const std::size_t expected = trace.length == 0 ? 0 : ceil_div(trace.length, trace.chunk_size);
    if (trace.chunks.size() != expected) {
        throw InvariantError("trace: expected " + std::to_string(expected) + " chunks, found " +
                             std::to_string(trace.chunks.size()));
    }
    const std::size_t num_blocks = trace.num_blocks();
    for (std::size_t i = 0; i < trace.chunks.size(); ++i) {
        const auto& c = trace.chunks[i];
        const std::size_t start = i * trace.chunk_size;
        const std::size_t end = std::min(trace.length, start + trace.chunk_size);
        if (c.index != i || c.start != start || c.end != end) {
            throw InvariantError("trace: chunk " + std::to_string(i) + " range does not tile the sequence");
        }
        const std::size_t past = std::min(num_blocks, start / trace.block_size);
        if (c.past_blocks != past) {
            throw InvariantError("trace: chunk " + std::to_string(i) + " past-block count mismatch");
        }
        if (c.selected.size() > trace.top_k) {
            throw InvariantError("trace: chunk " + std::to_string(i) + " selects more than top_k blocks");
        }
        for (std::size_t s = 0; s < c.selected.size(); ++s) {
            const std::size_t j = c.selected[s];
            const std::size_t block_end = std::min(trace.length, (j + 1) * trace.block_size);
            if (j >= num_blocks || block_end > start) {
                throw InvariantError("trace: chunk " + std::to_string(i) + " selects block " + std::to_string(j) +
                                     " which is not strictly in its past");
            }
            if (s > 0 && c.selected[s - 1] >= j) {
                throw InvariantError("trace: chunk " + std::to_string(i) + " selection not strictly ascending");
            }
        }
    }
}

AdditiveMask trace_pattern(const RetrievalTrace& trace, std::size_t length, std::size_t chunk_size,
                           std::size_t block_size) {
    if (trace.length != length || trace.chunk_size != chunk_size || trace.block_size != block_size) {
        throw InvariantError("trace: geometry (L, M, S) does not match the trace");
    }
    return trace_pattern(trace);
}

AdditiveMask trace_pattern(const RetrievalTrace& trace) {
    validate_trace(trace);
    const std::size_t len = trace.length;
    const std::size_t bs = trace.block_size;
    AdditiveMask m(len, len);
    for (const auto& c : trace.chunks) {
        for (std::size_t t = c.start; t < c.end; ++t) {
            m.set_row_range(t, c.start, t + 1);
            for (auto j : c.selected) {
                m.set_row_range(t, j * bs, std::min(len, (j + 1) * bs));
            }
        }
    }
    return m;
}

std::size_t draw_chunk_size(const SEAttnConfig& cfg, std::uint64_t layer, std::uint64_t step) {
    cfg.validate();
    if (cfg.chunk_sizes.size() == 1) {
        return cfg.chunk_sizes.front();
    }
    Rng rng(derive_seed(cfg.seed, {kChunkStream, layer, step}));
    std::uniform_int_distribution<std::size_t> pick(0, cfg.chunk_sizes.size() - 1);
    return cfg.chunk_sizes[pick(rng)];
}

template <typename T>
SEAttnOutput<T> se_attn_forward(Var<T> x, const AttentionVars<T>& w, const AttentionOptions& opts,
                                const SEAttnConfig& cfg, const SECallContext& ctx) {
    cfg.validate();
    const std::size_t len = x.rows();
    if (len == 0) {
        throw DimensionError("se_attn: empty sequence");
    }
    auto proj = project_qkv(x, w, opts);
    const std::size_t bs = cfg.block_size;

    RetrievalTrace trace;
    trace.length = len;
    trace.block_size = bs;
    trace.top_k = cfg.top_k;
    trace.variant = cfg.variant;
    if (ctx.forced != nullptr) {
        if (ctx.forced->length != len || ctx.forced->block_size != bs) {
            throw InvariantError("se_attn: forced trace geometry does not match the input");
        }
        validate_trace(*ctx.forced);
        trace.chunk_size = ctx.forced->chunk_size;
        trace.top_k = ctx.forced->top_k;
    } else {
        trace.chunk_size = draw_chunk_size(cfg, ctx.layer, ctx.step);
    }
    const std::size_t chunk = trace.chunk_size;
    const std::size_t num_blocks = ceil_div(len, bs);

    // Retrieval runs on values only; the discrete selection carries no gradient.
    const bool scored = ctx.forced == nullptr && cfg.top_k > 0 &&
                        (cfg.variant == SEVariant::Standard || cfg.variant == SEVariant::Landmark);
    std::vector<MemoryBlock<T>> blocks;
    if (scored && len > chunk) {
        blocks = split_memory_blocks(proj.q.value(), proj.k.value(), proj.v.value(), bs);
        const Tensor<T> landmark =
            cfg.variant == SEVariant::Landmark ? landmark_vector<T>(proj.k.cols(), cfg.seed) : Tensor<T>();
        for (auto& b : blocks) {
            b.summary = cfg.variant == SEVariant::Landmark
                            ? landmark_summarize(b, landmark)
                            : summarize_block(b, cfg.per_head_summary ? opts.heads : 1);
        }
    }
    Rng sel_rng(derive_seed(cfg.seed, {kSelectStream, ctx.layer, ctx.step}));

    std::vector<Var<T>> outs;
    for (std::size_t cs = 0, i = 0; cs < len; cs += chunk, ++i) {
        const std::size_t ce = std::min(len, cs + chunk);
        ChunkTrace ct;
        ct.index = i;
        ct.start = cs;
        ct.end = ce;
        ct.past_blocks = std::min(num_blocks, cs / bs);
        ct.fully_masked = ct.past_blocks == 0;
        if (ctx.forced != nullptr) {
            ct.relevancy = ctx.forced->chunks[i].relevancy;
            ct.selected = ctx.forced->chunks[i].selected;
        } else if (scored && !ct.fully_masked) {
            auto rel = relevancy_scores(copy_rows(proj.q.value(), cs, ce), blocks, cs);
            ct.relevancy.assign(rel.scores.begin(), rel.scores.end());
            ct.selected = select_top_k<T>(rel.scores, rel.past, cfg.top_k, cfg.variant, sel_rng);
        } else {
            ct.selected = select_top_k<T>({}, ct.past_blocks, cfg.top_k, cfg.variant, sel_rng);
        }

        const std::size_t m = ce - cs;
        std::vector<std::size_t> rows;
        for (auto j : ct.selected) {
            for (std::size_t r = j * bs; r < std::min(len, (j + 1) * bs); ++r) {
                rows.push_back(r);
            }
        }
        const std::size_t n_mem = rows.size();
        AdditiveMask mask(m, n_mem + m);
        for (std::size_t r = 0; r < m; ++r) {
            mask.set_row_range(r, 0, n_mem + r + 1);
        }
        auto qi = slice_rows(proj.q, cs, ce);
        Var<T> ki;
        Var<T> vi;
        if (n_mem == 0) {
            ki = slice_rows(proj.k, cs, ce);
            vi = slice_rows(proj.v, cs, ce);
        } else {
            for (std::size_t r = cs; r < ce; ++r) {
                rows.push_back(r);
            }
            ki = gather_rows<T>(proj.k, rows);
            vi = gather_rows<T>(proj.v, rows);
        }
        outs.push_back(multi_head_attend(qi, ki, vi, mask, opts.heads));
        trace.chunks.push_back(std::move(ct));
    }
    auto heads_out = outs.size() == 1 ? outs[0] : concat_rows<T>(outs);
    return {matmul(heads_out, w.wo), std::move(trace)};
}

template <typename T>
SEAttnResult<T> se_attn_forward(const Tensor<T>& x, AttentionParams<T>& p, const AttentionOptions& opts,
                                const SEAttnConfig& cfg, const SECallContext& ctx) {
    Tape<T> tape;
    auto r = se_attn_forward(tape.constant(x), bind(tape, p), opts, cfg, ctx);
    return {r.out.value(), std::move(r.trace)};
}

#define SPANATTN_INSTANTIATE(T)                                                                                  \
    template std::vector<MemoryBlock<T>> split_memory_blocks<T>(const Tensor<T>&, const Tensor<T>&,             \
                                                                const Tensor<T>&, std::size_t);                 \
    template Tensor<T> summarize_block<T>(const MemoryBlock<T>&, std::size_t);                                  \
    template Tensor<T> landmark_summarize<T>(const MemoryBlock<T>&, const Tensor<T>&);                          \
    template Tensor<T> landmark_vector<T>(std::size_t, std::uint64_t);                                          \
    template std::size_t past_block_count<T>(const std::vector<MemoryBlock<T>>&, std::size_t);                  \
    template RelevancyResult<T> relevancy_scores<T>(const Tensor<T>&, const std::vector<MemoryBlock<T>>&,       \
                                                    std::size_t);                                               \
    template std::vector<std::size_t> select_top_k<T>(std::span<const T>, std::size_t, std::size_t, SEVariant, \
                                                      Rng&);                                                    \
    template SEAttnOutput<T> se_attn_forward<T>(Var<T>, const AttentionVars<T>&, const AttentionOptions&,       \
                                                const SEAttnConfig&, const SECallContext&);                     \
    template SEAttnResult<T> se_attn_forward<T>(const Tensor<T>&, AttentionParams<T>&, const AttentionOptions&, \
                                                const SEAttnConfig&, const SECallContext&);

SPANATTN_INSTANTIATE(float)
SPANATTN_INSTANTIATE(double)
#undef SPANATTN_INSTANTIATE

}  // namespace spanattn
