// SPDX-License-Identifier: Apache-2.0
#include "spanattn/attention.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "spanattn/errors.hpp"

namespace spanattn {

template <typename T>
AttentionParams<T> AttentionParams<T>::random(std::size_t d, std::size_t d_model, std::size_t heads, Rng& rng) {
    AttentionParams p;
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double out_std = 1.0 / std::sqrt(static_cast<double>(d_model));
    p.wq = Tensor<T>::randn({d, d_model}, rng, in_std);
    p.wk = Tensor<T>::randn({d, d_model}, rng, in_std);
    p.wv = Tensor<T>::randn({d, d_model}, rng, in_std);
    p.wo = Tensor<T>::randn({d_model, d}, rng, out_std);
    p.heads = heads;
    p.validate();
    return p;
}

template <typename T>
void AttentionParams<T>::validate() const {
    if (wq.rank() != 2 || wk.shape() != wq.shape() || wv.shape() != wq.shape()) {
        throw DimensionError("attention: W_Q/W_K/W_V must share shape [d x d_model]");
    }
    if (wo.rank() != 2 || wo.rows() != wq.cols() || wo.cols() != wq.rows()) {
        throw DimensionError("attention: W_o must be [d_model x d], got " + shape_str(wo.shape()));
    }
    if (heads == 0 || wq.cols() % heads != 0) {
        throw ConfigError("attention: d_model " + std::to_string(wq.cols()) + " not divisible by head count " +
                          std::to_string(heads));
    }
}

RopeConfig AttentionOptions::rope_for(std::size_t d_model) const {
    if (heads == 0 || d_model % heads != 0) {
        throw ConfigError("attention: d_model " + std::to_string(d_model) + " not divisible by head count " +
                          std::to_string(heads));
    }
    RopeConfig cfg;
    cfg.base = rope_base;
    cfg.group = d_model / heads;
    cfg.position_scale = rope_position_scale;
    return cfg;
}

template <typename T>
AttentionVars<T> bind(Tape<T>& tape, AttentionParams<T>& p) {
    return {tape.param(p.wq), tape.param(p.wk), tape.param(p.wv), tape.param(p.wo)};
}

template <typename T>
Projection<T> project_qkv(Var<T> x, const AttentionVars<T>& w, const AttentionOptions& opts) {
    Projection<T> out{matmul(x, w.wq), matmul(x, w.wk), matmul(x, w.wv)};
    if (opts.use_rope) {
        const std::size_t len = x.rows();
        std::vector<std::size_t> pos(len);
        std::iota(pos.begin(), pos.end(), std::size_t{0});
        const RopeConfig cfg = opts.rope_for(out.q.cols());
        out.q = rope_embed(out.q, pos, cfg);
        out.k = rope_embed(out.k, pos, cfg);
    }
    return out;
}

template <typename T>
Var<T> multi_head_attend(Var<T> q, Var<T> k, Var<T> v, const AdditiveMask& mask, std::size_t heads,
                         std::vector<bool>* fully_masked) {
    const std::size_t d_model = q.cols();
    if (heads == 0 || d_model % heads != 0) {
        throw ConfigError("attention: d_model " + std::to_string(d_model) + " not divisible by head count " +
                          std::to_string(heads));
    }
    const std::size_t hd = d_model / heads;
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(hd));
    if (heads == 1) {
        auto probs = masked_softmax(scale(matmul_nt(q, k), inv_sqrt), mask, fully_masked);
        return matmul(probs, v);
    }
    std::vector<Var<T>> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        auto qh = slice_cols(q, h * hd, (h + 1) * hd);
        auto kh = slice_cols(k, h * hd, (h + 1) * hd);
        auto vh = slice_cols(v, h * hd, (h + 1) * hd);
        auto probs = masked_softmax(scale(matmul_nt(qh, kh), inv_sqrt), mask, h == 0 ? fully_masked : nullptr);
        outs.push_back(matmul(probs, vh));
    }
    return concat_cols<T>(outs);
}

AdditiveMask causal_mask(std::size_t len) {
    AdditiveMask m(len, len);
    for (std::size_t t = 0; t < len; ++t) {
        m.set_row_range(t, 0, t + 1);
    }
    return m;
}

AdditiveMask full_mask(std::size_t len) {
    return AdditiveMask(len, len, true);
}

AdditiveMask sliding_window_mask(std::size_t len, std::size_t window) {
    if (window == 0) {
        throw ConfigError("sliding window must be at least 1 token");
    }
    AdditiveMask m(len, len);
    for (std::size_t t = 0; t < len; ++t) {
        m.set_row_range(t, t + 1 >= window ? t + 1 - window : 0, t + 1);
    }
    return m;
}

AdditiveMask block_diagonal_mask(std::size_t len, std::size_t chunk) {
    if (chunk == 0) {
        throw ConfigError("chunk size must be at least 1 token");
    }
    AdditiveMask m(len, len);
    for (std::size_t t = 0; t < len; ++t) {
        m.set_row_range(t, (t / chunk) * chunk, t + 1);
    }
    return m;
}

template <typename T>
Var<T> full_attention(Var<T> x, const AttentionVars<T>& w, const AttentionOptions& opts, bool causal) {
    auto p = project_qkv(x, w, opts);
    const std::size_t len = x.rows();
    auto heads_out = multi_head_attend(p.q, p.k, p.v, causal ? causal_mask(len) : full_mask(len), opts.heads);
    return matmul(heads_out, w.wo);
}

template <typename T>
Var<T> sliding_window_attention(Var<T> x, const AttentionVars<T>& w, const AttentionOptions& opts,
                                std::size_t window) {
    if (window == 0) {
        throw ConfigError("sliding window must be at least 1 token");
    }
    auto p = project_qkv(x, w, opts);
    const std::size_t len = x.rows();
    // Queries are processed in blocks of `window` rows; each block only
    // needs keys from (block start - window + 1) to the block end.
    std::vector<Var<T>> blocks;
    for (std::size_t qs = 0; qs < len; qs += window) {
        const std::size_t qe = std::min(len, qs + window);
        const std::size_t ks = qs + 1 >= window ? qs + 1 - window : 0;
        AdditiveMask m(qe - qs, qe - ks);
        for (std::size_t t = qs; t < qe; ++t) {
            const std::size_t lo = t + 1 >= window ? t + 1 - window : 0;
            m.set_row_range(t - qs, lo - ks, t + 1 - ks);
        }
        blocks.push_back(multi_head_attend(slice_rows(p.q, qs, qe), slice_rows(p.k, ks, qe), slice_rows(p.v, ks, qe),
                                           m, opts.heads));
    }
    auto heads_out = blocks.size() == 1 ? blocks[0] : concat_rows<T>(blocks);
    return matmul(heads_out, w.wo);
}

template <typename T>
Var<T> block_diagonal_attention(Var<T> x, const AttentionVars<T>& w, const AttentionOptions& opts,
                                std::size_t chunk) {
    if (chunk == 0) {
        throw ConfigError("chunk size must be at least 1 token");
    }
    auto p = project_qkv(x, w, opts);
    const std::size_t len = x.rows();
    std::vector<Var<T>> chunks;
    for (std::size_t cs = 0; cs < len; cs += chunk) {
        const std::size_t ce = std::min(len, cs + chunk);
        chunks.push_back(multi_head_attend(slice_rows(p.q, cs, ce), slice_rows(p.k, cs, ce), slice_rows(p.v, cs, ce),
                                           causal_mask(ce - cs), opts.heads));
    }
    auto heads_out = chunks.size() == 1 ? chunks[0] : concat_rows<T>(chunks);
    return matmul(heads_out, w.wo);
}

template <typename T>
Var<T> masked_oracle_attention(Var<T> x, const AttentionVars<T>& w, const AttentionOptions& opts,
                               const AdditiveMask& mask) {
    const std::size_t len = x.rows();
    if (mask.rows() != len || mask.cols() != len) {
        throw DimensionError("oracle attention: mask must be " + std::to_string(len) + "x" + std::to_string(len));
    }
    for (std::size_t t = 0; t < len; ++t) {
        if (mask.visible_count(t) == 0) {
            throw InvariantError("oracle attention: query " + std::to_string(t) + " sees no key");
        }
    }
    auto p = project_qkv(x, w, opts);
    return matmul(multi_head_attend(p.q, p.k, p.v, mask, opts.heads), w.wo);
}

template <typename T>
Tensor<T> full_attention(const Tensor<T>& x, AttentionParams<T>& p, const AttentionOptions& opts, bool causal) {
    Tape<T> tape;
    return full_attention(tape.constant(x), bind(tape, p), opts, causal).value();
}

template <typename T>
Tensor<T> sliding_window_attention(const Tensor<T>& x, AttentionParams<T>& p, const AttentionOptions& opts,
                                   std::size_t window) {
    Tape<T> tape;
    return sliding_window_attention(tape.constant(x), bind(tape, p), opts, window).value();
}

template <typename T>
Tensor<T> block_diagonal_attention(const Tensor<T>& x, AttentionParams<T>& p, const AttentionOptions& opts,
                                   std::size_t chunk) {
    Tape<T> tape;
    return block_diagonal_attention(tape.constant(x), bind(tape, p), opts, chunk).value();
}

template <typename T>
Tensor<T> masked_oracle_attention(const Tensor<T>& x, AttentionParams<T>& p, const AttentionOptions& opts,
                                  const AdditiveMask& mask) {
    Tape<T> tape;
    return masked_oracle_attention(tape.constant(x), bind(tape, p), opts, mask).value();
}

template <typename T>
std::vector<Tensor<T>> attention_weights(const Tensor<T>& x, AttentionParams<T>& p, const AttentionOptions& opts,
                                         const AdditiveMask& mask) {
    Tape<T> tape;
    auto proj = project_qkv(tape.constant(x), bind(tape, p), opts);
    const std::size_t hd = proj.q.cols() / opts.heads;
    std::vector<Tensor<T>> out;
    for (std::size_t h = 0; h < opts.heads; ++h) {
        auto qh = slice_cols(proj.q, h * hd, (h + 1) * hd);
        auto kh = slice_cols(proj.k, h * hd, (h + 1) * hd);
        auto scores = scale(matmul_nt(qh, kh), T{1} / std::sqrt(static_cast<T>(hd)));
        out.push_back(masked_softmax(scores, mask).value());
    }
    return out;
}

#define SPANATTN_INSTANTIATE(T)                                                                                    \
    template struct AttentionParams<T>;                                                                           \
    template AttentionVars<T> bind<T>(Tape<T>&, AttentionParams<T>&);                                             \
    template Projection<T> project_qkv<T>(Var<T>, const AttentionVars<T>&, const AttentionOptions&);              \
    template Var<T> multi_head_attend<T>(Var<T>, Var<T>, Var<T>, const AdditiveMask&, std::size_t,                \
                                         std::vector<bool>*);                                                     \
    template Var<T> full_attention<T>(Var<T>, const AttentionVars<T>&, const AttentionOptions&, bool);            \
    template Var<T> sliding_window_attention<T>(Var<T>, const AttentionVars<T>&, const AttentionOptions&,         \
                                                std::size_t);                                                     \
    template Var<T> block_diagonal_attention<T>(Var<T>, const AttentionVars<T>&, const AttentionOptions&,         \
                                                std::size_t);                                                     \
    template Var<T> masked_oracle_attention<T>(Var<T>, const AttentionVars<T>&, const AttentionOptions&,          \
                                               const AdditiveMask&);                                              \
    template Tensor<T> full_attention<T>(const Tensor<T>&, AttentionParams<T>&, const AttentionOptions&, bool);   \
    template Tensor<T> sliding_window_attention<T>(const Tensor<T>&, AttentionParams<T>&,                         \
                                                   const AttentionOptions&, std::size_t);                         \
    template Tensor<T> block_diagonal_attention<T>(const Tensor<T>&, AttentionParams<T>&,                         \
                                                   const AttentionOptions&, std::size_t);                         \
    template Tensor<T> masked_oracle_attention<T>(const Tensor<T>&, AttentionParams<T>&, const AttentionOptions&, \
                                                  const AdditiveMask&);                                           \
    template std::vector<Tensor<T>> attention_weights<T>(const Tensor<T>&, AttentionParams<T>&,                   \
                                                         const AttentionOptions&, const AdditiveMask&);

SPANATTN_INSTANTIATE(float)
SPANATTN_INSTANTIATE(double)
#undef SPANATTN_INSTANTIATE

}  // namespace spanattn
