// SPDX-License-Identifier: Apache-2.0
#include "spanattn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "spanattn/errors.hpp"

namespace spanattn {

namespace {

template <typename T>
Tape<T>& tape_of(const Var<T>& v) {
    if (!v.valid()) {
        throw UsageError("operation on an unbound Var");
    }
    return *v.tape();
}

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b) {
    if (a.tape() != b.tape()) {
        throw UsageError("operands recorded on different tapes");
    }
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
    }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

template <typename T>
T sigmoid_scalar(T x) {
    return x >= 0 ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    same_tape(a, b);
    auto& tape = tape_of(a);
    Tensor<T> out = kernels::matmul(a.value(), b.value());
    const std::uint32_t ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, std::uint32_t self) {
        const auto& av = tp.value(ia);
        const auto& bv = tp.value(ib);
        const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
        const T* g = tp.grad(self).data();
        if (auto ga = tp.grad_sink(ia); !ga.empty()) {
            kernels::gemm(g, bv.raw(), ga.data(), m, n, k, false, true, true);
        }
        if (auto gb = tp.grad_sink(ib); !gb.empty()) {
            kernels::gemm(av.raw(), g, gb.data(), k, m, n, true, false, true);
        }
    });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
    same_tape(a, b);
    auto& tape = tape_of(a);
    Tensor<T> out = kernels::matmul_nt(a.value(), b.value());
    const std::uint32_t ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, std::uint32_t self) {
        const auto& av = tp.value(ia);
        const auto& bv = tp.value(ib);
        const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
        const T* g = tp.grad(self).data();
        if (auto ga = tp.grad_sink(ia); !ga.empty()) {
            kernels::gemm(g, bv.raw(), ga.data(), m, n, k, false, false, true);
        }
        if (auto gb = tp.grad_sink(ib); !gb.empty()) {
            kernels::gemm(g, av.raw(), gb.data(), n, m, k, true, false, true);
        }
    });
}

template <typename T>
Var<T> transpose(Var<T> a) {
    auto& tape = tape_of(a);
    const auto& av = a.value();
    require_matrix(av, "transpose");
    const std::size_t m = av.rows(), n = av.cols();
    Tensor<T> out({n, m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out(j, i) = av(i, j);
        }
    }
    const std::uint32_t ia = a.id();
    return tape.record(std::move(out), {a}, [ia, m, n](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        auto ga = tp.grad_sink(ia);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                ga[i * n + j] += g[j * m + i];
            }
        }
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    same_tape(a, b);
    auto& tape = tape_of(a);
    require_same_shape(a.value(), b.value(), "add");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] += bv[i];
    }
    const std::uint32_t ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        for (std::uint32_t id : {ia, ib}) {
            auto s = tp.grad_sink(id);
            for (std::size_t i = 0; i < s.size(); ++i) {
                s[i] += g[i];
            }
        }
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    same_tape(a, b);
    auto& tape = tape_of(a);
    require_same_shape(a.value(), b.value(), "sub");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] -= bv[i];
    }
    const std::uint32_t ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        if (auto s = tp.grad_sink(ia); !s.empty()) {
            for (std::size_t i = 0; i < s.size(); ++i) {
                s[i] += g[i];
            }
        }
        if (auto s = tp.grad_sink(ib); !s.empty()) {
            for (std::size_t i = 0; i < s.size(); ++i) {
                s[i] -= g[i];
            }
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    same_tape(a, b);
    auto& tape = tape_of(a);
    require_same_shape(a.value(), b.value(), "mul");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] *= bv[i];
    }
    const std::uint32_t ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        const auto& av = tp.value(ia);
        const auto& bv = tp.value(ib);
        if (auto s = tp.grad_sink(ia); !s.empty()) {
            for (std::size_t i = 0; i < s.size(); ++i) {
                s[i] += g[i] * bv[i];
            }
        }
        if (auto s = tp.grad_sink(ib); !s.empty()) {
            for (std::size_t i = 0; i < s.size(); ++i) {
                s[i] += g[i] * av[i];
            }
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
    auto& tape = tape_of(a);
    Tensor<T> out = a.value();
    for (auto& v : out.data()) {
        v *= factor;
    }
    const std::uint32_t ia = a.id();
    return tape.record(std::move(out), {a}, [ia, factor](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        auto s = tp.grad_sink(ia);
        for (std::size_t i = 0; i < s.size(); ++i) {
            s[i] += g[i] * factor;
        }
    });
}

template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
    same_tape(a, bias);
    auto& tape = tape_of(a);
    const auto& av = a.value();
    require_matrix(av, "add_bias");
    const std::size_t m = av.rows(), n = av.cols();
    if (bias.value().numel() != n) {
        throw DimensionError("add_bias: bias " + shape_str(bias.value().shape()) + " for " + shape_str(av.shape()));
    }
    Tensor<T> out = av;
    const auto& bv = bias.value();
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            out(r, c) += bv[c];
        }
    }
    const std::uint32_t ia = a.id(), ib = bias.id();
    return tape.record(std::move(out), {a, bias}, [ia, ib, m, n](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        if (auto s = tp.grad_sink(ia); !s.empty()) {
            for (std::size_t i = 0; i < s.size(); ++i) {
                s[i] += g[i];
            }
        }
        if (auto s = tp.grad_sink(ib); !s.empty()) {
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < n; ++c) {
                    s[c] += g[r * n + c];
                }
            }
        }
    });
}

template <typename T>
Var<T> mul_rowvec(Var<T> a, Var<T> v) {
    same_tape(a, v);
    auto& tape = tape_of(a);
    const auto& av = a.value();
    require_matrix(av, "mul_rowvec");
    const std::size_t m = av.rows(), n = av.cols();
    if (v.value().numel() != n) {
        throw DimensionError("mul_rowvec: vector " + shape_str(v.value().shape()) + " for " + shape_str(av.shape()));
    }
    Tensor<T> out = av;
    const auto& vv = v.value();
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            out(r, c) *= vv[c];
        }
    }
    const std::uint32_t ia = a.id(), iv = v.id();
    return tape.record(std::move(out), {a, v}, [ia, iv, m, n](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        const auto& av = tp.value(ia);
        const auto& vv = tp.value(iv);
        if (auto s = tp.grad_sink(ia); !s.empty()) {
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < n; ++c) {
                    s[r * n + c] += g[r * n + c] * vv[c];
                }
            }
        }
        if (auto s = tp.grad_sink(iv); !s.empty()) {
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < n; ++c) {
                    s[c] += g[r * n + c] * av[r * n + c];
                }
            }
        }
    });
}

template <typename T>
Var<T> sum(Var<T> a) {
    auto& tape = tape_of(a);
    T total = 0;
    for (T v : a.value().data()) {
        total += v;
    }
    const std::uint32_t ia = a.id();
    return tape.record(Tensor<T>::scalar(total), {a}, [ia](Tape<T>& tp, std::uint32_t self) {
        const T g = tp.grad(self)[0];
        for (auto& s : tp.grad_sink(ia)) {
            s += g;
        }
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    const std::size_t n = a.value().numel();
    if (n == 0) {
        throw DimensionError("mean of an empty tensor");
    }
    return scale(sum(a), T{1} / static_cast<T>(n));
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    auto& tape = tape_of(a);
    Tensor<T> out(a.value().shape());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = sigmoid_scalar(av[i]);
    }
    const std::uint32_t ia = a.id();
    return tape.record(std::move(out), {a}, [ia](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        const auto& y = tp.value(self);
        auto s = tp.grad_sink(ia);
        for (std::size_t i = 0; i < s.size(); ++i) {
            s[i] += g[i] * y[i] * (T{1} - y[i]);
        }
    });
}

template <typename T>
Var<T> silu(Var<T> a) {
    auto& tape = tape_of(a);
    Tensor<T> out(a.value().shape());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = av[i] * sigmoid_scalar(av[i]);
    }
    const std::uint32_t ia = a.id();
    return tape.record(std::move(out), {a}, [ia](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        const auto& x = tp.value(ia);
        auto s = tp.grad_sink(ia);
        for (std::size_t i = 0; i < s.size(); ++i) {
            const T sg = sigmoid_scalar(x[i]);
            s[i] += g[i] * (sg + x[i] * sg * (T{1} - sg));
        }
    });
}

template <typename T>
Var<T> rmsnorm(Var<T> x, Var<T> gain, T eps) {
    same_tape(x, gain);
    auto& tape = tape_of(x);
    const auto& xv = x.value();
    require_matrix(xv, "rmsnorm");
    const std::size_t m = xv.rows(), n = xv.cols();
    if (gain.value().numel() != n) {
        throw DimensionError("rmsnorm: gain " + shape_str(gain.value().shape()) + " for " + shape_str(xv.shape()));
    }
    const auto& gv = gain.value();
    Tensor<T> out(xv.shape());
    std::vector<T> inv_rms(m);
    for (std::size_t r = 0; r < m; ++r) {
        T ss = 0;
        for (std::size_t c = 0; c < n; ++c) {
            ss += xv(r, c) * xv(r, c);
        }
        inv_rms[r] = T{1} / std::sqrt(ss / static_cast<T>(n) + eps);
        for (std::size_t c = 0; c < n; ++c) {
            out(r, c) = xv(r, c) * inv_rms[r] * gv[c];
        }
    }
    const std::uint32_t ix = x.id(), ig = gain.id();
    return tape.record(std::move(out), {x, gain},
                       [ix, ig, m, n, inv = std::move(inv_rms)](Tape<T>& tp, std::uint32_t self) {
                           auto g = tp.grad(self);
                           const auto& xv = tp.value(ix);
                           const auto& gv = tp.value(ig);
                           auto gx = tp.grad_sink(ix);
                           auto gg = tp.grad_sink(ig);
                           for (std::size_t r = 0; r < m; ++r) {
                               const T ir = inv[r];
                               T dot = 0;
                               for (std::size_t c = 0; c < n; ++c) {
                                   dot += g[r * n + c] * gv[c] * xv(r, c);
                               }
                               for (std::size_t c = 0; c < n; ++c) {
                                   const T xc = xv(r, c);
                                   if (!gx.empty()) {
                                       gx[r * n + c] += ir * g[r * n + c] * gv[c] -
                                                        ir * ir * ir * xc * dot / static_cast<T>(n);
                                   }
                                   if (!gg.empty()) {
                                       gg[c] += g[r * n + c] * xc * ir;
                                   }
                               }
                           }
                       });
}

namespace {

template <typename T>
Var<T> softmax_impl(Var<T> scores, const AdditiveMask* mask, std::vector<bool>* fully_masked) {
    auto& tape = tape_of(scores);
    auto res = kernels::masked_softmax(scores.value(), mask);
    if (fully_masked) {
        *fully_masked = res.fully_masked;
    }
    const std::uint32_t is = scores.id();
    const std::size_t n = scores.value().shape().back();
    return tape.record(std::move(res.probs), {scores}, [is, n](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        const auto& p = tp.value(self);
        auto s = tp.grad_sink(is);
        const std::size_t rows = n == 0 ? 0 : p.numel() / n;
        for (std::size_t r = 0; r < rows; ++r) {
            T dot = 0;
            for (std::size_t c = 0; c < n; ++c) {
                dot += g[r * n + c] * p[r * n + c];
            }
            for (std::size_t c = 0; c < n; ++c) {
                s[r * n + c] += p[r * n + c] * (g[r * n + c] - dot);
            }
        }
    });
}

}  // namespace

template <typename T>
Var<T> masked_softmax(Var<T> scores, const AdditiveMask& mask, std::vector<bool>* fully_masked) {
    return softmax_impl(scores, &mask, fully_masked);
}

template <typename T>
Var<T> softmax(Var<T> scores) {
    return softmax_impl<T>(scores, nullptr, nullptr);
}

template <typename T>
Var<T> rope_embed(Var<T> x, std::span<const std::size_t> positions, const RopeConfig& cfg) {
    auto& tape = tape_of(x);
    Tensor<T> out = kernels::rope_embed(x.value(), positions, cfg);
    const std::uint32_t ix = x.id();
    const auto rows = x.value().rows();
    const auto cols = x.value().cols();
    std::vector<std::size_t> pos(positions.begin(), positions.end());
    return tape.record(std::move(out), {x},
                       [ix, rows, cols, cfg, pos = std::move(pos)](Tape<T>& tp, std::uint32_t self) {
                           // The rotation is orthogonal: its adjoint is the inverse rotation.
                           auto g = tp.grad(self);
                           Tensor<T> gt({rows, cols}, g);
                           Tensor<T> back = kernels::rope_embed(gt, pos, cfg, true);
                           auto s = tp.grad_sink(ix);
                           for (std::size_t i = 0; i < s.size(); ++i) {
                               s[i] += back[i];
                           }
                       });
}

template <typename T>
Var<T> causal_conv1d(Var<T> x, Var<T> kernel, Var<T> bias, std::size_t max_width) {
    same_tape(x, kernel);
    same_tape(x, bias);
    auto& tape = tape_of(x);
    Tensor<T> out = kernels::causal_conv1d(x.value(), kernel.value(), bias.value(), max_width);
    const std::uint32_t ix = x.id(), ik = kernel.id(), ib = bias.id();
    return tape.record(std::move(out), {x, kernel, bias}, [ix, ik, ib](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        const auto& xv = tp.value(ix);
        const auto& kv = tp.value(ik);
        const std::size_t len = xv.rows(), ch = xv.cols(), w = kv.rows();
        auto gx = tp.grad_sink(ix);
        auto gk = tp.grad_sink(ik);
        auto gb = tp.grad_sink(ib);
        for (std::size_t t = 0; t < len; ++t) {
            const T* gr = g.data() + t * ch;
            if (!gb.empty()) {
                for (std::size_t c = 0; c < ch; ++c) {
                    gb[c] += gr[c];
                }
            }
            for (std::size_t s = 0; s < w && s <= t; ++s) {
                const std::size_t src = t - s;
                for (std::size_t c = 0; c < ch; ++c) {
                    if (!gx.empty()) {
                        gx[src * ch + c] += gr[c] * kv(s, c);
                    }
                    if (!gk.empty()) {
                        gk[s * ch + c] += gr[c] * xv(src, c);
                    }
                }
            }
        }
    });
}

template <typename T>
Var<T> linear_recurrence(Var<T> u, Var<T> a, Var<T> b) {
    same_tape(u, a);
    same_tape(u, b);
    auto& tape = tape_of(u);
    const auto& uv = u.value();
    require_matrix(uv, "linear_recurrence");
    const std::size_t len = uv.rows(), ch = uv.cols();
    if (a.value().numel() != ch || b.value().numel() != ch) {
        throw DimensionError("linear_recurrence: decay/gain must have " + std::to_string(ch) + " channels");
    }
    const auto& av = a.value();
    const auto& bv = b.value();
    Tensor<T> h(uv.shape());
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t c = 0; c < ch; ++c) {
            const T prev = t ? h(t - 1, c) : T{0};
            h(t, c) = av[c] * prev + bv[c] * uv(t, c);
        }
    }
    const std::uint32_t iu = u.id(), ia = a.id(), ib = b.id();
    return tape.record(std::move(h), {u, a, b}, [iu, ia, ib, len, ch](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        const auto& hv = tp.value(self);
        const auto& uv = tp.value(iu);
        const auto& av = tp.value(ia);
        const auto& bv = tp.value(ib);
        auto gu = tp.grad_sink(iu);
        auto ga = tp.grad_sink(ia);
        auto gb = tp.grad_sink(ib);
        std::vector<T> carry(ch, T{0});
        for (std::size_t tt = len; tt-- > 0;) {
            for (std::size_t c = 0; c < ch; ++c) {
                // Total sensitivity of the loss to h_t, including the path through h_{t+1}.
                const T gh = g[tt * ch + c] + carry[c];
                if (!gu.empty()) {
                    gu[tt * ch + c] += gh * bv[c];
                }
                if (!gb.empty()) {
                    gb[c] += gh * uv(tt, c);
                }
                if (!ga.empty() && tt > 0) {
                    ga[c] += gh * hv(tt - 1, c);
                }
                carry[c] = gh * av[c];
            }
        }
    });
}

template <typename T>
Var<T> embedding(Var<T> table, std::span<const int> tokens) {
    auto& tape = tape_of(table);
    const auto& tv = table.value();
    require_matrix(tv, "embedding");
    const std::size_t vocab = tv.rows(), d = tv.cols();
    Tensor<T> out({tokens.size(), d});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= vocab) {
            throw InputError("token " + std::to_string(tokens[i]) + " outside vocabulary of " + std::to_string(vocab));
        }
        std::copy_n(tv.raw() + static_cast<std::size_t>(tokens[i]) * d, d, out.raw() + i * d);
    }
    const std::uint32_t it = table.id();
    std::vector<int> toks(tokens.begin(), tokens.end());
    return tape.record(std::move(out), {table}, [it, d, toks = std::move(toks)](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        auto s = tp.grad_sink(it);
        for (std::size_t i = 0; i < toks.size(); ++i) {
            T* dst = s.data() + static_cast<std::size_t>(toks[i]) * d;
            for (std::size_t c = 0; c < d; ++c) {
                dst[c] += g[i * d + c];
            }
        }
    });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets) {
    auto& tape = tape_of(logits);
    const auto& lv = logits.value();
    require_matrix(lv, "cross_entropy");
    const std::size_t rows = lv.rows(), vocab = lv.cols();
    if (targets.size() != rows) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(rows) + " rows");
    }
    auto probs = kernels::masked_softmax(lv, nullptr).probs;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const int tgt = targets[r];
        if (tgt == kIgnoreTarget) {
            continue;
        }
        if (tgt < 0 || static_cast<std::size_t>(tgt) >= vocab) {
            throw InputError("target " + std::to_string(tgt) + " outside vocabulary of " + std::to_string(vocab));
        }
        // log-softmax computed directly for accuracy.
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < vocab; ++c) {
            mx = std::max(mx, lv(r, c));
        }
        double z = 0.0;
        for (std::size_t c = 0; c < vocab; ++c) {
            z += std::exp(static_cast<double>(lv(r, c) - mx));
        }
        total += std::log(z) + static_cast<double>(mx) - static_cast<double>(lv(r, static_cast<std::size_t>(tgt)));
        ++count;
    }
    if (count == 0) {
        throw InputError("cross_entropy: every target is ignored");
    }
    const T loss = static_cast<T>(total / static_cast<double>(count));
    const std::uint32_t il = logits.id();
    std::vector<int> tg(targets.begin(), targets.end());
    return tape.record(Tensor<T>::scalar(loss), {logits},
                       [il, vocab, count, tg = std::move(tg), p = std::move(probs)](Tape<T>& tp, std::uint32_t self) {
                           const T g = tp.grad(self)[0] / static_cast<T>(count);
                           auto s = tp.grad_sink(il);
                           for (std::size_t r = 0; r < tg.size(); ++r) {
                               if (tg[r] == kIgnoreTarget) {
                                   continue;
                               }
                               for (std::size_t c = 0; c < vocab; ++c) {
                                   s[r * vocab + c] += g * p(r, c);
                               }
                               s[r * vocab + static_cast<std::size_t>(tg[r])] -= g;
                           }
                       });
}

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end) {
    auto& tape = tape_of(x);
    const auto& xv = x.value();
    require_matrix(xv, "slice_rows");
    if (begin > end || end > xv.rows()) {
        throw DimensionError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                             shape_str(xv.shape()));
    }
    const std::size_t n = xv.cols();
    Tensor<T> out({end - begin, n}, std::span<const T>(xv.raw() + begin * n, (end - begin) * n));
    const std::uint32_t ix = x.id();
    return tape.record(std::move(out), {x}, [ix, begin, n](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        auto s = tp.grad_sink(ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
            s[begin * n + i] += g[i];
        }
    });
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> rows) {
    auto& tape = tape_of(x);
    const auto& xv = x.value();
    require_matrix(xv, "gather_rows");
    const std::size_t n = xv.cols();
    Tensor<T> out({rows.size(), n});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= xv.rows()) {
            throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " of " + shape_str(xv.shape()));
        }
        std::copy_n(xv.raw() + rows[i] * n, n, out.raw() + i * n);
    }
    const std::uint32_t ix = x.id();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return tape.record(std::move(out), {x}, [ix, n, idx = std::move(idx)](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        auto s = tp.grad_sink(ix);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            for (std::size_t c = 0; c < n; ++c) {
                s[idx[i] * n + c] += g[i * n + c];
            }
        }
    });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
    if (parts.empty()) {
        throw DimensionError("concat_rows of nothing");
    }
    auto& tape = tape_of(parts[0]);
    const std::size_t n = parts[0].value().cols();
    std::size_t total = 0;
    std::vector<std::uint32_t> ids;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        same_tape(parts[0], p);
        require_matrix(p.value(), "concat_rows");
        if (p.value().cols() != n) {
            throw DimensionError("concat_rows: column mismatch " + shape_str(p.value().shape()));
        }
        ids.push_back(p.id());
        offsets.push_back(total * n);
        total += p.value().rows();
    }
    Tensor<T> out({total, n});
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const auto& pv = parts[i].value();
        std::copy_n(pv.raw(), pv.numel(), out.raw() + offsets[i]);
    }
    return tape.record(std::move(out), parts,
                       [ids = std::move(ids), offsets = std::move(offsets)](Tape<T>& tp, std::uint32_t self) {
                           auto g = tp.grad(self);
                           for (std::size_t i = 0; i < ids.size(); ++i) {
                               auto s = tp.grad_sink(ids[i]);
                               for (std::size_t j = 0; j < s.size(); ++j) {
                                   s[j] += g[offsets[i] + j];
                               }
                           }
                       });
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end) {
    auto& tape = tape_of(x);
    const auto& xv = x.value();
    require_matrix(xv, "slice_cols");
    if (begin > end || end > xv.cols()) {
        throw DimensionError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                             shape_str(xv.shape()));
    }
    const std::size_t m = xv.rows(), n = xv.cols(), w = end - begin;
    Tensor<T> out({m, w});
    for (std::size_t r = 0; r < m; ++r) {
        std::copy_n(xv.raw() + r * n + begin, w, out.raw() + r * w);
    }
    const std::uint32_t ix = x.id();
    return tape.record(std::move(out), {x}, [ix, m, n, w, begin](Tape<T>& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        auto s = tp.grad_sink(ix);
        for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                s[r * n + begin + c] += g[r * w + c];
            }
        }
    });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
    if (parts.empty()) {
        throw DimensionError("concat_cols of nothing");
    }
    auto& tape = tape_of(parts[0]);
    const std::size_t m = parts[0].value().rows();
    std::size_t total = 0;
    std::vector<std::uint32_t> ids;
    std::vector<std::size_t> offsets, widths;
    for (const auto& p : parts) {
        same_tape(parts[0], p);
        require_matrix(p.value(), "concat_cols");
        if (p.value().rows() != m) {
            throw DimensionError("concat_cols: row mismatch " + shape_str(p.value().shape()));
        }
        ids.push_back(p.id());
        offsets.push_back(total);
        widths.push_back(p.value().cols());
        total += p.value().cols();
    }
    Tensor<T> out({m, total});
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const auto& pv = parts[i].value();
        for (std::size_t r = 0; r < m; ++r) {
            std::copy_n(pv.raw() + r * widths[i], widths[i], out.raw() + r * total + offsets[i]);
        }
    }
    return tape.record(std::move(out), parts,
                       [ids = std::move(ids), offsets = std::move(offsets), widths = std::move(widths), m,
                        total](Tape<T>& tp, std::uint32_t self) {
                           auto g = tp.grad(self);
                           for (std::size_t i = 0; i < ids.size(); ++i) {
                               auto s = tp.grad_sink(ids[i]);
                               if (s.empty()) {
                                   continue;
                               }
                               for (std::size_t r = 0; r < m; ++r) {
                                   for (std::size_t c = 0; c < widths[i]; ++c) {
                                       s[r * widths[i] + c] += g[r * total + offsets[i] + c];
                                   }
                               }
                           }
                       });
}

#define SPANATTN_INSTANTIATE(T)                                                                   \
    template Var<T> matmul<T>(Var<T>, Var<T>);                                                    \
    template Var<T> matmul_nt<T>(Var<T>, Var<T>);                                                 \
    template Var<T> transpose<T>(Var<T>);                                                         \
    template Var<T> add<T>(Var<T>, Var<T>);                                                       \
    template Var<T> sub<T>(Var<T>, Var<T>);                                                       \
    template Var<T> mul<T>(Var<T>, Var<T>);                                                       \
    template Var<T> scale<T>(Var<T>, T);                                                          \
    template Var<T> add_bias<T>(Var<T>, Var<T>);                                                  \
    template Var<T> mul_rowvec<T>(Var<T>, Var<T>);                                                \
    template Var<T> sum<T>(Var<T>);                                                               \
    template Var<T> mean<T>(Var<T>);                                                              \
    template Var<T> sigmoid<T>(Var<T>);                                                           \
    template Var<T> silu<T>(Var<T>);                                                              \
    template Var<T> rmsnorm<T>(Var<T>, Var<T>, T);                                                \
    template Var<T> masked_softmax<T>(Var<T>, const AdditiveMask&, std::vector<bool>*);           \
    template Var<T> softmax<T>(Var<T>);                                                           \
    template Var<T> rope_embed<T>(Var<T>, std::span<const std::size_t>, const RopeConfig&);       \
    template Var<T> causal_conv1d<T>(Var<T>, Var<T>, Var<T>, std::size_t);                        \
    template Var<T> linear_recurrence<T>(Var<T>, Var<T>, Var<T>);                                 \
    template Var<T> embedding<T>(Var<T>, std::span<const int>);                                   \
    template Var<T> cross_entropy<T>(Var<T>, std::span<const int>);                               \
    template Var<T> slice_rows<T>(Var<T>, std::size_t, std::size_t);                             \
    template Var<T> gather_rows<T>(Var<T>, std::span<const std::size_t>);                         \
    template Var<T> concat_rows<T>(std::span<const Var<T>>);                                      \
    template Var<T> slice_cols<T>(Var<T>, std::size_t, std::size_t);                              \
    template Var<T> concat_cols<T>(std::span<const Var<T>>);

SPANATTN_INSTANTIATE(float)
SPANATTN_INSTANTIATE(double)
#undef SPANATTN_INSTANTIATE

}  // namespace spanattn
