// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Core>

#include <cmath>
#include <limits>

#include "spanattn/errors.hpp"
#include "spanattn/ops.hpp"

namespace spanattn {

template <typename T>
bool SoftmaxResult<T>::any_fully_masked() const {
    for (bool f : fully_masked) {
        if (f) {
            return true;
        }
    }
    return false;
}

template struct SoftmaxResult<float>;
template struct SoftmaxResult<double>;

namespace kernels {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

}  // namespace

template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a, bool trans_b,
          bool accumulate) {
    const auto mi = static_cast<Eigen::Index>(m);
    const auto ki = static_cast<Eigen::Index>(k);
    const auto ni = static_cast<Eigen::Index>(n);
    MutMap<T> cm(c, mi, ni);
    if (m == 0 || n == 0) {
        return;
    }
    if (k == 0) {
        if (!accumulate) {
            cm.setZero();
        }
        return;
    }
    // Stored layouts: A is [m x k] or [k x m]; B is [k x n] or [n x k].
    ConstMap<T> am(a, trans_a ? ki : mi, trans_a ? mi : ki);
    ConstMap<T> bm(b, trans_b ? ni : ki, trans_b ? ki : ni);
    auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate) {
            cm.noalias() += lhs * rhs;
        } else {
            cm.noalias() = lhs * rhs;
        }
    };
    if (!trans_a && !trans_b) {
        run(am, bm);
    } else if (!trans_a && trans_b) {
        run(am, bm.transpose());
    } else if (trans_a && !trans_b) {
        run(am.transpose(), bm);
    } else {
        run(am.transpose(), bm.transpose());
    }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor<T> out({a.rows(), b.cols()});
    gemm(a.raw(), b.raw(), out.raw(), a.rows(), a.cols(), b.cols(), false, false, false);
    return out;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    }
    Tensor<T> out({a.rows(), b.rows()});
    gemm(a.raw(), b.raw(), out.raw(), a.rows(), a.cols(), b.rows(), false, true, false);
    return out;
}

template <typename T>
SoftmaxResult<T> masked_softmax(const Tensor<T>& scores, const AdditiveMask* mask) {
    if (scores.rank() == 0) {
        throw DimensionError("masked_softmax on a scalar");
    }
    const std::size_t n = scores.shape().back();
    const std::size_t rows = n == 0 ? 0 : scores.numel() / n;
    if (mask && (mask->rows() != rows || mask->cols() != n)) {
        throw DimensionError("masked_softmax: mask " + std::to_string(mask->rows()) + "x" +
                             std::to_string(mask->cols()) + " for scores " + shape_str(scores.shape()));
    }
    SoftmaxResult<T> res{Tensor<T>(scores.shape()), std::vector<bool>(rows, false)};
    for (std::size_t r = 0; r < rows; ++r) {
        const T* s = scores.raw() + r * n;
        T* p = res.probs.raw() + r * n;
        const std::uint8_t* vis = mask ? mask->row(r).data() : nullptr;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < n; ++c) {
            if (!vis || vis[c]) {
                mx = std::max(mx, s[c]);
            }
        }
        if (mx == -std::numeric_limits<T>::infinity()) {
            res.fully_masked[r] = true;
            continue;
        }
        T total = 0;
        for (std::size_t c = 0; c < n; ++c) {
            if (!vis || vis[c]) {
                p[c] = std::exp(s[c] - mx);
                total += p[c];
            }
        }
        const T inv = T{1} / total;
        for (std::size_t c = 0; c < n; ++c) {
            p[c] *= inv;
        }
    }
    return res;
}

template <typename T>
Tensor<T> rope_embed(const Tensor<T>& x, std::span<const std::size_t> positions, const RopeConfig& cfg,
                     bool inverse) {
    if (x.rank() != 2) {
        throw DimensionError("rope_embed expects a matrix, got " + shape_str(x.shape()));
    }
    const std::size_t width = x.cols();
    const std::size_t group = cfg.group == 0 ? width : cfg.group;
    if (group % 2 != 0 || width % group != 0) {
        throw ConfigError("rope_embed requires an even rotary width dividing the row (width " +
                          std::to_string(width) + ", group " + std::to_string(group) + ")");
    }
    if (positions.size() != x.rows()) {
        throw DimensionError("rope_embed: " + std::to_string(positions.size()) + " positions for " +
                             std::to_string(x.rows()) + " rows");
    }
    const std::size_t half = group / 2;
    std::vector<double> theta(half);
    for (std::size_t i = 0; i < half; ++i) {
        theta[i] = std::pow(cfg.base, -2.0 * static_cast<double>(i) / static_cast<double>(group));
    }
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double pos = static_cast<double>(positions[r]) * cfg.position_scale;
        for (std::size_t i = 0; i < half; ++i) {
            const double ang = (inverse ? -pos : pos) * theta[i];
            const T cs = static_cast<T>(std::cos(ang));
            const T sn = static_cast<T>(std::sin(ang));
            for (std::size_t g = 0; g < width; g += group) {
                const std::size_t c = g + 2 * i;
                const T x0 = x(r, c);
                const T x1 = x(r, c + 1);
                out(r, c) = x0 * cs - x1 * sn;
                out(r, c + 1) = x0 * sn + x1 * cs;
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t max_width) {
    if (x.rank() != 2 || kernel.rank() != 2 || kernel.cols() != x.cols() || bias.numel() != x.cols()) {
        throw DimensionError("causal_conv1d: x " + shape_str(x.shape()) + ", kernel " + shape_str(kernel.shape()) +
                             ", bias " + shape_str(bias.shape()));
    }
    const std::size_t w = kernel.rows();
    if (w == 0 || w > max_width) {
        throw ConfigError("causal_conv1d: kernel width " + std::to_string(w) + " outside [1, " +
                          std::to_string(max_width) + "]");
    }
    const std::size_t len = x.rows();
    const std::size_t ch = x.cols();
    Tensor<T> out(x.shape());
    for (std::size_t t = 0; t < len; ++t) {
        T* o = out.raw() + t * ch;
        for (std::size_t c = 0; c < ch; ++c) {
            o[c] = bias[c];
        }
        for (std::size_t s = 0; s < w && s <= t; ++s) {
            const T* xr = x.raw() + (t - s) * ch;
            const T* kr = kernel.raw() + s * ch;
            for (std::size_t c = 0; c < ch; ++c) {
                o[c] += kr[c] * xr[c];
            }
        }
    }
    return out;
}

#define SPANATTN_INSTANTIATE(T)                                                                                 \
    template void gemm<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool, bool, bool);    \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                          \
    template Tensor<T> matmul_nt<T>(const Tensor<T>&, const Tensor<T>&);                                       \
    template SoftmaxResult<T> masked_softmax<T>(const Tensor<T>&, const AdditiveMask*);                        \
    template Tensor<T> rope_embed<T>(const Tensor<T>&, std::span<const std::size_t>, const RopeConfig&, bool); \
    template Tensor<T> causal_conv1d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);

SPANATTN_INSTANTIATE(float)
SPANATTN_INSTANTIATE(double)
#undef SPANATTN_INSTANTIATE

}  // namespace kernels
}  // namespace spanattn
