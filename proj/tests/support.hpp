// SPDX-License-Identifier: Apache-2.0
// Shared test helpers: random tensors and a central finite-difference oracle.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "spanattn/ops.hpp"
#include "spanattn/tape.hpp"
#include "spanattn/tensor.hpp"

namespace testing_support {

using spanattn::Tape;
using spanattn::Tensor;
using spanattn::Var;

template <typename T = double>
Tensor<T> random_tensor(spanattn::Shape shape, std::uint64_t seed, double stddev = 1.0) {
    spanattn::Rng rng(seed);
    return Tensor<T>::randn(std::move(shape), rng, stddev);
}

struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::size_t checked = 0;
};

/// Compares tape gradients of `loss_fn` with respect to `params` against
/// central differences of the forward value. Elements whose gradient
/// magnitude (either estimate) is at most `floor` are skipped.
inline GradCheckResult grad_check(const std::vector<Tensor<double>*>& params,
                                  const std::function<Var<double>(Tape<double>&)>& loss_fn, double h = 1e-5,
                                  double floor = 1e-8) {
    for (auto* p : params) {
        p->set_requires_grad(true);
        p->clear_grad();
    }
    {
        Tape<double> tape;
        auto loss = loss_fn(tape);
        tape.backward(loss);
    }
    auto eval = [&]() {
        Tape<double> tape;
        return loss_fn(tape).value().item();
    };
    GradCheckResult res;
    for (auto* p : params) {
        std::vector<double> analytic(p->grad().begin(), p->grad().end());
        for (std::size_t i = 0; i < p->numel(); ++i) {
            const double orig = (*p)[i];
            (*p)[i] = orig + h;
            const double fp = eval();
            (*p)[i] = orig - h;
            const double fm = eval();
            (*p)[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[i];
            const double mag = std::max(std::abs(a), std::abs(numeric));
            res.max_abs_err = std::max(res.max_abs_err, std::abs(a - numeric));
            if (mag <= floor) {
                continue;
            }
            res.max_rel_err = std::max(res.max_rel_err, std::abs(a - numeric) / mag);
            ++res.checked;
        }
    }
    return res;
}

/// Upper tail of the chi-squared distribution, Q(k/2, x/2), via the series
/// for small x and a Lentz continued fraction otherwise.
inline double chi2_sf(double x, double dof) {
    const double a = dof / 2.0;
    const double z = x / 2.0;
    if (z <= 0.0) {
        return 1.0;
    }
    const double lg = std::lgamma(a);
    if (z < a + 1.0) {
        double term = 1.0 / a;
        double sum = term;
        for (int n = 1; n < 1000; ++n) {
            term *= z / (a + n);
            sum += term;
            if (std::abs(term) < std::abs(sum) * 1e-15) {
                break;
            }
        }
        return 1.0 - sum * std::exp(-z + a * std::log(z) - lg);
    }
    const double tiny = 1e-300;
    double b = z + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 1000; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        d = std::abs(d) < tiny ? tiny : d;
        c = b + an / c;
        c = std::abs(c) < tiny ? tiny : c;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-15) {
            break;
        }
    }
    return std::exp(-z + a * std::log(z) - lg) * h;
}

/// Pearson statistic of `counts` against a uniform expectation, and its p-value.
inline double uniform_chi2_pvalue(const std::vector<std::size_t>& counts) {
    double total = 0.0;
    for (auto c : counts) {
        total += static_cast<double>(c);
    }
    const double expected = total / static_cast<double>(counts.size());
    double stat = 0.0;
    for (auto c : counts) {
        const double diff = static_cast<double>(c) - expected;
        stat += diff * diff / expected;
    }
    return chi2_sf(stat, static_cast<double>(counts.size() - 1));
}

}  // namespace testing_support
