// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient checking. Every trainable operation in the
// model is validated against this harness in f64.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>

#include "deepflow/tensor.hpp"

namespace deepflow {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::int64_t worst_coordinate = -1;
    bool passed = false;
};

// A scalar-valued function with an analytic gradient.
struct DiffFn {
    std::function<double(const Tensor<double>&)> value;
    std::function<Tensor<double>(const Tensor<double>&)> gradient;
};

// Compares f.gradient(x) against (f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps)
// coordinate-wise. Relative error denominator: max(|analytic|, |numeric|, 1e-8).
//
// A single step size cannot serve every coordinate: near-zero gradients are
// noise-limited (want a larger step), steep ones truncation-limited (want a
// smaller one). Coordinates that miss tol at `eps` are re-measured at 8x and
// 64x the step and the best estimate is kept.
inline GradCheckReport grad_check(const DiffFn& f, Tensor<double> x, double eps, double tol) {
    if (!(eps > 0)) throw std::invalid_argument("grad_check: eps must be positive");
    const double f0 = f.value(x);
    if (!std::isfinite(f0)) throw std::runtime_error("grad_check: f(x) is not finite");
    const Tensor<double> analytic = f.gradient(x);
    if (!analytic.same_shape(x)) throw std::invalid_argument("grad_check: gradient shape mismatch");

    auto central = [&](std::int64_t i, double h) {
        const double xi = x[i];
        x[i] = xi + h;
        const double fp = f.value(x);
        x[i] = xi - h;
        const double fm = f.value(x);
        x[i] = xi;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("grad_check: perturbed evaluation is not finite");
        return (fp - fm) / (2.0 * h);
    };
    auto rel_error = [&](std::int64_t i, double numeric) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        return std::abs(analytic[i] - numeric) / denom;
    };

    GradCheckReport report;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        double rel = rel_error(i, central(i, eps));
        for (double mult : {8.0, 64.0}) {
            if (rel <= tol) break;
            rel = std::min(rel, rel_error(i, central(i, eps * mult)));
        }
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_coordinate = i;
        }
    }
    report.passed = report.max_rel_error <= tol;
    return report;
}

} // namespace deepflow
