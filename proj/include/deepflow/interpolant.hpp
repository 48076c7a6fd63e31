// SPDX-License-Identifier: Apache-2.0
//
// Linear interpolant between data and noise, its ground-truth velocity,
// training-time sampling of branch time-steps, and signed time-gaps.

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "deepflow/rng.hpp"
#include "deepflow/tensor.hpp"

namespace deepflow {

enum class TimeSamplingScheme { uniform, lognormal };

inline const char* to_string(TimeSamplingScheme s) {
    return s == TimeSamplingScheme::uniform ? "uniform" : "lognormal";
}

// Ordered per-branch time-steps t_1 >= t_2 >= ... >= t_k with each
// consecutive gap bounded by alpha.
struct BranchTimes {
    std::vector<double> times;
    double alpha = 0.0;

    std::int64_t k() const { return static_cast<std::int64_t>(times.size()); }
    double operator[](std::int64_t i) const { return times[static_cast<std::size_t>(i)]; }
};

// Signed gap d_{a->b} = b - a.
struct TimeGap {
    double value = 0.0;
};

inline TimeGap time_gap(double a, double b) { return TimeGap{b - a}; }

inline double sigmoid_transform(double n) { return 1.0 / (1.0 + std::exp(-n)); }

inline double sample_time(TimeSamplingScheme scheme, RngStream& stream) {
    if (scheme == TimeSamplingScheme::uniform) return stream.next_double();
    return sigmoid_transform(stream.next_normal());
}

// Deterministic core of branch-time assignment: t_{i+1} = clamp(t_i - u_i, 0, 1).
inline BranchTimes branch_times_from_gaps(double t1, const std::vector<double>& gaps, double alpha) {
    BranchTimes bt;
    bt.alpha = alpha;
    bt.times.reserve(gaps.size() + 1);
    bt.times.push_back(t1);
    double t = t1;
    for (double u : gaps) {
        t = std::min(std::max(t - u, 0.0), 1.0);
        bt.times.push_back(t);
    }
    return bt;
}

inline BranchTimes assign_branch_times(double t1, std::int64_t k, double alpha, RngStream& stream) {
    if (k < 1) throw std::invalid_argument("assign_branch_times: k must be >= 1");
    if (alpha < 0) throw std::invalid_argument("assign_branch_times: alpha must be >= 0");
    std::vector<double> gaps(static_cast<std::size_t>(k - 1));
    for (auto& u : gaps) u = stream.next_double() * alpha;
    return branch_times_from_gaps(t1, gaps, alpha);
}

// x_t = t*x1 + (1-t)*x0
template <typename T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& x1, T t) {
    if (!x0.same_shape(x1)) throw std::invalid_argument("interpolate: shape mismatch");
    Tensor<T> out(x0.shape);
    const T omt = T(1) - t;
    for (std::int64_t i = 0; i < x0.size(); ++i) out[i] = t * x1[i] + omt * x0[i];
    return out;
}

// V = x1 - x0, independent of t.
template <typename T>
Tensor<T> gt_velocity(const Tensor<T>& x0, const Tensor<T>& x1) {
    if (!x0.same_shape(x1)) throw std::invalid_argument("gt_velocity: shape mismatch");
    Tensor<T> out(x0.shape);
    for (std::int64_t i = 0; i < x0.size(); ++i) out[i] = x1[i] - x0[i];
    return out;
}

// Batched variant: per-sample scalar t (B,) against (B, ...) tensors.
template <typename T>
Tensor<T> interpolate_batch(const Tensor<T>& x0, const Tensor<T>& x1, const Tensor<T>& t) {
    if (!x0.same_shape(x1)) throw std::invalid_argument("interpolate_batch: shape mismatch");
    if (t.rank() != 1 || t.shape[0] != x0.shape[0])
        throw std::invalid_argument("interpolate_batch: t must be (B,)");
    const std::int64_t b = t.shape[0];
    const std::int64_t e = x0.size() / b;
    Tensor<T> out(x0.shape);
    for (std::int64_t i = 0; i < b; ++i) {
        const T ti = t[i];
        const T omt = T(1) - ti;
        for (std::int64_t j = 0; j < e; ++j) out[i * e + j] = ti * x1[i * e + j] + omt * x0[i * e + j];
    }
    return out;
}

} // namespace deepflow
