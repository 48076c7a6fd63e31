// SPDX-License-Identifier: Apache-2.0
//
// Deep-supervision and second-order acceleration losses. Plain tensor
// versions mirror the tape versions used for training; tests cross-check
// the two paths against each other.

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "deepflow/autodiff.hpp"
#include "deepflow/interpolant.hpp"
#include "deepflow/network.hpp"
#include "deepflow/tensor.hpp"

namespace deepflow {

// Mean over batch and elements of ||a - b||^2.
template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mse: shape mismatch");
    double acc = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

// deep_star = sum_i betas[i] * mean||v_i - V||^2
template <typename T>
std::pair<double, std::vector<double>> deep_supervision_loss(const std::vector<Tensor<T>>& v_preds,
                                                             const Tensor<T>& V,
                                                             const std::vector<double>& betas) {
    if (v_preds.size() != betas.size())
        throw std::invalid_argument("deep_supervision_loss: betas length mismatch");
    std::vector<double> per_branch;
    per_branch.reserve(v_preds.size());
    double deep_star = 0;
    for (std::size_t i = 0; i < v_preds.size(); ++i) {
        per_branch.push_back(mse(v_preds[i], V));
        deep_star += betas[i] * per_branch.back();
    }
    return {deep_star, per_branch};
}

// x_t + v*d + (1/2)*a*d^2, scalar gap shared by the whole tensor.
template <typename T>
Tensor<T> second_order_step(const Tensor<T>& x_t, const Tensor<T>& v, const Tensor<T>& a, double d) {
    if (!x_t.same_shape(v) || !x_t.same_shape(a))
        throw std::invalid_argument("second_order_step: shape mismatch");
    Tensor<T> out(x_t.shape);
    const T td = static_cast<T>(d);
    const T hd2 = static_cast<T>(0.5 * d * d);
    for (std::int64_t i = 0; i < x_t.size(); ++i) out[i] = x_t[i] + v[i] * td + a[i] * hd2;
    return out;
}

// Per-sample scalar gaps d: (B,).
template <typename T>
Tensor<T> second_order_step_batch(const Tensor<T>& x_t, const Tensor<T>& v, const Tensor<T>& a,
                                  const Tensor<T>& d) {
    if (!x_t.same_shape(v) || !x_t.same_shape(a))
        throw std::invalid_argument("second_order_step_batch: shape mismatch");
    if (d.rank() != 1 || d.shape[0] != x_t.shape[0])
        throw std::invalid_argument("second_order_step_batch: d must be (B,)");
    const std::int64_t b = d.shape[0];
    const std::int64_t e = x_t.size() / b;
    Tensor<T> out(x_t.shape);
    for (std::int64_t i = 0; i < b; ++i) {
        const T td = d[i];
        const T hd2 = T(0.5) * td * td;
        for (std::int64_t j = 0; j < e; ++j)
            out[i * e + j] = x_t[i * e + j] + v[i * e + j] * td + a[i * e + j] * hd2;
    }
    return out;
}

// Per refiner site i: mean||x_{t_i} + v_i*d_{t_i->0} + (1/2)a_i*d^2 - x0||^2.
template <typename T>
std::pair<double, std::vector<double>> acceleration_loss(const Tensor<T>& x0, const Tensor<T>& x1,
                                                         const std::vector<Tensor<T>>& v_sites,
                                                         const std::vector<Tensor<T>>& a_sites,
                                                         const std::vector<Tensor<T>>& site_times) {
    if (v_sites.size() != a_sites.size() || v_sites.size() != site_times.size())
        throw std::invalid_argument("acceleration_loss: site list length mismatch");
    std::vector<double> per_site;
    per_site.reserve(v_sites.size());
    double total = 0;
    for (std::size_t i = 0; i < v_sites.size(); ++i) {
        const Tensor<T> x_t = interpolate_batch(x0, x1, site_times[i]);
        Tensor<T> d({site_times[i].shape[0]});
        for (std::int64_t j = 0; j < d.size(); ++j) d[j] = -site_times[i][j];  // d_{t->0} = -t
        const Tensor<T> pred = second_order_step_batch(x_t, v_sites[i], a_sites[i], d);
        per_site.push_back(mse(pred, x0));
        total += per_site.back();
    }
    return {total, per_site};
}

inline double total_loss(double deep_star, double acc_total, double lambda) {
    return deep_star + lambda * acc_total;
}

// ---- tape versions (differentiable) ----------------------------------------

template <typename T>
struct LossVars {
    Var<T> total;
    Var<T> deep_star;
    Var<T> acc_total;
    std::vector<Var<T>> per_branch;
    std::vector<Var<T>> per_vera;
};

// Builds the full objective of one forward pass on the tape. `times` are the
// per-branch per-sample time tensors used by the forward.
template <typename T>
LossVars<T> flow_losses(Tape<T>& tape, const BranchOutputs<T>& out, const Tensor<T>& x0,
                        const Tensor<T>& x1, const std::vector<Tensor<T>>& times,
                        const std::vector<double>& betas, double lambda, bool vera_active) {
    if (out.v.size() != betas.size()) throw std::invalid_argument("flow_losses: betas length mismatch");
    LossVars<T> lv;
    Var<T> vgt = tape.constant(gt_velocity(x0, x1));
    for (std::size_t i = 0; i < out.v.size(); ++i) {
        Var<T> diff = tape.sub(out.v[i], vgt);
        lv.per_branch.push_back(tape.mean_all(tape.mul(diff, diff)));
        Var<T> term = tape.scale(lv.per_branch.back(), static_cast<T>(betas[i]));
        lv.deep_star = i == 0 ? term : tape.add(lv.deep_star, term);
    }
    if (vera_active && !out.a.empty()) {
        Var<T> x0c = tape.constant(x0);
        for (std::size_t i = 0; i < out.a.size(); ++i) {
            const Tensor<T>& ti = times[i];
            Var<T> x_t = tape.constant(interpolate_batch(x0, x1, ti));
            Tensor<T> d({ti.shape[0]}), hd2({ti.shape[0]});
            for (std::int64_t j = 0; j < d.size(); ++j) {
                d[j] = -ti[j];
                hd2[j] = T(0.5) * d[j] * d[j];
            }
            Var<T> pred = tape.add(tape.add(x_t, tape.mul_sample(out.v[i], tape.constant(std::move(d)))),
                                   tape.mul_sample(out.a[i], tape.constant(std::move(hd2))));
            Var<T> diff = tape.sub(pred, x0c);
            lv.per_vera.push_back(tape.mean_all(tape.mul(diff, diff)));
            lv.acc_total = i == 0 ? lv.per_vera.back() : tape.add(lv.acc_total, lv.per_vera.back());
        }
        lv.total = tape.add(lv.deep_star, tape.scale(lv.acc_total, static_cast<T>(lambda)));
    } else {
        lv.acc_total = tape.constant(Tensor<T>::scalar(T(0)));
        lv.total = lv.deep_star;
    }
    return lv;
}

} // namespace deepflow
