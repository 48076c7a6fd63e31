// SPDX-License-Identifier: Apache-2.0
//
// One optimizer step of the deep-supervision + acceleration objective.
// The RNG draw order inside a step is fixed and documented below, so a
// checkpointed (seed, stream_id, counter) triple replays runs exactly.

#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepflow/interpolant.hpp"
#include "deepflow/losses.hpp"
#include "deepflow/network.hpp"
#include "deepflow/optimizer.hpp"
#include "deepflow/rng.hpp"
#include "deepflow/tensor.hpp"

namespace deepflow {

struct TrainConfig {
    double lr = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double weight_decay = 0.0;
    std::int64_t batch_size = 128;
    std::int64_t steps = 5000;
    double ema_decay = 0.9999;
    double alpha = 0.01;     // max gap between adjacent branch time-steps
    double lambda = 1.0;     // acceleration loss weight
    std::vector<double> betas = {0.2, 1.0};
    TimeSamplingScheme time_scheme = TimeSamplingScheme::uniform;
    std::int64_t log_interval = 50;
    std::int64_t save_interval = 1000;

    void validate(std::int64_t k) const {
        if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
        if (steps < 0) throw std::invalid_argument("train: steps must be >= 0");
        if (alpha < 0) throw std::invalid_argument("train: alpha must be >= 0");
        if (log_interval < 1 || save_interval < 1)
            throw std::invalid_argument("train: intervals must be >= 1");
        if (static_cast<std::int64_t>(betas.size()) != k)
            throw std::invalid_argument("train: betas length must equal k");
        if (betas.back() != 1.0) throw std::invalid_argument("train: final beta must be 1.0");
    }

    template <typename T>
    AdamWConfig<T> adam() const {
        AdamWConfig<T> a;
        a.lr = static_cast<T>(lr);
        a.beta1 = static_cast<T>(adam_beta1);
        a.beta2 = static_cast<T>(adam_beta2);
        a.weight_decay = static_cast<T>(weight_decay);
        return a;
    }
};

// Scalar values are computed in the training dtype and widened for reporting,
// so total == deep_star + lambda * acc_total holds at training precision.
struct LossBreakdown {
    std::vector<double> per_branch_sup;
    std::vector<double> per_vera_acc;
    double deep_star = 0;
    double acc_total = 0;
    double total = 0;
    double lambda = 1.0;
    std::vector<double> betas;
};

// Draw order per step (all from `stream`):
//   1. x1 ~ N(0,I), batch-major
//   2. per sample: t_1 by the time scheme
//   3. per refiner site, per sample: gap u ~ U[0, alpha]
//   4. per sample: label-dropout uniform (conditional models only)
template <typename T>
struct StepDraws {
    Tensor<T> x1;
    std::vector<Tensor<T>> times;  // k tensors (B,)
    std::vector<std::int64_t> class_ids;
};

template <typename T>
StepDraws<T> draw_step_inputs(const ModelConfig& mc, const TrainConfig& tc, const Shape& x0_shape,
                              const std::vector<std::int64_t>& class_ids, RngStream& stream) {
    const std::int64_t b = x0_shape[0];
    StepDraws<T> d;
    d.x1 = rng_normal<T>(stream, x0_shape);
    d.times.assign(static_cast<std::size_t>(mc.k), Tensor<T>({b}));
    for (std::int64_t i = 0; i < b; ++i)
        d.times[0][i] = static_cast<T>(sample_time(tc.time_scheme, stream));
    for (std::int64_t s = 1; s < mc.k; ++s)
        for (std::int64_t i = 0; i < b; ++i) {
            const double u = stream.next_double() * tc.alpha;
            const double t = std::min(std::max(static_cast<double>(d.times[static_cast<std::size_t>(s - 1)][i]) - u, 0.0), 1.0);
            d.times[static_cast<std::size_t>(s)][i] = static_cast<T>(t);
        }
    d.class_ids = class_ids;
    if (mc.num_classes == 0) {
        std::fill(d.class_ids.begin(), d.class_ids.end(), std::int64_t(-1));
    } else if (mc.label_dropout_prob > 0) {
        for (auto& id : d.class_ids)
            if (stream.next_double() < mc.label_dropout_prob) id = mc.null_class_id();
    }
    return d;
}

template <typename T>
LossBreakdown breakdown_from(const Tape<T>& tape, const LossVars<T>& lv, const TrainConfig& tc) {
    LossBreakdown b;
    for (auto v : lv.per_branch) b.per_branch_sup.push_back(static_cast<double>(tape.val(v).data[0]));
    for (auto v : lv.per_vera) b.per_vera_acc.push_back(static_cast<double>(tape.val(v).data[0]));
    b.deep_star = static_cast<double>(tape.val(lv.deep_star).data[0]);
    b.acc_total = static_cast<double>(tape.val(lv.acc_total).data[0]);
    b.total = static_cast<double>(tape.val(lv.total).data[0]);
    b.lambda = tc.lambda;
    b.betas = tc.betas;
    return b;
}

// Forward + losses only; shares the exact draw path with train_step.
template <typename T>
LossBreakdown eval_step(const DeepFlowModel<T>& model, const Tensor<T>& x0,
                        const std::vector<std::int64_t>& class_ids, const TrainConfig& tc,
                        RngStream& stream) {
    StepDraws<T> d = draw_step_inputs<T>(model.cfg, tc, x0.shape, class_ids, stream);
    Tape<T> tape;
    tape.set_grad_enabled(false);
    auto bound = model.bind(tape, false);
    auto out = model.forward(tape, bound, x0, d.times, d.class_ids);
    auto lv = flow_losses(tape, out, x0, d.x1, d.times, tc.betas, tc.lambda, model.cfg.vera_active());
    return breakdown_from(tape, lv, tc);
}

template <typename T>
LossBreakdown train_step(DeepFlowModel<T>& model, AdamW<T>& opt, Ema<T>& ema, const Tensor<T>& x0,
                         const std::vector<std::int64_t>& class_ids, const TrainConfig& tc,
                         RngStream& stream) {
    StepDraws<T> d = draw_step_inputs<T>(model.cfg, tc, x0.shape, class_ids, stream);
    Tape<T> tape;
    auto bound = model.bind(tape, true);
    auto out = model.forward(tape, bound, x0, d.times, d.class_ids);
    auto lv = flow_losses(tape, out, x0, d.x1, d.times, tc.betas, tc.lambda, model.cfg.vera_active());
    LossBreakdown breakdown = breakdown_from(tape, lv, tc);
    if (!std::isfinite(breakdown.total)) {
        std::ostringstream os;
        os << "train_step: non-finite loss (deep_star=" << breakdown.deep_star
           << ", acc_total=" << breakdown.acc_total << ")";
        throw std::runtime_error(os.str());
    }
    tape.backward(lv.total);
    std::vector<Tensor<T>> grads;
    grads.reserve(model.params.count());
    for (std::size_t i = 0; i < model.params.count(); ++i) grads.push_back(tape.grad(bound.vars[i]));
    opt.step(model.params, grads);
    ema.update(model.params);
    return breakdown;
}

} // namespace deepflow
