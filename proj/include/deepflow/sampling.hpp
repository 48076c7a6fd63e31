// SPDX-License-Identifier: Apache-2.0
//
// Euler ODE and Euler-Maruyama SDE samplers over a velocity field, the
// velocity-to-score conversion, single-timestep inference conditioning and
// classifier-free guidance. Chains are chunked with a fixed chunk size and
// per-chain RNG streams, so outputs are invariant to the worker count.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <vector>

#include "deepflow/network.hpp"
#include "deepflow/rng.hpp"
#include "deepflow/tensor.hpp"
#include "deepflow/threading.hpp"

namespace deepflow {

struct SamplerConfig {
    enum class Kind { ode, sde };
    enum class Diffusion { linear, zero };  // w(t) = t or w == 0

    Kind kind = Kind::sde;
    std::int64_t steps = 250;
    double t_start = 1.0;
    double t_end = 0.004;  // last-step interval, integrated deterministically (SDE)
    Diffusion diffusion = Diffusion::linear;
    double cfg_scale = 1.0;  // 1.0 = guidance off
    bool record_trajectory = false;

    double w(double t) const { return diffusion == Diffusion::linear ? t : 0.0; }

    void validate() const {
        if (steps < 1) throw std::invalid_argument("sampler: steps must be >= 1");
        if (!(0.0 <= t_end && t_end < t_start && t_start <= 1.0))
            throw std::invalid_argument("sampler: need 0 <= t_end < t_start <= 1");
        if (cfg_scale < 0) throw std::invalid_argument("sampler: cfg_scale must be >= 0");
        if (kind == Kind::sde && diffusion != Diffusion::zero && t_end <= 0)
            throw std::invalid_argument("sampler: SDE needs t_end > 0 for the score term");
    }
};

inline const char* to_string(SamplerConfig::Kind k) { return k == SamplerConfig::Kind::ode ? "ode" : "sde"; }
inline const char* to_string(SamplerConfig::Diffusion d) {
    return d == SamplerConfig::Diffusion::linear ? "linear" : "zero";
}

template <typename T>
struct Trajectory {
    std::vector<Tensor<T>> states;  // per grid point, (n, data shape)
    std::vector<double> times;
};

// Marginal score implied by x_t = t*x1 + (1-t)*x0 with x1 ~ N(0,I):
// s = -(x + (1-t)*v) / t.
template <typename T>
Tensor<T> score_from_velocity(const Tensor<T>& x, const Tensor<T>& v, double t) {
    if (!(t > 0)) throw std::invalid_argument("score_from_velocity: t must be > 0");
    if (!x.same_shape(v)) throw std::invalid_argument("score_from_velocity: shape mismatch");
    Tensor<T> s(x.shape);
    const T omt = static_cast<T>(1.0 - t);
    const T inv = static_cast<T>(1.0 / t);
    for (std::int64_t i = 0; i < x.size(); ++i) s[i] = -(x[i] + omt * v[i]) * inv;
    return s;
}

// A batched velocity field v(x, t). `step_index` identifies the solver step
// for diagnostics recorders; the final deterministic SDE step passes
// step_index == steps.
template <typename T>
using VelocityField =
    std::function<Tensor<T>(const Tensor<T>& x, double t, std::int64_t step_index, std::int64_t chain_offset)>;

// Inference-time velocity: all branches conditioned on the same time-step,
// so every internal time-gap is exactly zero. With cfg_scale != 1 the
// null-class and class-conditional velocities are extrapolated:
// v = v_null + cfg_scale * (v_class - v_null).
template <typename T>
Tensor<T> predict_velocity(const DeepFlowModel<T>& model, const Tensor<T>& x, double t,
                           const std::vector<std::int64_t>& class_ids, double cfg_scale,
                           Tape<T>* tape_out = nullptr, BranchOutputs<T>* outs_out = nullptr) {
    const std::int64_t b = x.shape[0];
    std::vector<Tensor<T>> times(static_cast<std::size_t>(model.cfg.k),
                                 Tensor<T>::full({b}, static_cast<T>(t)));
    auto run = [&](const std::vector<std::int64_t>& ids, Tape<T>* keep, BranchOutputs<T>* keep_out) {
        Tape<T> local;
        Tape<T>& tape = keep ? *keep : local;
        tape.set_grad_enabled(false);
        auto bound = model.bind(tape, false);
        BranchOutputs<T> out = model.forward(tape, bound, x, times, ids);
        Tensor<T> v = tape.val(out.v.back());
        if (keep_out) *keep_out = std::move(out);
        return v;
    };
    if (model.cfg.num_classes == 0) {
        for (auto id : class_ids)
            if (id >= 0)
                throw std::invalid_argument(
                    "predict_velocity: class conditioning requested on unconditional model");
    }
    if (cfg_scale == 1.0) return run(class_ids, tape_out, outs_out);
    std::vector<std::int64_t> null_ids(class_ids.size(), model.cfg.null_class_id());
    Tensor<T> v_null = run(null_ids, nullptr, nullptr);
    Tensor<T> v_class = run(class_ids, tape_out, outs_out);
    const T s = static_cast<T>(cfg_scale);
    for (std::int64_t i = 0; i < v_class.size(); ++i)
        v_class[i] = v_null[i] + s * (v_class[i] - v_null[i]);
    return v_class;
}

// Fixed chain chunk size: sampling batches are formed per chunk regardless
// of worker count, so results are shard-invariant.
constexpr std::int64_t kSamplerChunk = 256;

namespace detail {

template <typename T>
void write_rows(Tensor<T>& dst, const Tensor<T>& src, std::int64_t row_offset) {
    const std::int64_t e = src.size() / src.shape[0];
    for (std::int64_t i = 0; i < src.size(); ++i) dst[row_offset * e + i] = src[i];
}

// Shared solver core. SDE appends a deterministic Euler step t_end -> 0;
// the ODE path stops at t_end as configured.
template <typename T>
Tensor<T> integrate(const VelocityField<T>& field, const Shape& sample_shape, const SamplerConfig& cfg,
                    std::int64_t n, RngStream& stream, bool stochastic, Trajectory<T>* traj) {
    cfg.validate();
    if (n < 1) throw std::invalid_argument("sampler: n must be >= 1");
    Shape batch_shape = sample_shape;
    batch_shape.insert(batch_shape.begin(), n);
    Tensor<T> result(batch_shape);
    const std::int64_t elems = shape_numel(sample_shape);
    const double dt = (cfg.t_end - cfg.t_start) / static_cast<double>(cfg.steps);

    const std::int64_t grid_points = cfg.steps + 1 + (stochastic ? 1 : 0);
    if (traj) {
        traj->states.assign(static_cast<std::size_t>(grid_points), Tensor<T>(batch_shape));
        traj->times.resize(static_cast<std::size_t>(grid_points));
        for (std::int64_t j = 0; j <= cfg.steps; ++j)
            traj->times[static_cast<std::size_t>(j)] = cfg.t_start + static_cast<double>(j) * dt;
        if (stochastic) traj->times.back() = 0.0;
    }

    const std::int64_t n_chunks = (n + kSamplerChunk - 1) / kSamplerChunk;
    std::exception_ptr error;
    std::mutex error_mu;
    parallel_for(n_chunks, [&](std::int64_t chunk) {
        try {
            const std::int64_t lo = chunk * kSamplerChunk;
            const std::int64_t hi = std::min(n, lo + kSamplerChunk);
            const std::int64_t bn = hi - lo;
            Shape chunk_shape = sample_shape;
            chunk_shape.insert(chunk_shape.begin(), bn);
            std::vector<RngStream> chains;
            chains.reserve(static_cast<std::size_t>(bn));
            for (std::int64_t j = lo; j < hi; ++j) chains.push_back(stream.child(static_cast<std::uint64_t>(j)));

            Tensor<T> x(chunk_shape);
            for (std::int64_t j = 0; j < bn; ++j)
                for (std::int64_t e = 0; e < elems; ++e)
                    x[j * elems + e] = static_cast<T>(chains[static_cast<std::size_t>(j)].next_normal());
            if (traj) write_rows(traj->states[0], x, lo);

            for (std::int64_t step = 0; step < cfg.steps; ++step) {
                const double t = cfg.t_start + static_cast<double>(step) * dt;
                Tensor<T> v = field(x, t, step, lo);
                if (!v.same_shape(x)) throw std::runtime_error("sampler: velocity shape mismatch");
                const double wt = stochastic ? cfg.w(t) : 0.0;
                if (wt != 0.0) {
                    Tensor<T> s = score_from_velocity(x, v, t);
                    const T drift_dt = static_cast<T>(dt);
                    const T noise_scale = static_cast<T>(std::sqrt(wt * std::abs(dt)));
                    for (std::int64_t j = 0; j < bn; ++j)
                        for (std::int64_t e = 0; e < elems; ++e) {
                            const std::int64_t i = j * elems + e;
                            const T drift = v[i] - static_cast<T>(0.5 * wt) * s[i];
                            x[i] += drift * drift_dt +
                                    noise_scale * static_cast<T>(chains[static_cast<std::size_t>(j)].next_normal());
                        }
                } else {
                    for (std::int64_t i = 0; i < x.size(); ++i) x[i] += v[i] * static_cast<T>(dt);
                }
                if (!x.all_finite())
                    throw std::runtime_error("sampler: non-finite state at step " + std::to_string(step));
                if (traj) write_rows(traj->states[static_cast<std::size_t>(step + 1)], x, lo);
            }
            if (stochastic) {
                // final step: deterministic Euler from t_end to 0
                Tensor<T> v = field(x, cfg.t_end, cfg.steps, lo);
                for (std::int64_t i = 0; i < x.size(); ++i) x[i] += v[i] * static_cast<T>(-cfg.t_end);
                if (!x.all_finite()) throw std::runtime_error("sampler: non-finite state at final step");
                if (traj) write_rows(traj->states.back(), x, lo);
            }
            write_rows(result, x, lo);
        } catch (...) {
            std::lock_guard<std::mutex> lk(error_mu);
            if (!error) error = std::current_exception();
        }
    });
    if (error) std::rethrow_exception(error);
    return result;
}

} // namespace detail

template <typename T>
Tensor<T> sample_ode(const VelocityField<T>& field, const Shape& sample_shape, const SamplerConfig& cfg,
                     std::int64_t n, RngStream& stream, Trajectory<T>* traj = nullptr) {
    return detail::integrate(field, sample_shape, cfg, n, stream, false, traj);
}

template <typename T>
Tensor<T> sample_sde(const VelocityField<T>& field, const Shape& sample_shape, const SamplerConfig& cfg,
                     std::int64_t n, RngStream& stream, Trajectory<T>* traj = nullptr) {
    return detail::integrate(field, sample_shape, cfg, n, stream, true, traj);
}

// Optional per-forward hook for feature diagnostics during sampling.
template <typename T>
using ForwardRecorder = std::function<void(std::int64_t step_index, double t, std::int64_t chain_offset,
                                           Tape<T>& tape, const BranchOutputs<T>& outs)>;

// Model-backed field with single-timestep conditioning and CFG; class ids are
// per chain (size n of the sampling run).
template <typename T>
VelocityField<T> model_velocity_field(const DeepFlowModel<T>& model,
                                      const std::vector<std::int64_t>& class_ids, double cfg_scale,
                                      ForwardRecorder<T> recorder = nullptr) {
    return [&model, class_ids, cfg_scale, recorder](const Tensor<T>& x, double t, std::int64_t step_index,
                                                    std::int64_t chain_offset) {
        const std::int64_t bn = x.shape[0];
        std::vector<std::int64_t> ids(static_cast<std::size_t>(bn), -1);
        for (std::int64_t j = 0; j < bn; ++j) {
            const std::size_t src = static_cast<std::size_t>(chain_offset + j);
            if (src < class_ids.size()) ids[static_cast<std::size_t>(j)] = class_ids[src];
        }
        if (recorder) {
            Tape<T> tape;
            BranchOutputs<T> outs;
            Tensor<T> v = predict_velocity(model, x, t, ids, cfg_scale, &tape, &outs);
            recorder(step_index, t, chain_offset, tape, outs);
            return v;
        }
        return predict_velocity(model, x, t, ids, cfg_scale);
    };
}

// Model-level convenience wrappers.
template <typename T>
Tensor<T> sample_ode(const DeepFlowModel<T>& model, const SamplerConfig& cfg, std::int64_t n,
                     const std::vector<std::int64_t>& class_ids, RngStream& stream,
                     Trajectory<T>* traj = nullptr) {
    return sample_ode(model_velocity_field(model, class_ids, cfg.cfg_scale), model.cfg.geometry.sample_shape(),
                      cfg, n, stream, traj);
}

template <typename T>
Tensor<T> sample_sde(const DeepFlowModel<T>& model, const SamplerConfig& cfg, std::int64_t n,
                     const std::vector<std::int64_t>& class_ids, RngStream& stream,
                     Trajectory<T>* traj = nullptr) {
    return sample_sde(model_velocity_field(model, class_ids, cfg.cfg_scale), model.cfg.geometry.sample_shape(),
                      cfg, n, stream, traj);
}

} // namespace deepflow
