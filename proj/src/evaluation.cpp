// SPDX-License-Identifier: Apache-2.0

#include "deepflow/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>

#include "deepflow/threading.hpp"

namespace deepflow {

namespace {

// Empirical quantile of a sorted sample at probability p, linear interpolation.
double quantile_sorted(const std::vector<double>& s, double p) {
    const std::size_t n = s.size();
    if (n == 1) return s[0];
    const double pos = p * static_cast<double>(n) - 0.5;
    if (pos <= 0) return s.front();
    if (pos >= static_cast<double>(n - 1)) return s.back();
    const std::size_t lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    return s[lo] * (1.0 - frac) + s[lo + 1] * frac;
}

double w2_squared_1d(std::vector<double>& a, std::vector<double>& b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double acc = 0;
    if (a.size() == b.size()) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = a[i] - b[i];
            acc += d * d;
        }
        return acc / static_cast<double>(a.size());
    }
    const std::size_t k = std::max(a.size(), b.size());
    for (std::size_t i = 0; i < k; ++i) {
        const double p = (static_cast<double>(i) + 0.5) / static_cast<double>(k);
        const double d = quantile_sorted(a, p) - quantile_sorted(b, p);
        acc += d * d;
    }
    return acc / static_cast<double>(k);
}

} // namespace

double sliced_wasserstein(const Tensor<double>& A, const Tensor<double>& B, std::int64_t n_projections,
                          RngStream& stream) {
    if (A.rank() != 2 || B.rank() != 2) throw std::invalid_argument("sliced_wasserstein: want (n, d) sets");
    if (A.shape[1] != B.shape[1]) throw std::invalid_argument("sliced_wasserstein: dimensionality mismatch");
    if (A.shape[0] < 1 || B.shape[0] < 1) throw std::invalid_argument("sliced_wasserstein: empty set");
    if (n_projections < 1) throw std::invalid_argument("sliced_wasserstein: n_projections must be >= 1");
    const std::int64_t na = A.shape[0], nb = B.shape[0], d = A.shape[1];
    std::vector<double> pa(static_cast<std::size_t>(na)), pb(static_cast<std::size_t>(nb));
    std::vector<double> dir(static_cast<std::size_t>(d));
    double acc = 0;
    for (std::int64_t p = 0; p < n_projections; ++p) {
        double norm = 0;
        do {
            norm = 0;
            for (auto& v : dir) {
                v = stream.next_normal();
                norm += v * v;
            }
        } while (norm == 0);
        norm = std::sqrt(norm);
        for (auto& v : dir) v /= norm;
        for (std::int64_t i = 0; i < na; ++i) {
            double s = 0;
            for (std::int64_t j = 0; j < d; ++j) s += A[i * d + j] * dir[static_cast<std::size_t>(j)];
            pa[static_cast<std::size_t>(i)] = s;
        }
        for (std::int64_t i = 0; i < nb; ++i) {
            double s = 0;
            for (std::int64_t j = 0; j < d; ++j) s += B[i * d + j] * dir[static_cast<std::size_t>(j)];
            pb[static_cast<std::size_t>(i)] = s;
        }
        acc += w2_squared_1d(pa, pb);
    }
    return std::sqrt(acc / static_cast<double>(n_projections));
}

std::pair<double, double> moment_stats(const Tensor<double>& A, const Tensor<double>& B) {
    if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[1])
        throw std::invalid_argument("moment_stats: want (n, d) sets of equal dimensionality");
    if (A.shape[0] < 2 || B.shape[0] < 2) throw std::invalid_argument("moment_stats: need at least 2 points");
    const std::int64_t d = A.shape[1];
    auto mean_of = [d](const Tensor<double>& x) {
        std::vector<double> mu(static_cast<std::size_t>(d), 0.0);
        const std::int64_t n = x.shape[0];
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < d; ++j) mu[static_cast<std::size_t>(j)] += x[i * d + j];
        for (auto& v : mu) v /= static_cast<double>(n);
        return mu;
    };
    auto cov_of = [d](const Tensor<double>& x, const std::vector<double>& mu) {
        const std::int64_t n = x.shape[0];
        std::vector<double> c(static_cast<std::size_t>(d * d), 0.0);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < d; ++j)
                for (std::int64_t l = 0; l < d; ++l)
                    c[static_cast<std::size_t>(j * d + l)] +=
                        (x[i * d + j] - mu[static_cast<std::size_t>(j)]) * (x[i * d + l] - mu[static_cast<std::size_t>(l)]);
        for (auto& v : c) v /= static_cast<double>(n - 1);
        return c;
    };
    const auto mua = mean_of(A), mub = mean_of(B);
    double mean_err = 0;
    for (std::int64_t j = 0; j < d; ++j) {
        const double dd = mua[static_cast<std::size_t>(j)] - mub[static_cast<std::size_t>(j)];
        mean_err += dd * dd;
    }
    mean_err = std::sqrt(mean_err);
    const auto ca = cov_of(A, mua), cb = cov_of(B, mub);
    double cov_err = 0;
    for (std::size_t i = 0; i < ca.size(); ++i) {
        const double dd = ca[i] - cb[i];
        cov_err += dd * dd;
    }
    return {mean_err, std::sqrt(cov_err)};
}

namespace {

// Per-step accumulation of feature distances across sampling chunks; chunk
// contributions are merged in chunk order so worker count does not matter.
struct TraceAccum {
    std::vector<std::vector<double>> sums;    // [chunk][step]
    std::vector<std::vector<std::int64_t>> counts;
    std::mutex mu;
};

double frob_distance_mean(const Tensor<float>& fa, const Tensor<float>& fb, bool per_token) {
    // fa, fb: (B, N, D); mean over batch of the Frobenius norm over (N, D)
    const std::int64_t b = fa.shape[0], n = fa.shape[1], ddim = fa.shape[2];
    double out = 0;
    for (std::int64_t i = 0; i < b; ++i) {
        double acc = 0;
        for (std::int64_t j = 0; j < n * ddim; ++j) {
            const double d = static_cast<double>(fa[i * n * ddim + j]) - static_cast<double>(fb[i * n * ddim + j]);
            acc += d * d;
        }
        if (per_token) acc /= static_cast<double>(n);
        out += std::sqrt(acc);
    }
    return out;  // caller divides by total chain count
}

} // namespace

FeatureDistanceTrace feature_distance_trace(const DeepFlowModel<float>& model, const SamplerConfig& sampler,
                                            std::int64_t n_samples,
                                            std::pair<std::int64_t, std::int64_t> branch_pair,
                                            FeatureMode mode, RngStream& stream, bool per_token_normalized) {
    if (model.cfg.k < 2) throw std::invalid_argument("feature_distance_trace: requires k >= 2");
    const auto [site, final_branch] = branch_pair;
    if (site < 1 || final_branch != model.cfg.k || site >= final_branch)
        throw std::invalid_argument("feature_distance_trace: invalid branch pair");
    if (mode == FeatureMode::post_vera && !model.cfg.vera_active())
        throw std::invalid_argument("feature_distance_trace: post-refiner mode needs an active refiner");

    const std::int64_t n_chunks = (n_samples + kSamplerChunk - 1) / kSamplerChunk;
    TraceAccum accum;
    accum.sums.assign(static_cast<std::size_t>(n_chunks), std::vector<double>(static_cast<std::size_t>(sampler.steps), 0.0));
    accum.counts.assign(static_cast<std::size_t>(n_chunks),
                        std::vector<std::int64_t>(static_cast<std::size_t>(sampler.steps), 0));

    std::vector<std::int64_t> class_ids(static_cast<std::size_t>(n_samples), -1);
    if (model.cfg.num_classes > 0) {
        RngStream cls = stream.child(9001);
        for (auto& id : class_ids)
            id = static_cast<std::int64_t>(cls.next_double() * static_cast<double>(model.cfg.num_classes));
    }

    ForwardRecorder<float> recorder = [&](std::int64_t step_index, double, std::int64_t chain_offset,
                                          Tape<float>& tape, const BranchOutputs<float>& outs) {
        if (step_index >= sampler.steps) return;  // skip the final deterministic step
        const std::size_t chunk = static_cast<std::size_t>(chain_offset / kSamplerChunk);
        const Tensor<float>& target = tape.val(outs.vstar[static_cast<std::size_t>(model.cfg.k - 1)]);
        const Tensor<float>& feat = mode == FeatureMode::post_vera
                                        ? tape.val(outs.refined[static_cast<std::size_t>(site - 1)])
                                        : tape.val(outs.vstar[static_cast<std::size_t>(site - 1)]);
        const double sum = frob_distance_mean(feat, target, per_token_normalized);
        std::lock_guard<std::mutex> lk(accum.mu);
        accum.sums[chunk][static_cast<std::size_t>(step_index)] += sum;
        accum.counts[chunk][static_cast<std::size_t>(step_index)] += feat.shape[0];
    };

    VelocityField<float> field = model_velocity_field(model, class_ids, sampler.cfg_scale, recorder);
    RngStream chain_stream = stream.child(1);
    if (sampler.kind == SamplerConfig::Kind::sde)
        sample_sde(field, model.cfg.geometry.sample_shape(), sampler, n_samples, chain_stream);
    else
        sample_ode(field, model.cfg.geometry.sample_shape(), sampler, n_samples, chain_stream);

    FeatureDistanceTrace trace;
    trace.branch_pair = branch_pair;
    const double dt = (sampler.t_end - sampler.t_start) / static_cast<double>(sampler.steps);
    double overall = 0;
    for (std::int64_t s = 0; s < sampler.steps; ++s) {
        double sum = 0;
        std::int64_t count = 0;
        for (std::int64_t c = 0; c < n_chunks; ++c) {
            sum += accum.sums[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)];
            count += accum.counts[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)];
        }
        const double mean = count > 0 ? sum / static_cast<double>(count) : 0.0;
        trace.per_timestep.emplace_back(sampler.t_start + static_cast<double>(s) * dt, mean);
        overall += mean;
    }
    trace.overall_mean = overall / static_cast<double>(sampler.steps);
    return trace;
}

MetricReport evaluate_run(const DeepFlowModel<float>& model, const DatasetSpec& data,
                          const SamplerConfig& sampler, const EvalOptions& opts, RngStream& stream) {
    if (opts.n < 1) throw std::invalid_argument("evaluate_run: n must be >= 1");
    MetricReport report;
    report.seed = stream.seed();
    report.n_generated = opts.n;
    report.n_reference = opts.n;
    report.feat_dist_pre = std::nan("");
    report.feat_dist_post = std::nan("");

    // class ids for generation: uniform over classes for conditional models
    std::vector<std::int64_t> class_ids(static_cast<std::size_t>(opts.n), -1);
    if (model.cfg.num_classes > 0) {
        RngStream cls = stream.child(11);
        for (auto& id : class_ids)
            id = static_cast<std::int64_t>(cls.next_double() * static_cast<double>(model.cfg.num_classes));
    }

    // feature distances recorded during the same generation pass
    const bool trace_on = opts.with_feature_trace && model.cfg.k >= 2;
    const std::int64_t n_chunks = (opts.n + kSamplerChunk - 1) / kSamplerChunk;
    std::vector<double> pre_sums(static_cast<std::size_t>(n_chunks), 0.0);
    std::vector<double> post_sums(static_cast<std::size_t>(n_chunks), 0.0);
    std::vector<std::int64_t> rec_counts(static_cast<std::size_t>(n_chunks), 0);
    std::mutex rec_mu;
    ForwardRecorder<float> recorder;
    if (trace_on) {
        recorder = [&](std::int64_t step_index, double, std::int64_t chain_offset, Tape<float>& tape,
                       const BranchOutputs<float>& outs) {
            if (step_index >= sampler.steps) return;
            const std::size_t chunk = static_cast<std::size_t>(chain_offset / kSamplerChunk);
            const Tensor<float>& target = tape.val(outs.vstar[static_cast<std::size_t>(model.cfg.k - 1)]);
            const double pre = frob_distance_mean(tape.val(outs.vstar[0]), target, false);
            const double post = model.cfg.vera_active()
                                    ? frob_distance_mean(tape.val(outs.refined[0]), target, false)
                                    : std::nan("");
            std::lock_guard<std::mutex> lk(rec_mu);
            pre_sums[chunk] += pre;
            if (model.cfg.vera_active()) post_sums[chunk] += post;
            rec_counts[chunk] += target.shape[0];
        };
    }

    VelocityField<float> field = model_velocity_field(model, class_ids, sampler.cfg_scale,
                                                      trace_on ? recorder : ForwardRecorder<float>{});
    RngStream chain_stream = stream.child(1);
    Tensor<float> samples = sampler.kind == SamplerConfig::Kind::sde
                                ? sample_sde(field, model.cfg.geometry.sample_shape(), sampler, opts.n, chain_stream)
                                : sample_ode(field, model.cfg.geometry.sample_shape(), sampler, opts.n, chain_stream);

    DatasetSpec ref_spec = data;
    ref_spec.n = opts.n;
    RngStream ref_stream = stream.child(2);
    const auto reference = generate(ref_spec, ref_stream);

    const std::int64_t e = model.cfg.geometry.sample_elems();
    Tensor<double> gen({opts.n, e});
    for (std::int64_t i = 0; i < samples.size(); ++i) gen[i] = static_cast<double>(samples[i]);
    Tensor<double> ref({opts.n, e});
    for (std::int64_t i = 0; i < reference.first.size(); ++i) ref[i] = static_cast<double>(reference.first[i]);

    RngStream proj = stream.child(3);
    report.sliced_w2 = sliced_wasserstein(gen, ref, opts.n_projections, proj);
    const auto [mean_err, cov_err] = moment_stats(gen, ref);
    report.mean_err = mean_err;
    report.cov_err = cov_err;

    if (trace_on) {
        double pre = 0, post = 0;
        std::int64_t count = 0;
        for (std::int64_t c = 0; c < n_chunks; ++c) {
            pre += pre_sums[static_cast<std::size_t>(c)];
            post += post_sums[static_cast<std::size_t>(c)];
            count += rec_counts[static_cast<std::size_t>(c)];
        }
        if (count > 0) {
            report.feat_dist_pre = pre / static_cast<double>(count);
            if (model.cfg.vera_active()) report.feat_dist_post = post / static_cast<double>(count);
        }
    }
    return report;
}

} // namespace deepflow
