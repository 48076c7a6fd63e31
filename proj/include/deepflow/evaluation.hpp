// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale generation metrics (sliced Wasserstein, moment diagnostics)
// and the inter-branch feature-distance diagnostic.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "deepflow/datasets.hpp"
#include "deepflow/network.hpp"
#include "deepflow/rng.hpp"
#include "deepflow/sampling.hpp"
#include "deepflow/tensor.hpp"

namespace deepflow {

struct MetricReport {
    double sliced_w2 = 0;
    double mean_err = 0;
    double cov_err = 0;
    std::int64_t n_generated = 0;
    std::int64_t n_reference = 0;
    std::uint64_t seed = 0;
    // Mean refiner-site feature distances recorded during generation;
    // NaN when the model has a single branch.
    double feat_dist_pre = 0;
    double feat_dist_post = 0;
};

// Average over random unit directions of the 1D 2-Wasserstein distance of
// the projected sets; returns sqrt of the averaged squared distance.
// A, B: (n, d) point sets (images are flattened rows).
double sliced_wasserstein(const Tensor<double>& A, const Tensor<double>& B, std::int64_t n_projections,
                          RngStream& stream);

// (L2 distance of means, Frobenius distance of covariance matrices).
std::pair<double, double> moment_stats(const Tensor<double>& A, const Tensor<double>& B);

struct FeatureDistanceTrace {
    std::vector<std::pair<double, double>> per_timestep;  // (t, mean distance)
    double overall_mean = 0;
    std::pair<std::int64_t, std::int64_t> branch_pair;    // (site i, final branch k)
};

enum class FeatureMode { pre_vera, post_vera };

// Records, at every solver step of an SDE sampling run, the mean Euclidean
// (Frobenius over tokens x channels) distance between branch-pair features:
// site i's refined output (or raw vstar_i in pre mode) against vstar_k.
FeatureDistanceTrace feature_distance_trace(const DeepFlowModel<float>& model, const SamplerConfig& sampler,
                                            std::int64_t n_samples,
                                            std::pair<std::int64_t, std::int64_t> branch_pair,
                                            FeatureMode mode, RngStream& stream,
                                            bool per_token_normalized = false);

struct EvalOptions {
    std::int64_t n = 2000;
    std::int64_t n_projections = 128;
    bool with_feature_trace = true;
};

// Generates n samples with the configured sampler, draws a fresh reference
// set, and reports all metrics. Feature distances are recorded during the
// same sampling pass when the model has k >= 2.
MetricReport evaluate_run(const DeepFlowModel<float>& model, const DatasetSpec& data,
                          const SamplerConfig& sampler, const EvalOptions& opts, RngStream& stream);

} // namespace deepflow
