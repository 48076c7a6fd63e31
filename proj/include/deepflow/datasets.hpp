// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic data generators: desk-scale stand-ins for the
// class-conditional and unconditional training distributions.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "deepflow/network.hpp"
#include "deepflow/rng.hpp"
#include "deepflow/tensor.hpp"

namespace deepflow {

struct DatasetSpec {
    enum class Name { eight_gaussians, checkerboard, two_moons, tiny_bars };

    Name name = Name::eight_gaussians;
    std::int64_t n = 10000;
    double noise_std = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (n < 1) throw std::invalid_argument("dataset: n must be >= 1");
        if (noise_std < 0) throw std::invalid_argument("dataset: noise_std must be >= 0");
    }

    std::int64_t num_classes() const {
        switch (name) {
            case Name::eight_gaussians: return 8;
            case Name::checkerboard: return 0;
            case Name::two_moons: return 2;
            case Name::tiny_bars: return 8;
        }
        return 0;
    }

    DataGeometry geometry() const {
        DataGeometry g;
        if (name == Name::tiny_bars) {
            g.kind = GeometryKind::image;
            g.channels = 1;
            g.height = 8;
            g.width = 8;
            g.patch = 2;
        } else {
            g.kind = GeometryKind::point;
            g.point_dim = 2;
        }
        return g;
    }
};

const char* to_string(DatasetSpec::Name n);
DatasetSpec::Name dataset_name_from(const std::string& s);

// Draws spec.n samples from the generator. Labels are a deterministic
// function of the structure each point was drawn from; unconditional sets
// return all -1.
std::pair<Tensor<float>, std::vector<std::int64_t>> generate(const DatasetSpec& spec, RngStream& stream);

// Sliced-W2 between two independent reference draws of size n: the noise
// floor generated-vs-reference metrics are compared against.
double reference_baseline(const DatasetSpec& spec, std::int64_t n, RngStream& stream,
                          std::int64_t n_projections = 128);

} // namespace deepflow
