// SPDX-License-Identifier: Apache-2.0

#include "deepflow/datasets.hpp"

#include <cmath>

#include "deepflow/evaluation.hpp"

namespace deepflow {

const char* to_string(DatasetSpec::Name n) {
    switch (n) {
        case DatasetSpec::Name::eight_gaussians: return "eight_gaussians";
        case DatasetSpec::Name::checkerboard: return "checkerboard";
        case DatasetSpec::Name::two_moons: return "two_moons";
        case DatasetSpec::Name::tiny_bars: return "tiny_bars";
    }
    return "?";
}

DatasetSpec::Name dataset_name_from(const std::string& s) {
    if (s == "eight_gaussians") return DatasetSpec::Name::eight_gaussians;
    if (s == "checkerboard") return DatasetSpec::Name::checkerboard;
    if (s == "two_moons") return DatasetSpec::Name::two_moons;
    if (s == "tiny_bars") return DatasetSpec::Name::tiny_bars;
    throw std::invalid_argument("unknown dataset name: " + s);
}

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

void eight_gaussians_point(double noise_std, RngStream& s, float* xy, std::int64_t* label) {
    const std::int64_t j = static_cast<std::int64_t>(s.next_double() * 8.0);
    const double angle = 2.0 * kPi * static_cast<double>(j) / 8.0;
    xy[0] = static_cast<float>(2.0 * std::cos(angle) + noise_std * s.next_normal());
    xy[1] = static_cast<float>(2.0 * std::sin(angle) + noise_std * s.next_normal());
    *label = j;
}

void checkerboard_point(RngStream& s, float* xy, std::int64_t* label) {
    // 4x4 board on [-4,4]^2; black squares are the (i+j) even cells.
    const std::int64_t cell = static_cast<std::int64_t>(s.next_double() * 8.0);
    const std::int64_t row = cell / 2;
    const std::int64_t col = 2 * (cell % 2) + (row % 2 == 0 ? 0 : 1);
    const double u = s.next_double();
    const double v = s.next_double();
    xy[0] = static_cast<float>(-4.0 + 2.0 * (static_cast<double>(col) + u));
    xy[1] = static_cast<float>(-4.0 + 2.0 * (static_cast<double>(row) + v));
    *label = -1;
}

void two_moons_point(double noise_std, RngStream& s, float* xy, std::int64_t* label) {
    const std::int64_t j = s.next_double() < 0.5 ? 0 : 1;
    const double phi = kPi * s.next_double();
    double x, y;
    if (j == 0) {
        x = std::cos(phi);
        y = std::sin(phi);
    } else {
        x = 1.0 - std::cos(phi);
        y = 0.5 - std::sin(phi);
    }
    xy[0] = static_cast<float>(x + noise_std * s.next_normal());
    xy[1] = static_cast<float>(y + noise_std * s.next_normal());
    *label = j;
}

void tiny_bars_image(double noise_std, RngStream& s, float* img, std::int64_t* label) {
    const std::int64_t j = static_cast<std::int64_t>(s.next_double() * 8.0);
    for (std::int64_t r = 0; r < 8; ++r)
        for (std::int64_t c = 0; c < 8; ++c)
            img[r * 8 + c] = static_cast<float>((r == j ? 1.0 : 0.0) + noise_std * s.next_normal());
    *label = j;
}

} // namespace

std::pair<Tensor<float>, std::vector<std::int64_t>> generate(const DatasetSpec& spec, RngStream& stream) {
    spec.validate();
    const DataGeometry geo = spec.geometry();
    Tensor<float> points(geo.batch_shape(spec.n));
    std::vector<std::int64_t> labels(static_cast<std::size_t>(spec.n), -1);
    const std::int64_t e = geo.sample_elems();
    for (std::int64_t i = 0; i < spec.n; ++i) {
        float* row = points.ptr() + i * e;
        std::int64_t* lab = &labels[static_cast<std::size_t>(i)];
        switch (spec.name) {
            case DatasetSpec::Name::eight_gaussians: eight_gaussians_point(spec.noise_std, stream, row, lab); break;
            case DatasetSpec::Name::checkerboard: checkerboard_point(stream, row, lab); break;
            case DatasetSpec::Name::two_moons: two_moons_point(spec.noise_std, stream, row, lab); break;
            case DatasetSpec::Name::tiny_bars: tiny_bars_image(spec.noise_std, stream, row, lab); break;
        }
    }
    return {std::move(points), std::move(labels)};
}

// Two independent draws taken sequentially from the same stream, then the
// projection directions.
double reference_baseline(const DatasetSpec& spec, std::int64_t n, RngStream& stream,
                          std::int64_t n_projections) {
    DatasetSpec draw = spec;
    draw.n = n;
    const std::int64_t e = spec.geometry().sample_elems();
    auto flatten = [e, n](const Tensor<float>& t) {
        Tensor<double> out({n, e});
        for (std::int64_t i = 0; i < t.size(); ++i) out[i] = static_cast<double>(t[i]);
        return out;
    };
    const auto a = generate(draw, stream);
    const auto b = generate(draw, stream);
    return sliced_wasserstein(flatten(a.first), flatten(b.first), n_projections, stream);
}

} // namespace deepflow
