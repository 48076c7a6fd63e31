// SPDX-License-Identifier: Apache-2.0
//
// Counter-based deterministic RNG streams. A stream is fully described by
// (seed, stream_id, counter), so any pipeline state can be checkpointed and
// restored exactly, and worker sharding never changes the numbers a given
// consumer sees.

#pragma once

#include <cmath>
#include <cstdint>

namespace deepflow {

namespace detail {

// splitmix64 finalizer; full-avalanche mixing of a 64-bit word.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

} // namespace detail

class RngStream {
public:
    RngStream() : RngStream(0, 0) {}
    RngStream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t counter = 0)
        : seed_(seed),
          stream_id_(stream_id),
          key_(detail::mix64(seed ^ detail::mix64(stream_id ^ 0x5851f42d4c957f2dull))),
          counter_(counter) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }
    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t c) { counter_ = c; }

    // Derive an independent child stream, e.g. one per sampling chain.
    RngStream child(std::uint64_t index) const {
        return RngStream(seed_, detail::mix64(stream_id_ ^ detail::mix64(index + 1)));
    }

    std::uint64_t next_u64() { return detail::mix64(key_ + counter_++ * 0x9e3779b97f4a7c15ull); }

    // Uniform in [0, 1), 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1]; safe as a log() argument.
    double next_double_open() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    // Standard normal via Box-Muller (cosine branch). Two u64 draws per call.
    double next_normal() {
        const double u1 = next_double_open();
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

private:
    std::uint64_t seed_;
    std::uint64_t stream_id_;
    std::uint64_t key_;
    std::uint64_t counter_;
};

} // namespace deepflow
