#pragma once

#include <cstdint>

namespace peampc {

/// Purpose tags used to key independent random streams. Streams keyed by
/// (master seed, run index, step, purpose) are mutually independent, so the
/// disturbance sequence of a run never depends on which controller consumed
/// how much randomness elsewhere.
enum class RngPurpose : std::uint64_t {
    Disturbance = 1,
    InjectedNoise = 2,
    TubeSampling = 3,
    ReferenceTubeSampling = 4,
    Rollout = 5,
    Bootstrap = 6,
    Generic = 7,
};

/// Deterministic counter-based random stream (splitmix64 core). All draws in
/// the project go through this type; std:: distributions are avoided because
/// their output is implementation-defined.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : state_(seed) {}

    /// Derive a stream from a composite key. Mixing is injective enough for
    /// the handful of indices used here; collisions across purposes are not a
    /// concern at these scales.
    static RngStream keyed(std::uint64_t master, std::uint64_t run,
                           std::uint64_t step, RngPurpose purpose);

    std::uint64_t next_u64();

    /// Uniform on [0, 1).
    double next_double();

    /// Uniform on (0, 1] (never returns 0; safe for logarithms).
    double next_open_double();

    /// Uniform on [lo, hi).
    double next_uniform(double lo, double hi);

    /// Standard normal via Box-Muller (one value per call, deterministic).
    double next_gaussian();

    /// Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n);

private:
    std::uint64_t state_;
};

} // namespace peampc
