#pragma once

#include <cstdint>
#include <random>

namespace off2on {

/// Deterministic random source. All stochastic code in this project draws
/// from an Rng that is ultimately derived from the single run seed; nothing
/// reads the wall clock or std::random_device.
///
/// The uniform/normal transforms are implemented here (rather than with
/// std::*_distribution) because the standard leaves those algorithms
/// implementation-defined and we want streams that are stable across
/// compilers and standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    /// Derives an independent child stream. fork(k) is a pure function of
    /// (seed, k), so streams can be created in any order.
    Rng fork(std::uint64_t stream) const;

    std::uint64_t next_u64();

    /// Uniform on [0, 1).
    double uniform();
    /// Uniform on [lo, hi).
    double uniform(double lo, double hi);
    /// Uniform integer on [0, n). Requires n > 0.
    std::int64_t uniform_int(std::int64_t n);
    /// Standard normal draw (Box-Muller; second value of each pair is cached,
    /// so interleavings of normal() and other draws are part of the stream).
    double normal();

    std::uint64_t seed() const noexcept { return seed_; }

    /// SplitMix64 mixing step, exposed for seed-derivation and hashing.
    static std::uint64_t splitmix64(std::uint64_t x);

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_cached_normal_ = false;
    double cached_normal_ = 0.0;
};

}  // namespace off2on
