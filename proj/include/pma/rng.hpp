#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace pma {

/// Seeded 64-bit generator with platform-independent draws. The engine is
/// std::mt19937_64; the distributions are written out here because the
/// standard ones are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    /// Standard normal via Box-Muller; no cached second draw, so the state
    /// is exactly the engine state.
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    std::string state() const;
    void set_state(const std::string& s);

private:
    std::mt19937_64 engine_;
};

/// Mixes several values into one seed (splitmix64 finalizer chain).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

}  // namespace pma
