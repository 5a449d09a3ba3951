#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace respeak {

// Deterministic RNG used everywhere. All draws go through the helpers below
// (no std::*_distribution) so seeded streams are reproducible regardless of
// standard-library version.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n), n >= 1
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
    }

    // uniform integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) { return lo + uniform_int(hi - lo + 1); }

    bool bernoulli(double p) { return uniform() < p; }

    // standard normal, Box-Muller with cached second draw
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        cached_ = r * std::sin(2.0 * M_PI * u2);
        has_cached_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // fork a child stream; key decorrelates children of the same parent
    Rng fork(uint64_t key) { return Rng(next_u64() ^ (key * 0x9e3779b97f4a7c15ull)); }

private:
    std::mt19937_64 engine_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

} // namespace respeak
