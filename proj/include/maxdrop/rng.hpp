#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace maxdrop {

// Seeded random stream.
//
// Algorithm (fixed, part of the reproducibility contract):
//   - engine: std::mt19937_64 seeded with splitmix64(seed); the standard pins
//     the mt19937_64 output sequence bit-exactly, so identical seeds yield
//     identical streams on every conforming implementation.
//   - uniform doubles take the top 53 bits of one engine output; bounded
//     integers use Lemire's multiply-shift reduction; normals use Box-Muller.
//     None of these go through std::*_distribution, whose output is
//     implementation-defined.
//   - split(stream) derives an independent child stream from the *original*
//     seed and the stream id only. How much the parent (or any sibling) has
//     been consumed never affects a child's draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be >= 1.
    std::uint64_t uniform_int(std::uint64_t n) {
        // Lemire multiply-shift; bias is unreachable for the n used here
        // (rejection loop keeps it exact regardless).
        while (true) {
            std::uint64_t x = next_u64();
            __uint128_t m = static_cast<__uint128_t>(x) * n;
            auto lo = static_cast<std::uint64_t>(m);
            if (lo >= n || lo >= (0 - n) % n) return static_cast<std::uint64_t>(m >> 64);
        }
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; draws two uniforms per call so the stream advance is fixed.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Child stream derived purely from (original seed, stream id).
    Rng split(std::uint64_t stream) const {
        return Rng(splitmix64(seed_ + 0x9E3779B97F4A7C15ULL * (stream + 1)));
    }

    static std::uint64_t splitmix64(std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace maxdrop
