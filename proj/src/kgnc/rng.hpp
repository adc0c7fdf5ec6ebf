#pragma once

#include <cstdint>
#include <cmath>

namespace kgnc {

// Deterministic pseudo-random source. All draws are derived from raw 64-bit
// outputs through fixed arithmetic, so sequences are reproducible across
// platforms and standard-library versions (std::normal_distribution makes no
// such promise).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed == 0 ? 0x9e3779b97f4a7c15ULL : seed) {
        // warm up splitmix so nearby seeds decorrelate
        for (int i = 0; i < 4; ++i) next();
    }

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0,n), rejection-sampled to avoid modulo bias.
    std::uint64_t integer(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller; one value per call keeps the stream
    // position independent of how results are consumed.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Independent sub-stream; tag separates usages under the same seed.
    Rng fork(std::uint64_t tag) const {
        Rng r(state_ ^ (0xd1b54a32d192ed03ULL * (tag + 1)));
        return r;
    }

private:
    std::uint64_t state_;
};

} // namespace kgnc
