// SPDX-License-Identifier: MIT
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace voxelage {

// All randomness in the library flows through this wrapper so that results
// are reproducible across platforms. std::mt19937_64 has a standardized
// output sequence; the distributions below are hand-rolled because the
// standard library ones are implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1) with 53 bits of randomness
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_index(uint64_t n) {
        // rejection sampling to avoid modulo bias
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = gen_();
        while (v >= limit) v = gen_();
        return v % n;
    }

    // standard normal via Box-Muller, one value per call
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// splitmix64, used to derive independent child seeds from (base, tag...) so
// parallel workers can own private generators without coordinating.
inline uint64_t mix_seed(uint64_t a) {
    a += 0x9e3779b97f4a7c15ull;
    a = (a ^ (a >> 30)) * 0xbf58476d1ce4e5b9ull;
    a = (a ^ (a >> 27)) * 0x94d049bb133111ebull;
    return a ^ (a >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t tag) {
    return mix_seed(base ^ mix_seed(tag));
}

inline uint64_t derive_seed(uint64_t base, uint64_t tag1, uint64_t tag2) {
    return derive_seed(derive_seed(base, tag1), tag2);
}

}  // namespace voxelage
