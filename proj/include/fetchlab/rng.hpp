// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace fetchlab {

// splitmix64 finalizer; used both as a PRNG step and as a seed mixer.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic seed derivation: mix_seed(base, a, b, ...) folds each tag in turn.
inline std::uint64_t mix_seed(std::uint64_t base) { return base; }

template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t tag, Rest... rest) {
    std::uint64_t s = base ^ (tag + 0x9e3779b97f4a7c15ULL + (base << 6) + (base >> 2));
    std::uint64_t st = s;
    return mix_seed(splitmix64(st), rest...);
}

// Small deterministic generator. All distributions are implemented here rather
// than via <random> adaptors: the standard leaves normal/uniform sampling
// algorithms unspecified, and trace outputs must be reproducible per seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed), spare_valid_(false) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    // Uniform on [0, 1) with 53 bits of precision.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    bool bernoulli(double p) { return uniform01() < p; }

    // Uniform integer in [0, n). Rejection-free modulo bias is negligible for
    // the n used here, but use Lemire-style multiply-shift anyway.
    std::uint64_t below(std::uint64_t n) {
        __uint128_t m = static_cast<__uint128_t>(next_u64()) * n;
        return static_cast<std::uint64_t>(m >> 64);
    }

    // Marsaglia polar method; one spare cached per pair.
    double normal(double mu, double sigma) {
        if (spare_valid_) {
            spare_valid_ = false;
            return mu + sigma * spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform01() - 1.0;
            v = 2.0 * uniform01() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        spare_valid_ = true;
        return mu + sigma * u * f;
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool spare_valid_;
};

} // namespace fetchlab
