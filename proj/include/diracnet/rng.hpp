#pragma once

#include <cstdint>
#include <random>

#include "diracnet/tensor.hpp"

namespace diracnet {

/// splitmix64 step; used to derive independent streams from one seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Deterministic sub-seed for (seed, stream, index) triples, so parallel
/// consumers (per-image augmentation, per-epoch shuffles) stay reproducible
/// regardless of scheduling.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
    return splitmix64(splitmix64(seed ^ 0x6a09e667f3bcc909ull) + splitmix64(stream) * 0x9e3779b97f4a7c15ull + index);
}

/// Seeded random source for initialization, shuffling and augmentation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(splitmix64(seed)) {}

    std::mt19937_64& engine() { return eng_; }

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(eng_);
    }

    double uniform(double lo = 0.0, double hi = 1.0) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(eng_);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
        return d(eng_);
    }

    bool coin() { return below(2) == 1; }

private:
    std::mt19937_64 eng_;
};

template <typename T>
void fill_normal(TensorT<T>& t, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal(mean, stddev));
}

template <typename T>
void fill_uniform(TensorT<T>& t, Rng& rng, double lo, double hi) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
}

}  // namespace diracnet
