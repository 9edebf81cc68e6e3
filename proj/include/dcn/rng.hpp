#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace dcn {

// Counter-based generator (splitmix64). The stream is a pure function of
// (seed, counter), so identical seeds give identical value streams on every
// platform, and substreams can be derived without sharing mutable state.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), counter_(0) {}

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() {
        uint64_t z = seed_ + 0x9e3779b97f4a7c15ULL * ++counter_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller (cosine branch only; no cached spare,
    // so the draw count per call is fixed).
    double normal() {
        double u = 1.0 - uniform();
        double v = uniform();
        return std::sqrt(-2.0 * std::log(u)) * std::cos(6.283185307179586477 * v);
    }

    // Uniform integer in [0, n). Multiply-shift; bias is < 2^-64 per draw.
    uint64_t below(uint64_t n) {
        return static_cast<uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derives an independent substream; used for per-sample / per-step
    // streams that must not depend on evaluation order.
    Rng fork(uint64_t key) const { return Rng(mix(seed_, key)); }
    Rng fork(uint64_t k1, uint64_t k2) const { return Rng(mix(mix(seed_, k1), k2)); }
    Rng fork(uint64_t k1, uint64_t k2, uint64_t k3) const {
        return Rng(mix(mix(mix(seed_, k1), k2), k3));
    }

    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    uint64_t seed_;
    uint64_t counter_;
};

} // namespace dcn
