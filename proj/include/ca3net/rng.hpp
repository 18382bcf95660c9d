#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <string_view>
#include <vector>

namespace ca3net {

/// Deterministic random source. The engine is std::mt19937_64 (whose state
/// evolution is fully specified by the standard); all derived draws (uniform
/// doubles, normals, bounded ints, shuffles) are implemented here with fixed
/// algorithms so that a seed reproduces the same stream on any platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller. Consumes exactly two engine draws per
    /// call (no cached spare) so the stream position stays predictable.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n));
    }

    /// Fisher-Yates shuffle using this stream.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    friend std::ostream& operator<<(std::ostream& os, const Rng& r) { return os << r.eng_; }
    friend std::istream& operator>>(std::istream& is, Rng& r) { return is >> r.eng_; }

    /// Derive an independent stream seed from a base seed and a tag. Used to
    /// give each identity / parameter group its own stream so adding or
    /// removing one consumer does not shift the draws of another.
    static std::uint64_t derive(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
        std::uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a
        for (char ch : tag) {
            h ^= static_cast<std::uint8_t>(ch);
            h *= 0x100000001b3ULL;
        }
        std::uint64_t z = seed ^ h ^ (index * 0x9e3779b97f4a7c15ULL);
        // splitmix64 finalizer
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 eng_;
};

} // namespace ca3net
