#pragma once

// Seeded randomness with a pinned algorithm. Every draw is derived from
// std::mt19937_64 output words through integer-only transforms, so sequences
// are identical across standard libraries.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace kappabench {

class SeededRng {
public:
    static constexpr const char* kAlgorithm = "mt19937_64/rejection-bounded/v1";

    explicit SeededRng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform integer in [0, bound). Rejects the low (2^64 mod bound) words.
    std::uint64_t below(std::uint64_t bound) {
        if (bound <= 1) return 0;
        const std::uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            const std::uint64_t r = engine_();
            if (r >= threshold) return r % bound;
        }
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return unit() < p; }

    /// Box-Muller normal draw.
    double normal(double mean, double sd) {
        double u1 = unit();
        while (u1 <= 0.0) u1 = unit();
        const double u2 = unit();
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
        return mean + sd * z;
    }

    /// Normal draw truncated at zero by resampling.
    double truncated_normal(double mean, double sd) {
        if (sd <= 0.0) return mean > 0.0 ? mean : 0.0;
        for (int i = 0; i < 1000; ++i) {
            const double x = normal(mean, sd);
            if (x >= 0.0) return x;
        }
        return 0.0;
    }

private:
    std::mt19937_64 engine_;
};

/// In-place Fisher-Yates, walking from the back.
template <typename T>
void fisher_yates(std::span<T> items, SeededRng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        using std::swap;
        swap(items[i - 1], items[j]);
    }
}

/// splitmix64 finaliser; derives independent sub-seeds from (seed, key hash).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key) {
    std::uint64_t z = (seed ^ key) + 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace kappabench
