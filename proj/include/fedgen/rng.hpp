#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace fedgen {

/// Deterministic random stream (splitmix64 core). Distributions are
/// implemented here rather than taken from <random> so that results do not
/// depend on the standard library implementation.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
        // Rejection sampling to avoid modulo bias.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return lo + static_cast<std::int64_t>(v % range);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (has_cached_) {
            has_cached_ = false;
            return mean + stddev * cached_;
        }
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return mean + stddev * r * std::cos(theta);
    }

    /// Gamma(alpha, 1) by Marsaglia-Tsang, with the standard boost for alpha < 1.
    double gamma(double alpha) {
        if (alpha < 1.0) {
            const double u = uniform01();
            return gamma(alpha + 1.0) * std::pow(u > 0 ? u : 1e-300, 1.0 / alpha);
        }
        const double d = alpha - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            const double u = uniform01();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    /// Fisher-Yates shuffle.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

/// Splittable seed hierarchy: every stochastic choice draws from a stream
/// derived from (purpose, a, b) so results are reproducible and independent
/// of execution order.
class SeedTree {
public:
    explicit SeedTree(std::uint64_t master) : master_(master) {}

    std::uint64_t master() const { return master_; }

    std::uint64_t derive(std::string_view purpose, std::uint64_t a = 0, std::uint64_t b = 0) const {
        std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the purpose tag
        for (char ch : purpose) {
            h ^= static_cast<unsigned char>(ch);
            h *= 0x100000001b3ULL;
        }
        return mix(mix(mix(master_ ^ h, a ^ 0xa0761d6478bd642fULL), b ^ 0xe7037ed1a0b428dbULL), h);
    }

    RngStream stream(std::string_view purpose, std::uint64_t a = 0, std::uint64_t b = 0) const {
        return RngStream(derive(purpose, a, b));
    }

private:
    static std::uint64_t mix(std::uint64_t x, std::uint64_t y) {
        x += 0x9e3779b97f4a7c15ULL + y;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::uint64_t master_;
};

}  // namespace fedgen
