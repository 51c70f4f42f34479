#ifndef COLUMBUS_RNG_HPP
#define COLUMBUS_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace columbus {

// splitmix64 finalizer, used to derive independent stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return mix64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

// Deterministic random stream. All draws go through explicit transforms of
// mt19937_64 output so results do not depend on the standard library's
// distribution implementations.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed)
        : engine_(mix64(seed)), origin_(mix64(seed)) {}

    // Derive an independent stream; same (seed, tag) always gives the same stream.
    RngStream split(std::uint64_t tag) const {
        return RngStream(hash_combine(origin_, tag));
    }

    std::uint64_t bits() { return engine_(); }

    // Uniform on [0, 1).
    double uniform() {
        return static_cast<double>(bits() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(bits() % n);
    }

    // Standard normal via Box-Muller.
    double gauss() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(6.283185307179586476925286766559 * u2);
    }

    // k distinct indices from [0, n) via partial Fisher-Yates.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        if (k > n) k = n;
        for (std::size_t i = 0; i < k; ++i) {
            std::size_t j = i + index(n - i);
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

private:
    std::mt19937_64 engine_;
    std::uint64_t origin_;
};

} // namespace columbus

#endif
