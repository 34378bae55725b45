#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace stabforge {

using Rng = std::mt19937_64;

/// 64-bit FNV-1a. Stable across platforms, used for seeds and vocab hashes.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derives an independent stream seed from a run seed and a key such as a sample id.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view key) {
    std::uint64_t h = fnv1a(key, 0xcbf29ce484222325ULL ^ (seed * 0x9e3779b97f4a7c15ULL));
    // splitmix finalizer
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ULL;
    h ^= h >> 27;
    h *= 0x94d049bb133111ebULL;
    h ^= h >> 31;
    return h;
}

/// Uniform double in the open interval (0, 1).
inline double uniform_open(Rng& rng) {
    for (;;) {
        double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        if (u > 0.0) return u;
    }
}

inline double gumbel_noise(Rng& rng) { return -std::log(-std::log(uniform_open(rng))); }

inline double standard_normal(Rng& rng) {
    // Box-Muller; keeps results independent of the standard library's distribution choice.
    const double u1 = uniform_open(rng);
    const double u2 = uniform_open(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

/// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    return static_cast<std::size_t>(uniform_open(rng) * static_cast<double>(n)) % n;
}

template <class It>
void shuffle(It first, It last, Rng& rng) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = uniform_index(rng, i);
        std::swap(first[i - 1], first[j]);
    }
}

} // namespace stabforge
