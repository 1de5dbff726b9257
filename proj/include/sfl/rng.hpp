#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace sfl {

using Rng = std::mt19937_64;

/// Derives an independent seed for a named component stream from a master
/// seed, so that the data, init and shuffle streams never share draws.
std::uint64_t derive_seed(std::uint64_t master, std::string_view label, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t master, std::string_view label, std::uint64_t index = 0) {
    return Rng(derive_seed(master, label, index));
}

/// Uniform integer in [0, bound) by rejection; independent of the standard
/// library's distribution implementation.
std::uint64_t uniform_index(Rng& rng, std::uint64_t bound);

/// Uniform double in [0, 1) with 53 random bits.
double uniform01(Rng& rng);

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Standard normal via Box-Muller.
double standard_normal(Rng& rng);

}  // namespace sfl
