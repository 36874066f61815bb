#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cfseq {

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Seed for the named substream `stream` of `root`, optionally indexed
/// (per-unit streams use the unit id as index).
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t index = 0);

inline Rng substream(std::uint64_t root, std::string_view stream, std::uint64_t index = 0) {
    return Rng(derive_seed(root, stream, index));
}

double uniform01(Rng& rng);
double standard_normal(Rng& rng);
/// Uniform integer in [lo, hi].
std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi);

}  // namespace cfseq
