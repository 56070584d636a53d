#pragma once

#include <cstdint>
#include <random>

namespace dcl {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent streams from (seed, key).
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t key) noexcept {
    return mix64(mix64(seed) ^ (key * 0xd1b54a32d192ed03ULL));
}

/// Uniform double in [0, 1) from a 64-bit hash value.
constexpr double unit_from_bits(std::uint64_t bits) noexcept {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

} // namespace dcl
