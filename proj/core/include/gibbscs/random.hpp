#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace gibbscs {

// The single generator type used everywhere. All randomness in a run flows
// from one root seed through derive_seed(), so equal seeds give bit-identical
// results on the same build.
using Rng = std::mt19937_64;

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x) noexcept;

// Deterministic child seed for a named stream, optionally indexed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream,
                          std::uint64_t index = 0) noexcept;

inline Rng make_rng(std::uint64_t root, std::string_view stream, std::uint64_t index = 0) {
  return Rng(derive_seed(root, stream, index));
}

}  // namespace gibbscs
