#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace latent_lens {

using Rng = std::mt19937_64;

/// Deterministically derives a child seed for a named random stream.
/// Mixing is FNV-1a over the tag followed by a splitmix64 finalizer, so the
/// result is stable across platforms and standard-library implementations.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) noexcept;

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) noexcept;

inline Rng make_rng(std::uint64_t base, std::string_view tag) {
  return Rng(derive_seed(base, tag));
}

}  // namespace latent_lens
