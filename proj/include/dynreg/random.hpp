#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace dynreg {

// Counter-based random numbers: every draw is a pure function of (seed, stream, counter),
// so results do not depend on evaluation order or thread count.

constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) noexcept {
  return splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ counter);
}

/// Uniform draw in the open interval (0, 1).
constexpr double uniform_open01(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) noexcept {
  const std::uint64_t bits = counter_hash(seed, stream, counter) >> 11;  // 53 bits
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

/// Standard normal via Box-Muller on the uniform pair at counters (2k, 2k+1).
inline double standard_normal(std::uint64_t seed, std::uint64_t stream, std::uint64_t k) noexcept {
  const double u1 = uniform_open01(seed, stream, 2 * k);
  const double u2 = uniform_open01(seed, stream, 2 * k + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace dynreg
