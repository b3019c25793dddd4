#pragma once

// Counter-based random streams: every draw is a pure function of
// (seed, stream, counter), so samples do not depend on evaluation order or on
// how replicas are distributed over workers.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace rhl {

namespace detail {

inline constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Derives an independent 64-bit key from a parent key and a label.
inline constexpr std::uint64_t derive_key(std::uint64_t parent, std::uint64_t label) noexcept {
  return detail::splitmix64(detail::splitmix64(parent) ^ detail::splitmix64(label + 0x632be59bd9b4e019ULL));
}

class CounterRng {
 public:
  constexpr CounterRng(std::uint64_t seed, std::uint64_t stream) noexcept
      : key_(derive_key(seed, stream)) {}

  constexpr std::uint64_t key() const noexcept { return key_; }

  constexpr std::uint64_t bits(std::uint64_t counter) const noexcept {
    return detail::splitmix64(key_ ^ detail::splitmix64(counter));
  }

  /// Uniform in (0, 1), never exactly 0 or 1.
  double uniform(std::uint64_t counter) const noexcept {
    return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller on counters (2c, 2c+1).
  double normal(std::uint64_t counter) const noexcept {
    const double u1 = uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t key_;
};

}  // namespace rhl
