#pragma once

// Platform-stable random helpers. The standard distributions are
// implementation-defined, so sampling that must reproduce bit-for-bit across
// toolchains goes through these instead.

#include <cmath>
#include <cstdint>
#include <random>

namespace dualmod {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministically mixes a list of integers into one seed.
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (auto p : parts) h = splitmix64(h ^ splitmix64(p));
  return h;
}

/// Uniform double in [0, 1) from the top 53 bits.
template <typename Engine>
double uniform01(Engine& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Unbiased integer in [0, n).
template <typename Engine>
std::uint64_t uniform_index(Engine& rng, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % n;
}

/// Standard normal via Box-Muller (one draw per call, second value discarded).
template <typename Engine>
double standard_normal(Engine& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

/// Counter-based stream: value i of the stream keyed by `key`.
struct CounterRng {
  std::uint64_t key;
  std::uint64_t counter = 0;
  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return UINT64_MAX; }
  result_type operator()() { return splitmix64(key ^ splitmix64(counter++)); }
};

}  // namespace dualmod
