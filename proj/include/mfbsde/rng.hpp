#pragma once

#include <cmath>
#include <cstdint>

namespace mfbsde {

// Counter-based noise streams: every variate is a pure function of
// (seed, stream, step, component), so particle loops can be scheduled on any
// number of workers without changing a single bit of output.
namespace rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t key(std::uint64_t seed, std::uint64_t stream,
                         std::uint64_t step, std::uint64_t component) {
  std::uint64_t h = splitmix64(seed ^ 0x5851f42d4c957f2dULL);
  h = splitmix64(h ^ stream);
  h = splitmix64(h ^ (step * 0x9e3779b97f4a7c15ULL));
  h = splitmix64(h ^ (component * 0xda942042e4dd58b5ULL));
  return h;
}

/// Uniform draw in the open interval (0,1); never returns 0 or 1.
inline double uniform01(std::uint64_t k) {
  return (static_cast<double>(k >> 11) + 0.5) * 0x1.0p-53;
}

/// Standard normal variate for (seed, stream, step, component).
inline double normal(std::uint64_t seed, std::uint64_t stream,
                     std::uint64_t step, std::uint64_t component) {
  const double u1 = uniform01(key(seed, stream, step, 2 * component));
  const double u2 = uniform01(key(seed, stream, step, 2 * component + 1));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
}

/// Step tag reserved for initial-condition draws (never a time index).
inline constexpr std::uint64_t kInitStep = 0xffffffffffffffffULL;

}  // namespace rng
}  // namespace mfbsde
