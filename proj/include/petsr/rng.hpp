#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace petsr {

/// SplitMix64 stream. The state is a plain 64-bit counter advanced by the
/// golden-ratio increment 0x9E3779B97F4A7C15; each output is the counter
/// passed through the SplitMix64 finalizer:
///
///   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///   z =  z ^ (z >> 31)
///
/// Uniform doubles take the top 53 bits. Normals use Box-Muller with the
/// cosine branch only (two uniforms per normal), so the sequence never depends
/// on cached state. Streams for sub-tasks are derived with `derive(tag)`.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix(state_);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1].
  double uniform_open_low() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Uses multiply-shift on the top 32 bits; n < 2^32.
  std::uint32_t below(std::uint32_t n) {
    const std::uint64_t r = next_u64() >> 32;
    return static_cast<std::uint32_t>((r * n) >> 32);
  }

  double normal() {
    const double u1 = uniform_open_low();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent stream keyed by (current seed state, tag).
  Rng derive(std::uint64_t tag) const { return Rng(mix(state_ ^ mix(tag + 0x632BE59BD9B4E019ULL))); }

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

}  // namespace petsr
