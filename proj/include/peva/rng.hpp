#pragma once

#include <array>
#include <cstdint>
#include <span>

namespace peva {

// All randomness in the engine flows from a single 64-bit seed through this
// generator so that fixtures can be regenerated bit-for-bit in any language:
//   state[0..3] = four successive SplitMix64 outputs of the seed
//   next()      = xoshiro256** step
//   uniform()   = (next() >> 11) * 2^-53            in [0, 1)
//   below(n)    = rejection-sampled (next() % n)    unbiased in [0, n)
//   normal()    = Box-Muller on (1 − uniform(), uniform()), cosine branch only
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next() noexcept;
  double uniform() noexcept;
  std::uint64_t below(std::uint64_t n) noexcept;
  double normal() noexcept;
  /// Normal(0, stddev²) resampled until within ±2·stddev.
  double truncated_normal(double stddev) noexcept;

  void fill_normal(std::span<double> out, double stddev = 1.0) noexcept;

 private:
  std::array<std::uint64_t, 4> state_{};
};

std::uint64_t splitmix64(std::uint64_t& state) noexcept;

}  // namespace peva
