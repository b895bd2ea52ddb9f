#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace kdlab {

// Mixes a parent seed with two stream indices (splitmix64 finaliser).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

// Seedable, splittable generator. Children are derived from the construction
// seed only, so a child's stream never depends on how much the parent consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  Rng split(std::uint64_t a, std::uint64_t b = 0) const { return Rng(derive_seed(seed_, a, b)); }

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 bits; independent of the standard library's distributions.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  // Standard normal via Box-Muller.
  double normal();

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace kdlab
