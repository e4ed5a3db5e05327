#pragma once

#include <cstdint>
#include <string_view>

namespace lfs {

// Splittable deterministic generator. The stream is fully specified here
// (splitmix64 seeding + xoshiro256** state updates), so identical seeds give
// identical sequences on every platform; std::random distributions are
// avoided for the same reason.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi);
  // Unbiased integer in [0, n), n >= 1.
  uint64_t uniform_int(uint64_t n);
  // Standard normal via Box-Muller (second value cached).
  double normal();
  double normal(double mean, double stddev);
  // Bernoulli(p).
  bool coin(double p);

  // Independent child stream; derivation depends only on (seed, key).
  Rng split(uint64_t key) const;

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  uint64_t s_[4];
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

// Stable 64-bit mixes used for keyed sub-streams (per-task seeds,
// per-parameter init streams).
uint64_t hash_combine(uint64_t a, uint64_t b);
uint64_t hash_str(std::string_view s);

}  // namespace lfs
