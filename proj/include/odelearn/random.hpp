// Counter-based random streams. All randomness in a run derives from one
// 64-bit seed; independent streams are obtained with split() so results do not
// depend on the order in which consumers draw.
#pragma once

#include <cstdint>
#include <string_view>

namespace odelearn {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t hash_label(std::string_view label);

class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  Rng split(std::uint64_t stream) const;
  Rng split(std::string_view label) const { return split(hash_label(label)); }

  std::uint64_t next_u64();
  // [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller (two uniforms per draw, no caching).
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n);

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace odelearn
