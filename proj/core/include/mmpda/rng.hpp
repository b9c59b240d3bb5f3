#pragma once

#include <cstdint>
#include <vector>

namespace mmpda {

// Portable counter-based generator. Draw i of stream (seed) is
// splitmix64(seed_key + i * 0x9E3779B97F4A7C15) where seed_key is the seed
// passed once through the same finalizer. Only integer arithmetic is used, so
// the u64 sequence is identical on every platform.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed = 0);

  // A statistically independent stream keyed by (seed, stream).
  CounterRng fork(std::uint64_t stream) const;

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  // Uniform in [0, bound) by rejection (no modulo bias). bound > 0.
  std::uint64_t below(std::uint64_t bound);
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via the Box-Muller transform; caches the paired draw.
  double normal();
  // Fisher-Yates.
  void shuffle(std::vector<std::size_t>& items);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  static std::uint64_t mix(std::uint64_t z);

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mmpda
