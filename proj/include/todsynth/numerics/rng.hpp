#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace todsynth {

// Counter-based seed splitting: every stage derives its own stream from the
// global seed, a stream label and an index, so stages rerun independently.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index = 0);

// Deterministic generator with platform-independent distributions
// (std::*_distribution output is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform();                                  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t below(std::uint64_t n);              // [0, n)
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace todsynth
