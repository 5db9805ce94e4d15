#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mvb {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic RNG. mt19937_64 gives a standard-specified stream; the
// uniform/normal transforms are spelled out here instead of using
// std::*_distribution so that sequences are identical across library
// implementations. Every stochastic operation in the project draws from an
// Rng derived from an explicit seed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(splitmix64(seed)), seed_(seed) {}

  // Independent child stream, keyed by a caller-chosen tag. Pure function of
  // (seed, tag), so resumable loops can rebuild the exact stream for any step.
  Rng derive(uint64_t tag) const { return Rng(splitmix64(seed_ ^ splitmix64(tag))); }
  Rng derive(uint64_t tag_a, uint64_t tag_b) const { return derive(tag_a).derive(tag_b); }

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    // Rejection sampling keeps this exactly uniform.
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return static_cast<int64_t>(x % un);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; second value of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 gen_;
  uint64_t seed_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mvb
