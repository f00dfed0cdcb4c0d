#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace itermix {

// Deterministic 64-bit pseudo-random generator (splitmix64 core).
// Identical seeds produce identical draw sequences; named forks derive
// independent sub-streams from the root seed so that the components of a
// run (init, shuffle, dropout, tuning, search) are reproducible in
// isolation of each other.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform index in [0, n). n must be positive.
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  // Standard normal via Box-Muller; draws come in pairs, the spare is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Sub-stream derived from the *root* seed and a name. Pure: forking the
  // same name off the same root always yields the same stream, regardless
  // of how many draws this generator has already produced.
  Rng fork(std::string_view name) const {
    std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
    for (char c : name) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001B3ULL;
    }
    return Rng(mix(seed_ ^ h));
  }

  Rng fork(std::uint64_t salt) const {
    return Rng(mix(seed_ ^ (salt * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL)));
  }

  std::uint64_t seed() const { return seed_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace itermix
