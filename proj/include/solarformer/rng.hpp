// Deterministic RNG. Gaussian sampling is hand-rolled (Box-Muller) so that
// sampled streams depend only on the seed, not on the standard library's
// distribution internals.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace sf {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stable 64-bit hash of a byte string mixed with a seed; used for
// identity-stable dataset shuffling.
inline std::uint64_t hash_bytes(std::uint64_t seed, const std::string& s) {
  std::uint64_t h = splitmix64(seed ^ 0x8f3c9ad2b1e4c7f5ULL);
  for (unsigned char c : s) h = splitmix64(h ^ c);
  return h;
}

class Rng {
public:
  explicit Rng(std::uint64_t seed) : gen_(splitmix64(seed)) {}
  // Independent stream for (seed, index) pairs.
  Rng(std::uint64_t seed, std::uint64_t index) : gen_(splitmix64(splitmix64(seed) ^ index)) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] via rejection-free Lemire-style reduction.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // avoid log(0)
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename It>
  void shuffle(It first, It last) {
    const std::int64_t n = last - first;
    for (std::int64_t i = n - 1; i > 0; --i) {
      const std::int64_t j = uniform_int(0, i);
      std::swap(first[i], first[j]);
    }
  }

private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sf
