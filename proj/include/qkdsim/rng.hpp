// Seeded random number generation with named substreams.
//
// Every stochastic subsystem draws from its own generator whose seed is
// derived from (run seed, subsystem name). Distributions are implemented
// here rather than taken from <random> so that outputs are identical across
// standard library implementations.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace qkdsim {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed for the substream `name` of a run seeded with `seed`.
constexpr std::uint64_t substream_seed(std::uint64_t seed, std::string_view name) noexcept {
  return mix64(mix64(seed) ^ fnv1a(name));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, std::string_view stream) : engine_(substream_seed(seed, stream)) {}

  std::uint64_t bits() { return engine_(); }

  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Poisson variate by sequential inversion; intended for small means.
  std::uint64_t poisson(double mean) {
    if (mean <= 0.0) return 0;
    const double u = uniform();
    double p = std::exp(-mean);
    double cdf = p;
    std::uint64_t k = 0;
    while (u >= cdf && p > 0.0) {
      ++k;
      p *= mean / static_cast<double>(k);
      cdf += p;
    }
    return k;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Stateless generator indexed by a counter: value(i) depends only on (seed, i).
/// Lets a party regenerate a past random choice from its clock index.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : key_(mix64(seed)) {}
  CounterRng(std::uint64_t seed, std::string_view stream) : key_(substream_seed(seed, stream)) {}

  std::uint64_t at(std::uint64_t counter) const noexcept { return mix64(key_ ^ mix64(counter)); }

 private:
  std::uint64_t key_;
};

}  // namespace qkdsim
