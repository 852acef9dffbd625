#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace haccn {

// Seeded generator with distribution code written out explicitly: the
// standard library's distributions are implementation-defined, so results
// would differ between toolchains. mt19937_64's raw stream is fully specified.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive; rejection sampling avoids modulo bias.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(engine_());
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return lo + static_cast<std::int64_t>(v % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; the second variate is cached.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  // Fisher-Yates over any random-access range.
  template <typename Range>
  void shuffle(Range& r) {
    const auto n = static_cast<std::int64_t>(std::size(r));
    for (std::int64_t i = n - 1; i > 0; --i) {
      const auto j = uniform_int(0, i);
      using std::swap;
      swap(r[static_cast<std::size_t>(i)], r[static_cast<std::size_t>(j)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace haccn
