#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace tradeiv::rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Counter-based stream keyed by (seed, path...). Every generated entity gets
// its own stream derived from its identifiers, so generation order (and any
// parallel scheduling) never changes the draws.
class Stream {
 public:
  Stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) : key_(splitmix64(seed)) {
    for (std::uint64_t p : path) key_ = splitmix64(key_ ^ splitmix64(p));
  }

  std::uint64_t next_u64() { return splitmix64(key_ ^ (0xd1342543de82ef95ull * ++counter_)); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal(double mean = 0.0, double sd = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + sd * spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + sd * r * std::cos(theta);
  }

  double lognormal(double log_mean, double log_sd) { return std::exp(normal(log_mean, log_sd)); }

  // Half-normal, used for draws constrained to be nonnegative (log tariffs).
  double half_normal(double sd) { return std::abs(normal(0.0, sd)); }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace tradeiv::rng
