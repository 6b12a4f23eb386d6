#pragma once

// Small self-contained generator (splitmix64) so parameter initialization
// is reproducible independent of the standard library's distributions.

#include <cmath>
#include <cstdint>

namespace sectmoe {

class Prng {
 public:
  explicit Prng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // (0, 1), safe as a log argument
  double uniform01_open() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal() {
    const double u1 = uniform01_open();
    const double u2 = uniform01_open();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
  }

  // Normal with stddev `sigma`, resampled until within `clip` sigmas.
  double truncated_normal(double sigma, double clip = 3.0) {
    double z = normal();
    while (std::abs(z) > clip) z = normal();
    return z * sigma;
  }

 private:
  std::uint64_t state_;
};

}  // namespace sectmoe
