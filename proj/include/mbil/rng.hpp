#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace mbil {

// Seeded RNG used throughout.  Distributions are hand-rolled on top of
// mt19937_64 so streams are reproducible across standard library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : Rng(seed, 0) {}
  Rng(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t raw() { return gen_(); }

  // uniform in [0,1) with 53-bit resolution
  double u01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  double normal();
  std::vector<double> normal_vec(std::size_t n, double mean = 0.0, double stddev = 1.0);

  // uniform over {0, ..., n-1}, unbiased via rejection
  std::size_t uniform_index(std::size_t n);

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mbil
