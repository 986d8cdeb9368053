#include "mbil/rng.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace mbil {

Rng::Rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  gen_.seed(seq);
}

double Rng::normal() {
  // Box-Muller; caches the paired draw so consumption stays deterministic.
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = u01();
  } while (u1 <= 0.0);
  double u2 = u01();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::vector<double> Rng::normal_vec(std::size_t n, double mean, double stddev) {
  std::vector<double> out(n);
  for (auto& v : out) v = mean + stddev * normal();
  return out;
}

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::uniform_index: n must be positive");
  const std::uint64_t bound = (std::numeric_limits<std::uint64_t>::max() / n) * n;
  std::uint64_t r = 0;
  do {
    r = gen_();
  } while (r >= bound);
  return static_cast<std::size_t>(r % n);
}

}  // namespace mbil
