#include "mbil/types.hpp"

#include <cmath>
#include <stdexcept>

namespace mbil {

ActionSpace ActionSpace::discrete(std::size_t n) {
  ActionSpace a;
  a.kind = Kind::discrete;
  a.n = n;
  return a;
}

ActionSpace ActionSpace::box(std::size_t dim, double low, double high) {
  ActionSpace a;
  a.kind = Kind::box;
  a.dim = dim;
  a.low = low;
  a.high = high;
  return a;
}

nlohmann::json ActionSpace::to_json() const {
  if (kind == Kind::discrete) return {{"kind", "discrete"}, {"n", n}};
  return {{"kind", "box"}, {"dim", dim}, {"low", low}, {"high", high}};
}

ActionSpace ActionSpace::from_json(const nlohmann::json& j) {
  std::string k = j.at("kind").get<std::string>();
  if (k == "discrete") return discrete(j.at("n").get<std::size_t>());
  if (k == "box")
    return box(j.at("dim").get<std::size_t>(), j.at("low").get<double>(),
               j.at("high").get<double>());
  throw std::runtime_error("ActionSpace: unknown kind '" + k + "'");
}

void ActionSpace::validate(const Action& a) const {
  if (kind == Kind::discrete) {
    if (!std::holds_alternative<int>(a))
      throw std::invalid_argument("action: expected a discrete index");
    int idx = std::get<int>(a);
    if (idx < 0 || static_cast<std::size_t>(idx) >= n)
      throw std::out_of_range("action index " + std::to_string(idx) + " out of range [0," +
                              std::to_string(n) + ")");
    return;
  }
  if (!std::holds_alternative<std::vector<double>>(a))
    throw std::invalid_argument("action: expected a continuous vector");
  const auto& v = std::get<std::vector<double>>(a);
  if (v.size() != dim)
    throw std::invalid_argument("action has " + std::to_string(v.size()) + " dims, expected " +
                                std::to_string(dim));
  for (double x : v) {
    if (!std::isfinite(x)) throw std::invalid_argument("action contains a non-finite entry");
    if (x < low || x > high)
      throw std::out_of_range("action entry " + std::to_string(x) + " outside [" +
                              std::to_string(low) + "," + std::to_string(high) + "]");
  }
}

}  // namespace mbil
