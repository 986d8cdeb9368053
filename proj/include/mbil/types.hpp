#pragma once

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mbil/tensor.hpp"

namespace mbil {

// A single action (index or vector) and a batch of them.
using Action = std::variant<int, std::vector<double>>;
using ActionBatch = std::variant<std::vector<int>, Tensor>;

struct ActionSpace {
  enum class Kind { discrete, box };
  Kind kind = Kind::discrete;
  std::size_t n = 0;      // discrete: number of actions
  std::size_t dim = 0;    // box: action vector length
  double low = -1.0;      // box bounds, identical per dimension
  double high = 1.0;

  static ActionSpace discrete(std::size_t n);
  static ActionSpace box(std::size_t dim, double low, double high);

  nlohmann::json to_json() const;
  static ActionSpace from_json(const nlohmann::json& j);
  bool operator==(const ActionSpace&) const = default;

  // Throws std::out_of_range / std::invalid_argument on invalid actions.
  void validate(const Action& a) const;
};

}  // namespace mbil
