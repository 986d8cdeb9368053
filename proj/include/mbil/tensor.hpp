#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace mbil {

// Dense row-major tensor of 64-bit reals.  Rank 0 (scalar), 1 (vector) and
// 2 (matrix) cover everything the models need.  `grad` stays empty until a
// Tape::backward pass assigns it for bound leaves.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s);
  Tensor(std::vector<std::size_t> s, std::vector<double> v);

  static Tensor scalar(double v);
  static Tensor vec(std::vector<double> v);
  static Tensor mat(std::size_t rows, std::size_t cols, std::vector<double> v);
  static Tensor zeros(std::vector<std::size_t> s);

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return size() == 1 && rank() <= 1; }
  std::size_t rows() const;
  std::size_t cols() const;
  double item() const;
  bool all_finite() const;
};

std::size_t shape_numel(const std::vector<std::size_t>& s);
std::string shape_str(const std::vector<std::size_t>& s);

}  // namespace mbil
