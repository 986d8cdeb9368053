#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mbil/tensor.hpp"

namespace mbil {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  long step_count = 0;
  std::vector<double> first_moment;   // zero at step 0
  std::vector<double> second_moment;  // zero at step 0, entries stay >= 0
  AdamConfig config;

  static AdamState make(std::size_t n, AdamConfig cfg = {});
};

// One bias-corrected Adam update in place.  Throws on a non-finite gradient,
// naming the offending index.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads);

// Convenience wrapper driving adam_step over a set of parameter tensors,
// reading the gradients a Tape::backward pass assigned.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor*> params, AdamConfig cfg = {});
  void step();
  long step_count() const { return states_.empty() ? 0 : states_.front().step_count; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<AdamState> states_;
  AdamConfig cfg_;
};

}  // namespace mbil
