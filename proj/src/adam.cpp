#include "mbil/adam.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mbil {

AdamState AdamState::make(std::size_t n, AdamConfig cfg) {
  AdamState s;
  s.first_moment.assign(n, 0.0);
  s.second_moment.assign(n, 0.0);
  s.config = cfg;
  return s;
}

void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_step: params/grads length mismatch (" +
                                std::to_string(params.size()) + " vs " +
                                std::to_string(grads.size()) + ")");
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size())
    throw std::invalid_argument("adam_step: state dimension mismatch");
  const auto& c = state.config;
  state.step_count += 1;
  double b1t = 1.0 - std::pow(c.beta1, static_cast<double>(state.step_count));
  double b2t = 1.0 - std::pow(c.beta2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double g = grads[i];
    if (!std::isfinite(g))
      throw std::runtime_error("adam_step: non-finite gradient at parameter index " +
                               std::to_string(i));
    double m = state.first_moment[i] = c.beta1 * state.first_moment[i] + (1.0 - c.beta1) * g;
    double v = state.second_moment[i] = c.beta2 * state.second_moment[i] + (1.0 - c.beta2) * g * g;
    double m_hat = m / b1t;
    double v_hat = v / b2t;
    params[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
  }
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor*> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  states_.reserve(params_.size());
  for (Tensor* p : params_) states_.push_back(AdamState::make(p->size(), cfg));
}

void AdamOptimizer::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor* p = params_[i];
    if (p->grad.size() != p->values.size())
      throw std::runtime_error("AdamOptimizer::step: parameter " + std::to_string(i) +
                               " has no gradient; run backward first");
    try {
      adam_step(states_[i], std::span<double>(p->values), std::span<const double>(p->grad));
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("AdamOptimizer::step: tensor " + std::to_string(i) + ": " +
                               e.what());
    }
  }
}

}  // namespace mbil
