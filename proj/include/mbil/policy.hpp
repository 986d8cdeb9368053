#pragma once

#include <memory>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mbil/checkpoint.hpp"
#include "mbil/nn.hpp"
#include "mbil/rng.hpp"
#include "mbil/tape.hpp"
#include "mbil/tensor.hpp"
#include "mbil/types.hpp"

namespace mbil {

enum class PolicyLossKind { nll, mse };

PolicyLossKind policy_loss_from_string(const std::string& s);
std::string to_string(PolicyLossKind k);

class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::string kind() const = 0;
  virtual std::size_t state_dim() const = 0;

  // Exact per-row log pi(a|s); differentiable w.r.t. the policy parameters.
  virtual Var log_prob_rows(Tape& tape, Var states, const ActionBatch& actions) = 0;
  double log_prob(const std::vector<double>& state, const Action& action);

  virtual Action sample(const std::vector<double>& state, Rng& rng) const = 0;
  virtual Action mode(const std::vector<double>& state) const = 0;

  virtual std::vector<Tensor*> params() = 0;
  virtual NamedParams named_params() = 0;
  virtual NamedParamsConst named_params() const = 0;
  virtual nlohmann::json header() const = 0;
  virtual std::unique_ptr<Policy> clone() const = 0;

  void save(const std::string& path) const;
  static std::unique_ptr<Policy> load(const std::string& path);
};

// Softmax over a finite action set.
class CategoricalPolicy final : public Policy {
 public:
  CategoricalPolicy(std::size_t state_dim, std::size_t n_actions, std::size_t hidden, Rng& rng);

  std::string kind() const override { return "categorical"; }
  std::size_t state_dim() const override { return net_.in_dim(); }
  std::size_t n_actions() const { return net_.out_dim(); }

  Var log_prob_rows(Tape& tape, Var states, const ActionBatch& actions) override;
  std::vector<double> probs(const std::vector<double>& state) const;
  Action sample(const std::vector<double>& state, Rng& rng) const override;
  Action mode(const std::vector<double>& state) const override;

  std::vector<Tensor*> params() override { return net_.params(); }
  NamedParams named_params() override;
  NamedParamsConst named_params() const override;
  nlohmann::json header() const override;
  std::unique_ptr<Policy> clone() const override;

  Mlp& net() { return net_; }

 private:
  Mlp net_;  // states -> |A| logits
  std::size_t hidden_;
};

// Diagonal Gaussian with a shared trunk and separate mean / log-std heads;
// log-std is clamped to [-5, 2] so log-densities stay finite.
class GaussianPolicy final : public Policy {
 public:
  static constexpr double kLogStdMin = -5.0;
  static constexpr double kLogStdMax = 2.0;

  GaussianPolicy(std::size_t state_dim, std::size_t action_dim, std::size_t hidden, Rng& rng);

  std::string kind() const override { return "gaussian"; }
  std::size_t state_dim() const override { return trunk_.in_dim(); }
  std::size_t action_dim() const { return action_dim_; }

  Var log_prob_rows(Tape& tape, Var states, const ActionBatch& actions) override;
  // (mean, clamped log-std) rows on the tape, both [N x action_dim].
  std::pair<Var, Var> mean_logstd_rows(Tape& tape, Var states);
  std::pair<std::vector<double>, std::vector<double>> mean_logstd(
      const std::vector<double>& state) const;

  Action sample(const std::vector<double>& state, Rng& rng) const override;
  Action mode(const std::vector<double>& state) const override;

  std::vector<Tensor*> params() override;
  NamedParams named_params() override;
  NamedParamsConst named_params() const override;
  nlohmann::json header() const override;
  std::unique_ptr<Policy> clone() const override;

  DenseLayer& log_std_head() { return log_std_head_; }

 private:
  Mlp trunk_;  // two ReLU hidden layers; heads read the second one
  DenseLayer mean_head_;
  DenseLayer log_std_head_;
  std::size_t action_dim_;
  std::size_t hidden_;
};

// Behavior-cloning loss over a batch: nll = mean -log pi(a|s); mse = mean
// squared error between the Gaussian mean action and the expert action.
// MSE on a categorical policy is rejected.
Var bc_loss(Policy& policy, Tape& tape, Var states, const ActionBatch& actions,
            PolicyLossKind kind);

}  // namespace mbil
