#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbil/data.hpp"
#include "mbil/rng.hpp"
#include "mbil/types.hpp"

namespace mbil {

struct EnvDescriptor {
  std::string name;
  std::size_t state_dim = 0;    // raw state vector length
  std::size_t feature_dim = 0;  // policy-net / flow-conditioning encoding
  std::size_t coord_dim = 0;    // low-dimensional embedding used as flow x
  ActionSpace action_space;
  nlohmann::json params;
};

struct StepResult {
  std::vector<double> state;
  double reward = 0.0;
  bool done = false;
};

// Environments are stateless transition functions over explicit states.
// Training never steps an environment; rollouts exist for evaluation only.
class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvDescriptor& descriptor() const = 0;
  virtual std::vector<double> reset(Rng& rng) const = 0;
  virtual StepResult step(const std::vector<double>& s, const Action& a, Rng& rng) const = 0;
  virtual double true_transition_logpdf(const std::vector<double>& s, const Action& a,
                                        const std::vector<double>& s_next) const = 0;
  virtual std::vector<double> features(const std::vector<double>& s) const = 0;
  virtual std::vector<double> coords(const std::vector<double>& s) const = 0;
  virtual std::size_t default_horizon() const = 0;
};

// Demonstrators expose exact conditional action log-densities.
class Expert {
 public:
  virtual ~Expert() = default;
  virtual Action act(const std::vector<double>& s, Rng& rng) const = 0;
  virtual double log_prob(const std::vector<double>& s, const Action& a) const = 0;
};

// Tabular policy over a discrete state space, stored as exact rationals
// num[s][a] / den.
struct TabularPolicy {
  std::vector<std::vector<std::uint64_t>> num;
  std::uint64_t den = 1;

  double prob(std::size_t s, std::size_t a) const {
    return static_cast<double>(num[s][a]) / static_cast<double>(den);
  }
  double log_prob(std::size_t s, std::size_t a) const;
};

// Grid world with slip dynamics, absorbing goal, -1 step reward.  Transition
// probabilities are exact rationals: intended move 1 - p_slip, each
// perpendicular p_slip / 2, blocked mass folds into staying.
class GridWorld final : public Env {
 public:
  struct Params {
    std::size_t width = 5;
    std::size_t height = 5;
    // p_slip = slip_num / slip_den (default 1/10)
    std::uint64_t slip_num = 1;
    std::uint64_t slip_den = 10;
    std::size_t goal_row = 4;
    std::size_t goal_col = 4;
    std::size_t horizon = 100;
  };

  GridWorld();
  explicit GridWorld(Params p);

  static constexpr int kUp = 0, kDown = 1, kLeft = 2, kRight = 3;
  static constexpr std::size_t kActions = 4;

  const EnvDescriptor& descriptor() const override { return desc_; }
  std::vector<double> reset(Rng& rng) const override;  // uniform over non-goal cells
  StepResult step(const std::vector<double>& s, const Action& a, Rng& rng) const override;
  double true_transition_logpdf(const std::vector<double>& s, const Action& a,
                                const std::vector<double>& s_next) const override;
  std::vector<double> features(const std::vector<double>& s) const override;  // one-hot
  std::vector<double> coords(const std::vector<double>& s) const override;    // (row, col)
  std::size_t default_horizon() const override { return params_.horizon; }

  const Params& params() const { return params_; }
  std::size_t n_states() const { return params_.width * params_.height; }
  std::size_t state_index(const std::vector<double>& s) const;
  std::vector<double> state_of(std::size_t idx) const;
  std::size_t goal_index() const;

  // Exact transition table: probability num[s][a][s'] / den.
  std::uint64_t transition_num(std::size_t s, std::size_t a, std::size_t s2) const {
    return t_num_[(s * kActions + a) * n_states() + s2];
  }
  std::uint64_t transition_den() const { return t_den_; }
  double transition_prob(std::size_t s, std::size_t a, std::size_t s2) const {
    return static_cast<double>(transition_num(s, a, s2)) / static_cast<double>(t_den_);
  }

  // Undiscounted shortest-path value iteration; V(goal) = 0.
  std::vector<double> value_iteration(double tol = 1e-12, std::size_t max_iter = 100000) const;
  std::vector<std::size_t> greedy_policy(const std::vector<double>& values) const;
  // Exact expected return of a tabular policy from the uniform start
  // distribution, horizon-capped like rollouts are.
  double policy_value(const TabularPolicy& pi) const;

 private:
  Params params_;
  EnvDescriptor desc_;
  std::vector<std::uint64_t> t_num_;
  std::uint64_t t_den_ = 1;
};

// Epsilon-greedy wrapper around the value-iteration optimum; rationals keep
// the balance identity exact.
class GridWorldExpert final : public Expert {
 public:
  GridWorldExpert(const GridWorld& env, std::uint64_t eps_num = 1, std::uint64_t eps_den = 20);
  Action act(const std::vector<double>& s, Rng& rng) const override;
  double log_prob(const std::vector<double>& s, const Action& a) const override;
  const TabularPolicy& table() const { return table_; }

 private:
  const GridWorld& env_;
  TabularPolicy table_;
};

// Planar point mass: s' = clip(s + a dt + eps), eps ~ N(0, sigma^2 I),
// reward -||s'||, fixed horizon.
class PointMass final : public Env {
 public:
  struct Params {
    double dt = 0.1;
    double sigma = 0.1;
    double state_bound = 2.0;
    double start_box = 0.9;  // s0 ~ U[-start_box, start_box]^2
    std::size_t horizon = 100;
  };

  PointMass();
  explicit PointMass(Params p);

  const EnvDescriptor& descriptor() const override { return desc_; }
  std::vector<double> reset(Rng& rng) const override;
  StepResult step(const std::vector<double>& s, const Action& a, Rng& rng) const override;
  // Unclipped Gaussian density; an approximation within ~3 sigma of the
  // state bound (experiments keep trajectories interior).
  double true_transition_logpdf(const std::vector<double>& s, const Action& a,
                                const std::vector<double>& s_next) const override;
  std::vector<double> features(const std::vector<double>& s) const override { return s; }
  std::vector<double> coords(const std::vector<double>& s) const override { return s; }
  std::size_t default_horizon() const override { return params_.horizon; }

  const Params& params() const { return params_; }

 private:
  Params params_;
  EnvDescriptor desc_;
};

// Proportional controller a = clip(-k_p s) with exploration noise, truncated
// to the action box so every demonstrated action is feasible and the
// conditional density stays in closed form (per-dimension truncated normal).
class PointMassExpert final : public Expert {
 public:
  explicit PointMassExpert(const PointMass& env, double k_p = 1.0, double noise_std = 0.05);
  Action act(const std::vector<double>& s, Rng& rng) const override;
  double log_prob(const std::vector<double>& s, const Action& a) const override;
  std::vector<double> mean_action(const std::vector<double>& s) const;

 private:
  const PointMass& env_;
  double k_p_;
  double noise_std_;
};

// Closed-form truncated-normal helpers (shared with tests).
double truncated_normal_logpdf(double x, double mean, double stddev, double lo, double hi);
double truncated_normal_sample(double mean, double stddev, double lo, double hi, Rng& rng);

// Rollout dataset of (s, a) pairs only; rewards are never stored.
Dataset generate_demonstrations(const Env& env, const Expert& expert, std::size_t n_trajectories,
                                std::size_t horizon, std::uint64_t seed);

// max_{s,s'} | P_generator(s'|s) - sum_a pi_candidate(a|s) T(s'|s,a) |
// computed in exact integer arithmetic.  Continuous environments are
// rejected (the sum becomes an integral, out of scope).
double state_balance_check(const Env& env, const TabularPolicy& generator,
                           const TabularPolicy& candidate);
double state_balance_check(const Env& env, const TabularPolicy& generator);

// Evaluation rollouts.  Actors map states to actions; policies plug in via
// the adapters below.  Box actions are clipped into the action space before
// stepping.
using Actor = std::function<Action(const std::vector<double>& state, Rng& rng)>;

struct EvalStats {
  double mean_return = 0.0;
  double std_return = 0.0;
  std::vector<double> returns;
};

EvalStats evaluate_actor(const Env& env, const Actor& actor, std::size_t episodes,
                         std::size_t horizon, std::uint64_t seed);
Actor expert_actor(const Expert& expert);

class Policy;
Actor policy_actor(const Env& env, const Policy& policy, bool deterministic);

std::unique_ptr<Env> make_env(const std::string& name, const nlohmann::json& overrides);

}  // namespace mbil
