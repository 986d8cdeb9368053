#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mbil/data.hpp"
#include "mbil/envs.hpp"
#include "mbil/flow.hpp"
#include "mbil/policy.hpp"
#include "mbil/tape.hpp"

namespace mbil {

// One (s, a, s', a') record from the demonstration buffer.
struct TransitionTuple {
  std::vector<double> s;
  Action a;
  std::vector<double> s_next;
  Action a_next;
};

// Tuples need a next action, so the final transition of each episode enters
// only the behavior-cloning pair set.
struct TupleBuffer {
  std::vector<TransitionTuple> tuples;
  std::vector<StepRecord> bc_pairs;  // every (s, a), including episode-final pairs
};

TupleBuffer build_tuples(const Dataset& ds);

// Squared log-balance defect: (log P - log pi - log T)^2.
double balance_residual(double p_log, double pi_log, double t_log);

// ---------------------------------------------------------------------------
// Density estimators behind the spec's P-hat / T-hat contract.

class PairDensity {
 public:
  virtual ~PairDensity() = default;
  virtual double log_prob(const TransitionTuple& t) const = 0;
  virtual std::vector<double> log_prob_all(const std::vector<TransitionTuple>& ts) const;
};

class TransDensity {
 public:
  virtual ~TransDensity() = default;
  virtual double log_prob(const TransitionTuple& t) const = 0;
  virtual std::vector<double> log_prob_all(const std::vector<TransitionTuple>& ts) const;
};

// Flow encodings: x_pair = [coords(s'), enc(a')], c = [coords(s), enc(a)],
// x_trans = coords(s').  Discrete actions are one-hot embedded.
std::size_t action_enc_dim(const ActionSpace& space);
std::vector<double> encode_action(const ActionSpace& space, const Action& a);

class FlowPairDensity final : public PairDensity {
 public:
  FlowPairDensity(FlowModel& model, const Env& env) : model_(model), env_(env) {}
  double log_prob(const TransitionTuple& t) const override;
  std::vector<double> log_prob_all(const std::vector<TransitionTuple>& ts) const override;

 private:
  FlowModel& model_;
  const Env& env_;
};

class FlowTransDensity final : public TransDensity {
 public:
  FlowTransDensity(FlowModel& model, const Env& env) : model_(model), env_(env) {}
  double log_prob(const TransitionTuple& t) const override;
  std::vector<double> log_prob_all(const std::vector<TransitionTuple>& ts) const override;

 private:
  FlowModel& model_;
  const Env& env_;
};

// Counting estimator for fully discrete environments; unseen conditioning
// pairs fall back to the uniform density.
class TabularCountDensity {
 public:
  TabularCountDensity(const GridWorld& env, const std::vector<TransitionTuple>& tuples);
  double log_pair(const TransitionTuple& t) const;   // log n(s,a,s',a')/n(s,a)
  double log_trans(const TransitionTuple& t) const;  // log n(s,a,s')/n(s,a)

  class Pair final : public PairDensity {
   public:
    explicit Pair(const TabularCountDensity& c) : c_(c) {}
    double log_prob(const TransitionTuple& t) const override { return c_.log_pair(t); }

   private:
    const TabularCountDensity& c_;
  };
  class Trans final : public TransDensity {
   public:
    explicit Trans(const TabularCountDensity& c) : c_(c) {}
    double log_prob(const TransitionTuple& t) const override { return c_.log_trans(t); }

   private:
    const TabularCountDensity& c_;
  };

 private:
  const GridWorld& env_;
  std::vector<std::uint64_t> n_sa_;      // [S*A]
  std::vector<std::uint64_t> n_sas_;     // [S*A*S]
  std::vector<std::uint64_t> n_sasa_;    // [S*A*S*A]
};

// Exact oracles for tests and density diagnostics.  The chain density is
// represented in log space as log pi_D + log T, the exact log of the product.
class OracleChainDensity final : public PairDensity {
 public:
  OracleChainDensity(const Env& env, const Expert& expert) : env_(env), expert_(expert) {}
  double log_prob(const TransitionTuple& t) const override {
    return expert_.log_prob(t.s_next, t.a_next) + env_.true_transition_logpdf(t.s, t.a, t.s_next);
  }

 private:
  const Env& env_;
  const Expert& expert_;
};

class OracleTransDensity final : public TransDensity {
 public:
  explicit OracleTransDensity(const Env& env) : env_(env) {}
  double log_prob(const TransitionTuple& t) const override {
    return env_.true_transition_logpdf(t.s, t.a, t.s_next);
  }

 private:
  const Env& env_;
};

// ---------------------------------------------------------------------------
// Training

enum class DensityEstimator { flow, tabular };
DensityEstimator estimator_from_string(const std::string& s);
std::string to_string(DensityEstimator e);

struct MbilConfig {
  double alpha = 0.001;  // dynamics-loss weight
  double beta = 1.0;     // policy-loss weight
  PolicyLossKind policy_loss = PolicyLossKind::nll;
  long iterations = 10000;
  std::size_t batch_size = 128;
  std::size_t policy_hidden = 64;
  AdamConfig optimizer;
  DensityEstimator estimator = DensityEstimator::flow;
  FlowArch flow_arch;
  DensityFitConfig p_fit;
  DensityFitConfig t_fit;
  long eval_every = 500;
  std::size_t eval_episodes = 10;
  bool eval_deterministic = true;
  bool return_best = false;  // final iterate by default
  std::uint64_t seed = 0;

  void validate() const;  // alpha, beta >= 0 and alpha + beta > 0, ...
};

struct IterRecord {
  double dyn_loss = 0.0;
  double pol_loss = 0.0;
  double total = 0.0;
};

struct EvalRecord {
  long iteration = 0;
  double mean_return = 0.0;
  double std_return = 0.0;
};

struct TrainReport {
  std::vector<IterRecord> iters;  // exactly one record per iteration
  std::vector<EvalRecord> evals;
  double final_eval_mean = 0.0;
  double final_eval_std = 0.0;
  long best_iteration = 0;
  double best_eval_mean = 0.0;
  double p_fit_nll = 0.0;
  double t_fit_nll = 0.0;
};

// metrics.csv rows: run_id,seed,iteration,dyn_loss,pol_loss,total_loss,
// eval_return_mean,eval_return_std (eval columns empty off-schedule).
void write_metrics_csv(const std::string& path, const TrainReport& report,
                       const std::string& run_id, std::uint64_t seed);

struct TrainResult {
  std::unique_ptr<Policy> policy;
  TrainReport report;
  std::unique_ptr<FlowModel> p_flow;  // null when alpha = 0 or estimator is tabular
  std::unique_ptr<FlowModel> t_flow;
};

// Full Algorithm 1: tuple buffer, density training (frozen afterwards),
// then policy optimization of alpha * dynamics + beta * policy loss.
TrainResult train(const Dataset& dataset, const Env& env, const MbilConfig& config);

// Standalone behavior cloning, the alpha = 0 reduction target.  Shares the
// seed derivation so (alpha=0, beta=1) MBIL reproduces it bit for bit.
TrainResult train_bc(const Dataset& dataset, const Env& env, const MbilConfig& config);

// Empirical objective on a tape for one batch; gradients flow only into the
// policy.  Throws on a non-finite density evaluation, naming the tuple index.
Var mbil_objective(Tape& tape, Policy& policy, const Env& env,
                   const std::vector<TransitionTuple>& tuple_batch,
                   const std::vector<StepRecord>& bc_batch, const PairDensity& p_hat,
                   const TransDensity& t_hat, const MbilConfig& config);

// Seed-stream assignments shared by train / train_bc (and tests).
namespace seed_stream {
inline constexpr std::uint64_t kPolicyInit = 1;
inline constexpr std::uint64_t kTupleBatches = 4;
inline constexpr std::uint64_t kBcBatches = 5;
inline constexpr std::uint64_t kEval = 6;
}  // namespace seed_stream

}  // namespace mbil
