#include "mbil/mbil.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace mbil {

TupleBuffer build_tuples(const Dataset& ds) {
  if (ds.trajectories.empty()) throw std::invalid_argument("build_tuples: empty dataset");
  TupleBuffer buf;
  for (const auto& traj : ds.trajectories) {
    if (traj.steps.empty()) throw std::invalid_argument("build_tuples: empty trajectory");
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
      buf.bc_pairs.push_back(traj.steps[t]);
      if (t + 1 < traj.steps.size())
        buf.tuples.push_back({traj.steps[t].state, traj.steps[t].action,
                              traj.steps[t + 1].state, traj.steps[t + 1].action});
    }
  }
  return buf;
}

double balance_residual(double p_log, double pi_log, double t_log) {
  double d = p_log - pi_log - t_log;
  return d * d;
}

std::vector<double> PairDensity::log_prob_all(const std::vector<TransitionTuple>& ts) const {
  std::vector<double> out(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) out[i] = log_prob(ts[i]);
  return out;
}

std::vector<double> TransDensity::log_prob_all(const std::vector<TransitionTuple>& ts) const {
  std::vector<double> out(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) out[i] = log_prob(ts[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Flow encodings

std::size_t action_enc_dim(const ActionSpace& space) {
  return space.kind == ActionSpace::Kind::discrete ? space.n : space.dim;
}

std::vector<double> encode_action(const ActionSpace& space, const Action& a) {
  space.validate(a);
  if (space.kind == ActionSpace::Kind::discrete) {
    std::vector<double> v(space.n, 0.0);
    v[std::get<int>(a)] = 1.0;
    return v;
  }
  return std::get<std::vector<double>>(a);
}

namespace {

void append_row(Tensor& m, std::size_t row, const std::vector<double>& part, std::size_t offset) {
  std::copy(part.begin(), part.end(), m.values.begin() + row * m.cols() + offset);
}

// (x, c) matrices for the state-action chain model P(s',a'|s,a).
std::pair<Tensor, Tensor> pair_flow_data(const Env& env,
                                         const std::vector<TransitionTuple>& tuples) {
  const auto& d = env.descriptor();
  std::size_t ad = action_enc_dim(d.action_space);
  std::size_t xd = d.coord_dim + ad, cd = d.coord_dim + ad;
  Tensor x = Tensor::zeros({tuples.size(), xd}), c = Tensor::zeros({tuples.size(), cd});
  for (std::size_t i = 0; i < tuples.size(); ++i) {
    append_row(x, i, env.coords(tuples[i].s_next), 0);
    append_row(x, i, encode_action(d.action_space, tuples[i].a_next), d.coord_dim);
    append_row(c, i, env.coords(tuples[i].s), 0);
    append_row(c, i, encode_action(d.action_space, tuples[i].a), d.coord_dim);
  }
  return {std::move(x), std::move(c)};
}

// (x, c) matrices for the transition kernel model T(s'|s,a).
std::pair<Tensor, Tensor> trans_flow_data(const Env& env,
                                          const std::vector<TransitionTuple>& tuples) {
  const auto& d = env.descriptor();
  std::size_t ad = action_enc_dim(d.action_space);
  Tensor x = Tensor::zeros({tuples.size(), d.coord_dim});
  Tensor c = Tensor::zeros({tuples.size(), d.coord_dim + ad});
  for (std::size_t i = 0; i < tuples.size(); ++i) {
    append_row(x, i, env.coords(tuples[i].s_next), 0);
    append_row(c, i, env.coords(tuples[i].s), 0);
    append_row(c, i, encode_action(d.action_space, tuples[i].a), d.coord_dim);
  }
  return {std::move(x), std::move(c)};
}

}  // namespace

double FlowPairDensity::log_prob(const TransitionTuple& t) const {
  const auto& d = env_.descriptor();
  auto xs = env_.coords(t.s_next);
  auto xa = encode_action(d.action_space, t.a_next);
  xs.insert(xs.end(), xa.begin(), xa.end());
  auto cs = env_.coords(t.s);
  auto ca = encode_action(d.action_space, t.a);
  cs.insert(cs.end(), ca.begin(), ca.end());
  return model_.log_prob(xs, cs);
}

std::vector<double> FlowPairDensity::log_prob_all(const std::vector<TransitionTuple>& ts) const {
  auto [x, c] = pair_flow_data(env_, ts);
  return model_.log_prob_batch(x, c);
}

double FlowTransDensity::log_prob(const TransitionTuple& t) const {
  auto cs = env_.coords(t.s);
  auto ca = encode_action(env_.descriptor().action_space, t.a);
  cs.insert(cs.end(), ca.begin(), ca.end());
  return model_.log_prob(env_.coords(t.s_next), cs);
}

std::vector<double> FlowTransDensity::log_prob_all(const std::vector<TransitionTuple>& ts) const {
  auto [x, c] = trans_flow_data(env_, ts);
  return model_.log_prob_batch(x, c);
}

// ---------------------------------------------------------------------------
// Tabular counting estimator

TabularCountDensity::TabularCountDensity(const GridWorld& env,
                                         const std::vector<TransitionTuple>& tuples)
    : env_(env) {
  std::size_t S = env.n_states(), A = GridWorld::kActions;
  n_sa_.assign(S * A, 0);
  n_sas_.assign(S * A * S, 0);
  n_sasa_.assign(S * A * S * A, 0);
  for (const auto& t : tuples) {
    std::size_t s = env.state_index(t.s);
    std::size_t a = static_cast<std::size_t>(std::get<int>(t.a));
    std::size_t s2 = env.state_index(t.s_next);
    std::size_t a2 = static_cast<std::size_t>(std::get<int>(t.a_next));
    n_sa_[s * A + a] += 1;
    n_sas_[(s * A + a) * S + s2] += 1;
    n_sasa_[((s * A + a) * S + s2) * A + a2] += 1;
  }
}

double TabularCountDensity::log_pair(const TransitionTuple& t) const {
  std::size_t S = env_.n_states(), A = GridWorld::kActions;
  std::size_t s = env_.state_index(t.s);
  std::size_t a = static_cast<std::size_t>(std::get<int>(t.a));
  std::size_t s2 = env_.state_index(t.s_next);
  std::size_t a2 = static_cast<std::size_t>(std::get<int>(t.a_next));
  std::uint64_t denom = n_sa_[s * A + a];
  if (denom == 0) return -std::log(static_cast<double>(S * A));  // uniform fallback
  std::uint64_t num = n_sasa_[((s * A + a) * S + s2) * A + a2];
  if (num == 0) return -std::numeric_limits<double>::infinity();
  return std::log(static_cast<double>(num)) - std::log(static_cast<double>(denom));
}

double TabularCountDensity::log_trans(const TransitionTuple& t) const {
  std::size_t S = env_.n_states(), A = GridWorld::kActions;
  std::size_t s = env_.state_index(t.s);
  std::size_t a = static_cast<std::size_t>(std::get<int>(t.a));
  std::size_t s2 = env_.state_index(t.s_next);
  std::uint64_t denom = n_sa_[s * A + a];
  if (denom == 0) return -std::log(static_cast<double>(S));  // uniform fallback
  std::uint64_t num = n_sas_[(s * A + a) * S + s2];
  if (num == 0) return -std::numeric_limits<double>::infinity();
  return std::log(static_cast<double>(num)) - std::log(static_cast<double>(denom));
}

// ---------------------------------------------------------------------------
// Config

DensityEstimator estimator_from_string(const std::string& s) {
  if (s == "flow") return DensityEstimator::flow;
  if (s == "tabular") return DensityEstimator::tabular;
  throw std::invalid_argument("unknown density estimator '" + s + "'");
}

std::string to_string(DensityEstimator e) {
  return e == DensityEstimator::flow ? "flow" : "tabular";
}

void MbilConfig::validate() const {
  if (alpha < 0 || beta < 0) throw std::invalid_argument("MbilConfig: alpha, beta must be >= 0");
  if (alpha + beta <= 0) throw std::invalid_argument("MbilConfig: alpha + beta must be positive");
  if (iterations < 1) throw std::invalid_argument("MbilConfig: iterations must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("MbilConfig: batch_size must be >= 1");
}

// ---------------------------------------------------------------------------
// Batch assembly helpers

namespace {

Tensor encode_state_rows(const Env& env, const std::vector<const std::vector<double>*>& states) {
  std::size_t feat = env.descriptor().feature_dim;
  Tensor out = Tensor::zeros({states.size(), feat});
  for (std::size_t i = 0; i < states.size(); ++i) {
    auto f = env.features(*states[i]);
    std::copy(f.begin(), f.end(), out.values.begin() + i * feat);
  }
  return out;
}

Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& idx) {
  Tensor out = Tensor::zeros({idx.size(), src.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(src.values.begin() + idx[i] * src.cols(),
              src.values.begin() + (idx[i] + 1) * src.cols(),
              out.values.begin() + i * src.cols());
  return out;
}

ActionBatch gather_actions(const ActionBatch& src, const std::vector<std::size_t>& idx) {
  if (std::holds_alternative<std::vector<int>>(src)) {
    const auto& v = std::get<std::vector<int>>(src);
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[idx[i]];
    return out;
  }
  return gather_rows(std::get<Tensor>(src), idx);
}

ActionBatch collect_actions(const ActionSpace& space, const std::vector<const Action*>& actions) {
  if (space.kind == ActionSpace::Kind::discrete) {
    std::vector<int> out(actions.size());
    for (std::size_t i = 0; i < actions.size(); ++i) out[i] = std::get<int>(*actions[i]);
    return out;
  }
  Tensor out = Tensor::zeros({actions.size(), space.dim});
  for (std::size_t i = 0; i < actions.size(); ++i) {
    const auto& v = std::get<std::vector<double>>(*actions[i]);
    std::copy(v.begin(), v.end(), out.values.begin() + i * space.dim);
  }
  return out;
}

std::vector<double> gather_values(const std::vector<double>& src,
                                  const std::vector<std::size_t>& idx) {
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = src[idx[i]];
  return out;
}

struct ObjectiveParts {
  Var total;
  double dyn_value = 0.0;
  double pol_value = 0.0;
};

// alpha * mean balance residual + beta * BC loss on a tape.  Density log
// values enter as constants, so gradients reach only the policy parameters.
ObjectiveParts objective_on_tape(Tape& tape, Policy& policy, double alpha, double beta,
                                 PolicyLossKind loss_kind, const Tensor* snext_feats,
                                 const ActionBatch* anext, const std::vector<double>* p_logs,
                                 const std::vector<double>* t_logs, const Tensor* bc_feats,
                                 const ActionBatch* bc_actions) {
  ObjectiveParts parts;
  Var dyn, pol;
  bool has_dyn = alpha > 0.0, has_pol = beta > 0.0;
  if (has_dyn) {
    Var logpi = policy.log_prob_rows(tape, tape.constant(*snext_feats), *anext);
    Var resid = square(sub(sub(tape.constant_vec(*p_logs), logpi), tape.constant_vec(*t_logs)));
    dyn = mean(resid);
    parts.dyn_value = dyn.item();
  }
  if (has_pol) {
    pol = bc_loss(policy, tape, tape.constant(*bc_feats), *bc_actions, loss_kind);
    parts.pol_value = pol.item();
  }
  if (has_dyn && has_pol)
    parts.total = add(mul_scalar(dyn, alpha), mul_scalar(pol, beta));
  else if (has_dyn)
    parts.total = mul_scalar(dyn, alpha);
  else
    parts.total = mul_scalar(pol, beta);
  return parts;
}

std::unique_ptr<Policy> make_policy(const Env& env, const MbilConfig& config, Rng& rng) {
  const auto& d = env.descriptor();
  if (d.action_space.kind == ActionSpace::Kind::discrete) {
    if (config.policy_loss == PolicyLossKind::mse)
      throw std::invalid_argument("train: mse policy loss is invalid for discrete actions");
    return std::make_unique<CategoricalPolicy>(d.feature_dim, d.action_space.n,
                                               config.policy_hidden, rng);
  }
  return std::make_unique<GaussianPolicy>(d.feature_dim, d.action_space.dim, config.policy_hidden,
                                          rng);
}

void check_dataset_env(const Dataset& ds, const Env& env) {
  const auto& d = env.descriptor();
  if (ds.env_name != d.name)
    throw std::invalid_argument("train: dataset was generated on '" + ds.env_name +
                                "' but the environment is '" + d.name + "'");
  if (ds.state_dim != d.state_dim)
    throw std::invalid_argument("train: dataset state_dim " + std::to_string(ds.state_dim) +
                                " does not match the environment's " +
                                std::to_string(d.state_dim));
  if (!(ds.action_space == d.action_space))
    throw std::invalid_argument("train: dataset action space does not match the environment");
}

void check_finite_logs(const std::vector<double>& logs, const char* which) {
  for (std::size_t i = 0; i < logs.size(); ++i)
    if (!std::isfinite(logs[i]))
      throw std::runtime_error(std::string("train: non-finite ") + which +
                               " density at tuple index " + std::to_string(i));
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

Var mbil_objective(Tape& tape, Policy& policy, const Env& env,
                   const std::vector<TransitionTuple>& tuple_batch,
                   const std::vector<StepRecord>& bc_batch, const PairDensity& p_hat,
                   const TransDensity& t_hat, const MbilConfig& config) {
  config.validate();
  if (config.alpha > 0 && tuple_batch.empty())
    throw std::invalid_argument("mbil_objective: empty tuple batch");
  if (config.beta > 0 && bc_batch.empty())
    throw std::invalid_argument("mbil_objective: empty BC batch");

  const auto& space = env.descriptor().action_space;
  Tensor snext_feats;
  ActionBatch anext;
  std::vector<double> p_logs, t_logs;
  if (config.alpha > 0) {
    std::vector<const std::vector<double>*> states;
    std::vector<const Action*> actions;
    for (const auto& t : tuple_batch) {
      states.push_back(&t.s_next);
      actions.push_back(&t.a_next);
    }
    snext_feats = encode_state_rows(env, states);
    anext = collect_actions(space, actions);
    p_logs.resize(tuple_batch.size());
    t_logs.resize(tuple_batch.size());
    for (std::size_t i = 0; i < tuple_batch.size(); ++i) {
      p_logs[i] = p_hat.log_prob(tuple_batch[i]);
      t_logs[i] = t_hat.log_prob(tuple_batch[i]);
      if (!std::isfinite(p_logs[i]) || !std::isfinite(t_logs[i]))
        throw std::runtime_error("mbil_objective: non-finite density at tuple index " +
                                 std::to_string(i));
    }
  }
  Tensor bc_feats;
  ActionBatch bc_actions;
  if (config.beta > 0) {
    std::vector<const std::vector<double>*> states;
    std::vector<const Action*> actions;
    for (const auto& r : bc_batch) {
      states.push_back(&r.state);
      actions.push_back(&r.action);
    }
    bc_feats = encode_state_rows(env, states);
    bc_actions = collect_actions(space, actions);
  }
  return objective_on_tape(tape, policy, config.alpha, config.beta, config.policy_loss,
                           &snext_feats, &anext, &p_logs, &t_logs, &bc_feats, &bc_actions)
      .total;
}

void write_metrics_csv(const std::string& path, const TrainReport& report,
                       const std::string& run_id, std::uint64_t seed) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_metrics_csv: cannot write '" + path + "'");
  out << "run_id,seed,iteration,dyn_loss,pol_loss,total_loss,eval_return_mean,eval_return_std\n";
  char buf[64];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  std::size_t ei = 0;
  for (std::size_t i = 0; i < report.iters.size(); ++i) {
    long iter = static_cast<long>(i) + 1;
    const auto& r = report.iters[i];
    out << run_id << "," << seed << "," << iter << "," << fmt(r.dyn_loss) << ","
        << fmt(r.pol_loss) << "," << fmt(r.total);
    if (ei < report.evals.size() && report.evals[ei].iteration == iter) {
      out << "," << fmt(report.evals[ei].mean_return) << "," << fmt(report.evals[ei].std_return);
      ++ei;
    } else {
      out << ",,";
    }
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Training loops

namespace {

struct PreparedBuffer {
  Tensor snext_feats;          // [M x feat]
  ActionBatch anext;           // a' rows
  std::vector<double> p_logs;  // frozen log P-hat per tuple
  std::vector<double> t_logs;  // frozen log T-hat per tuple
  Tensor bc_feats;             // [K x feat]
  ActionBatch bc_actions;
};

TrainResult train_impl(const Dataset& dataset, const Env& env, const MbilConfig& config,
                       bool bc_only) {
  config.validate();
  check_dataset_env(dataset, env);
  TupleBuffer buf = build_tuples(dataset);
  const auto& space = env.descriptor().action_space;
  double alpha = bc_only ? 0.0 : config.alpha;

  TrainResult out;
  TrainReport& rep = out.report;

  PreparedBuffer prep;
  std::unique_ptr<TabularCountDensity> counts;
  if (alpha > 0) {
    if (buf.tuples.empty())
      throw std::invalid_argument(
          "train: no (s,a,s',a') tuples (every trajectory has a single step) but alpha > 0");
    if (config.estimator == DensityEstimator::flow) {
      Rng frng(mix_seed(config.seed, 100));
      auto [px, pc] = pair_flow_data(env, buf.tuples);
      auto [tx, tc] = trans_flow_data(env, buf.tuples);
      out.p_flow = std::make_unique<FlowModel>(
          FlowModel::make(px.cols(), pc.cols(), config.flow_arch, frng));
      out.t_flow = std::make_unique<FlowModel>(
          FlowModel::make(tx.cols(), tc.cols(), config.flow_arch, frng));
      DensityFitConfig pf = config.p_fit;
      pf.seed = mix_seed(config.seed, 2);
      DensityFitConfig tf = config.t_fit;
      tf.seed = mix_seed(config.seed, 3);
      rep.p_fit_nll = fit_density(*out.p_flow, px, pc, pf).final_nll;
      rep.t_fit_nll = fit_density(*out.t_flow, tx, tc, tf).final_nll;
      prep.p_logs = FlowPairDensity(*out.p_flow, env).log_prob_all(buf.tuples);
      prep.t_logs = FlowTransDensity(*out.t_flow, env).log_prob_all(buf.tuples);
    } else {
      const auto* grid = dynamic_cast<const GridWorld*>(&env);
      if (grid == nullptr)
        throw std::invalid_argument("train: the tabular estimator requires a discrete grid env");
      counts = std::make_unique<TabularCountDensity>(*grid, buf.tuples);
      prep.p_logs = TabularCountDensity::Pair(*counts).log_prob_all(buf.tuples);
      prep.t_logs = TabularCountDensity::Trans(*counts).log_prob_all(buf.tuples);
    }
    check_finite_logs(prep.p_logs, "P-hat");
    check_finite_logs(prep.t_logs, "T-hat");

    std::vector<const std::vector<double>*> states;
    std::vector<const Action*> actions;
    for (const auto& t : buf.tuples) {
      states.push_back(&t.s_next);
      actions.push_back(&t.a_next);
    }
    prep.snext_feats = encode_state_rows(env, states);
    prep.anext = collect_actions(space, actions);
  }
  {
    std::vector<const std::vector<double>*> states;
    std::vector<const Action*> actions;
    for (const auto& r : buf.bc_pairs) {
      states.push_back(&r.state);
      actions.push_back(&r.action);
    }
    prep.bc_feats = encode_state_rows(env, states);
    prep.bc_actions = collect_actions(space, actions);
  }

  Rng prng(config.seed, seed_stream::kPolicyInit);
  std::unique_ptr<Policy> policy = make_policy(env, config, prng);
  AdamOptimizer opt(policy->params(), config.optimizer);

  IndexSampler bc_sampler(buf.bc_pairs.size(), config.seed, seed_stream::kBcBatches);
  std::unique_ptr<IndexSampler> tuple_sampler;
  if (alpha > 0)
    tuple_sampler =
        std::make_unique<IndexSampler>(buf.tuples.size(), config.seed, seed_stream::kTupleBatches);

  std::unique_ptr<Policy> best_policy;
  double best_mean = -std::numeric_limits<double>::infinity();
  long best_iter = 0;
  rep.iters.reserve(config.iterations);

  for (long iter = 1; iter <= config.iterations; ++iter) {
    Tape tape;
    Tensor bc_feats;
    ActionBatch bc_actions;
    Tensor snext;
    ActionBatch anext;
    std::vector<double> p_logs, t_logs;
    if (config.beta > 0) {
      auto idx = bc_sampler.next(config.batch_size);
      bc_feats = gather_rows(prep.bc_feats, idx);
      bc_actions = gather_actions(prep.bc_actions, idx);
    }
    if (alpha > 0) {
      auto idx = tuple_sampler->next(config.batch_size);
      snext = gather_rows(prep.snext_feats, idx);
      anext = gather_actions(prep.anext, idx);
      p_logs = gather_values(prep.p_logs, idx);
      t_logs = gather_values(prep.t_logs, idx);
    }
    ObjectiveParts parts =
        objective_on_tape(tape, *policy, alpha, config.beta, config.policy_loss, &snext, &anext,
                          &p_logs, &t_logs, &bc_feats, &bc_actions);
    double total = parts.total.item();
    if (!std::isfinite(total))
      throw std::runtime_error("train: non-finite objective at iteration " + std::to_string(iter));
    tape.backward(parts.total);
    opt.step();
    rep.iters.push_back({parts.dyn_value, parts.pol_value, total});

    bool do_eval = config.eval_every > 0 &&
                   (iter % config.eval_every == 0 || iter == config.iterations);
    if (do_eval && config.eval_episodes > 0) {
      EvalStats es =
          evaluate_actor(env, policy_actor(env, *policy, config.eval_deterministic),
                         config.eval_episodes, env.default_horizon(), config.seed);
      rep.evals.push_back({iter, es.mean_return, es.std_return});
      if (es.mean_return > best_mean) {
        best_mean = es.mean_return;
        best_iter = iter;
        best_policy = policy->clone();
      }
    }
  }

  if (!rep.evals.empty()) {
    rep.final_eval_mean = rep.evals.back().mean_return;
    rep.final_eval_std = rep.evals.back().std_return;
    rep.best_iteration = best_iter;
    rep.best_eval_mean = best_mean;
  }
  if (config.return_best && best_policy) policy = std::move(best_policy);
  out.policy = std::move(policy);
  return out;
}

}  // namespace

TrainResult train(const Dataset& dataset, const Env& env, const MbilConfig& config) {
  return train_impl(dataset, env, config, /*bc_only=*/false);
}

TrainResult train_bc(const Dataset& dataset, const Env& env, const MbilConfig& config) {
  MbilConfig bc = config;
  bc.alpha = 0.0;
  if (bc.beta <= 0) bc.beta = 1.0;
  return train_impl(dataset, env, bc, /*bc_only=*/true);
}

}  // namespace mbil
