#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "mbil/mbil.hpp"
#include "testutil.hpp"

using namespace mbil;
using namespace mbil::testutil;

namespace {

Dataset synthetic_grid_dataset(const GridWorld& env, const GridWorldExpert& expert,
                               std::size_t n_traj, std::uint64_t seed) {
  return generate_demonstrations(env, expert, n_traj, env.default_horizon(), seed);
}

std::vector<double> flat_params(Policy& p) {
  std::vector<double> out;
  for (auto* t : p.params()) out.insert(out.end(), t->values.begin(), t->values.end());
  return out;
}

}  // namespace

TEST_CASE("build_tuples: counts and boundaries") {
  Dataset ds;
  ds.env_name = "gridworld";
  ds.state_dim = 2;
  ds.action_space = ActionSpace::discrete(4);
  Trajectory t;
  t.steps = {{{0, 0}, Action{1}}, {{1, 0}, Action{3}}, {{1, 1}, Action{2}}};
  ds.trajectories = {t};
  TupleBuffer buf = build_tuples(ds);
  CHECK(buf.tuples.size() == 2);
  CHECK(buf.bc_pairs.size() == 3);
  CHECK(std::get<int>(buf.tuples[0].a_next) == 3);
  CHECK(buf.tuples[1].s == std::vector<double>{1, 0});

  Trajectory single;
  single.steps = {{{2, 2}, Action{0}}};
  ds.trajectories = {single};
  TupleBuffer one = build_tuples(ds);
  CHECK(one.tuples.empty());
  CHECK(one.bc_pairs.size() == 1);

  ds.trajectories.clear();
  CHECK_THROWS_AS(build_tuples(ds), std::invalid_argument);

  // 3 trajectories of length 100 -> 297 tuples, 300 BC pairs
  GridWorld env(GridWorld::Params{.width = 5, .height = 5, .slip_num = 1, .slip_den = 10,
                                  .goal_row = 4, .goal_col = 4, .horizon = 100});
  // use a wandering expert that never reaches the goal quickly: force
  // horizon-length trajectories by removing the goal attraction
  Dataset demos;
  demos.env_name = "gridworld";
  demos.state_dim = 2;
  demos.action_space = ActionSpace::discrete(4);
  Rng rng(3);
  for (int k = 0; k < 3; ++k) {
    Trajectory traj;
    auto s = std::vector<double>{0, 0};
    for (int i = 0; i < 100; ++i) {
      int a = static_cast<int>(rng.uniform_index(4));
      traj.steps.push_back({s, Action{a}});
      s = env.step(s, Action{a}, rng).state;  // ignore done; synthetic fixed length
    }
    demos.trajectories.push_back(traj);
  }
  TupleBuffer big = build_tuples(demos);
  CHECK(big.tuples.size() == 297);
  CHECK(big.bc_pairs.size() == 300);
}

TEST_CASE("balance_residual arithmetic") {
  CHECK(balance_residual(-2.0, -1.2, -0.8) == 0.0);
  CHECK(balance_residual(-1.0, -1.0, -1.0) == 1.0);
  CHECK(balance_residual(0.5, 0.25, 0.25) == 0.0);
}

TEST_CASE("exact balance on the 3x3 gridworld with oracle densities") {
  GridWorld::Params p;
  p.width = 3;
  p.height = 3;
  p.goal_row = 2;
  p.goal_col = 2;
  GridWorld env(p);
  GridWorldExpert expert(env);
  Dataset ds = synthetic_grid_dataset(env, expert, 40, 5);
  TupleBuffer buf = build_tuples(ds);
  REQUIRE(buf.tuples.size() > 50);

  OracleChainDensity p_hat(env, expert);
  OracleTransDensity t_hat(env);

  // Probability level, exhaustive enumeration in integer arithmetic: the
  // state-action chain P(s',a'|s,a) = pi_D(a'|s') T(s'|s,a) marginalizes back
  // to T exactly and its rows carry exactly unit mass.
  std::uint64_t chain_den = expert.table().den * env.transition_den();
  for (std::size_t s = 0; s < env.n_states(); ++s)
    for (std::size_t a = 0; a < 4; ++a) {
      std::uint64_t row_mass = 0;
      for (std::size_t s2 = 0; s2 < env.n_states(); ++s2) {
        std::uint64_t marginal = 0;
        for (std::size_t a2 = 0; a2 < 4; ++a2) {
          std::uint64_t chain_num = expert.table().num[s2][a2] * env.transition_num(s, a, s2);
          marginal += chain_num;
          row_mass += chain_num;
          if (env.transition_num(s, a, s2) == 0) CHECK(chain_num == 0);
        }
        // sum_a' pi(a'|s') T(s'|s,a) == T(s'|s,a) exactly
        CHECK(marginal == expert.table().den * env.transition_num(s, a, s2));
      }
      CHECK(row_mass == chain_den);
    }

  // Log domain: the residual cancels to below one squared half-ulp; the
  // double sum log pi + log T cannot round to the exact real for every
  // tuple, so machine zero (<= 1e-30) is the attainable form of "zero".
  double worst = 0.0;
  for (const auto& t : buf.tuples) {
    double pi_log = expert.log_prob(t.s_next, t.a_next);
    double r = balance_residual(p_hat.log_prob(t), pi_log, t_hat.log_prob(t));
    worst = std::max(worst, r);
  }
  CHECK(worst <= 1e-30);
}

TEST_CASE("dynamics loss over tabular policies is minimized exactly at the expert") {
  GridWorld::Params p;
  p.width = 3;
  p.height = 3;
  p.goal_row = 2;
  p.goal_col = 2;
  GridWorld env(p);
  GridWorldExpert expert(env);
  Dataset ds = synthetic_grid_dataset(env, expert, 200, 11);
  TupleBuffer buf = build_tuples(ds);
  OracleChainDensity p_hat(env, expert);
  OracleTransDensity t_hat(env);

  // Work in log space so the expert's own log path cancels exactly.
  auto loss_of = [&](const std::vector<std::vector<double>>& pi_logs) {
    double total = 0.0;
    for (const auto& t : buf.tuples) {
      std::size_t s2 = env.state_index(t.s_next);
      std::size_t a2 = static_cast<std::size_t>(std::get<int>(t.a_next));
      total += balance_residual(p_hat.log_prob(t), pi_logs[s2][a2], t_hat.log_prob(t));
    }
    return total;
  };

  std::vector<std::vector<double>> expert_logs(env.n_states(), std::vector<double>(4));
  for (std::size_t s = 0; s < env.n_states(); ++s)
    for (std::size_t a = 0; a < 4; ++a) expert_logs[s][a] = expert.table().log_prob(s, a);

  CHECK(loss_of(expert_logs) <= 1e-27);  // machine zero at the demonstrator (382 ulp^2 terms)

  // Observability: the loss can only pin pi at next-state/action pairs that
  // occur in the buffer.  Where at least two actions are observed, any mass
  // shift touching an observed action strictly increases the loss; where all
  // four are observed the zero of the loss recovers pi_D completely (three
  // pinned coordinates plus the simplex constraint already force the fourth).
  std::map<std::size_t, std::set<std::size_t>> seen;
  for (const auto& t : buf.tuples)
    seen[env.state_index(t.s_next)].insert(static_cast<std::size_t>(std::get<int>(t.a_next)));
  std::size_t multi = 0;
  for (auto& [s, acts] : seen)
    if (acts.size() >= 2) ++multi;
  CHECK(seen.size() >= 8);
  CHECK(multi >= 4);

  Rng rng(13);
  int tried = 0;
  for (int trial = 0; trial < 300 && tried < 100; ++trial) {
    std::size_t s = rng.uniform_index(env.n_states());
    double eps = 0.02 + 0.2 * rng.u01();
    std::size_t i = rng.uniform_index(4), j = (i + 1 + rng.uniform_index(3)) % 4;
    auto it = seen.find(s);
    if (it == seen.end() || !it->second.count(i)) continue;  // invisible perturbation
    ++tried;
    auto pi_logs = expert_logs;
    double p_i = expert.table().prob(s, i);
    double moved = std::min(eps, p_i * 0.5);
    pi_logs[s][i] = std::log(p_i - moved);
    pi_logs[s][j] = std::log(expert.table().prob(s, j) + moved);
    CHECK(loss_of(pi_logs) > 0.0);
  }
  CHECK(tried >= 50);
}

TEST_CASE("tabular counting estimator: conditionals, fallbacks, infeasible tuples") {
  GridWorld::Params p;
  p.width = 3;
  p.height = 3;
  p.goal_row = 2;
  p.goal_col = 2;
  GridWorld env(p);
  GridWorldExpert expert(env);
  Dataset ds = synthetic_grid_dataset(env, expert, 100, 17);
  TupleBuffer buf = build_tuples(ds);
  TabularCountDensity counts(env, buf.tuples);

  // every demonstrated tuple has finite estimates
  for (const auto& t : buf.tuples) {
    CHECK(std::isfinite(counts.log_pair(t)));
    CHECK(std::isfinite(counts.log_trans(t)));
    CHECK(counts.log_pair(t) <= counts.log_trans(t) + 1e-12);  // pair refines trans
  }

  // T-hat rows over observed (s,a) sum to one
  std::map<std::pair<std::size_t, std::size_t>, double> mass;
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> seen;
  for (const auto& t : buf.tuples) {
    std::size_t s = env.state_index(t.s), a = std::get<int>(t.a), s2 = env.state_index(t.s_next);
    if (seen.insert({s, a, s2}).second)
      mass[{s, a}] += std::exp(counts.log_trans(t));
  }
  for (auto& [sa, m] : mass) CHECK(m == doctest::Approx(1.0).epsilon(1e-9));

  // unseen conditioning pair falls back to the uniform density
  TransitionTuple ghost{{0, 0}, Action{0}, {0, 0}, Action{0}};
  TabularCountDensity empty(env, {});
  CHECK(empty.log_pair(ghost) == doctest::Approx(-std::log(9.0 * 4.0)));
  CHECK(empty.log_trans(ghost) == doctest::Approx(-std::log(9.0)));
}

namespace {

// Rigged densities for objective tests.
struct ConstPair final : PairDensity {
  double v;
  explicit ConstPair(double v) : v(v) {}
  double log_prob(const TransitionTuple&) const override { return v; }
};
struct ConstTrans final : TransDensity {
  double v;
  explicit ConstTrans(double v) : v(v) {}
  double log_prob(const TransitionTuple&) const override { return v; }
};

}  // namespace

TEST_CASE("mbil_objective: degenerate weights and gradient correctness") {
  GridWorld env(GridWorld::Params{.width = 3, .height = 3, .slip_num = 1, .slip_den = 10,
                                  .goal_row = 2, .goal_col = 2, .horizon = 50});
  GridWorldExpert expert(env);
  Dataset ds = synthetic_grid_dataset(env, expert, 10, 19);
  TupleBuffer buf = build_tuples(ds);
  std::vector<TransitionTuple> tuple_batch(buf.tuples.begin(), buf.tuples.begin() + 16);
  std::vector<StepRecord> bc_batch(buf.bc_pairs.begin(), buf.bc_pairs.begin() + 16);

  Rng prng(1);
  CategoricalPolicy policy(env.descriptor().feature_dim, 4, 16, prng);
  OracleChainDensity p_hat(env, expert);
  OracleTransDensity t_hat(env);

  MbilConfig cfg;
  cfg.estimator = DensityEstimator::tabular;

  // alpha = 0: objective equals beta * BC loss bit for bit
  cfg.alpha = 0.0;
  cfg.beta = 1.0;
  {
    Tape tape;
    double obj =
        mbil_objective(tape, policy, env, tuple_batch, bc_batch, p_hat, t_hat, cfg).item();
    std::vector<const std::vector<double>*> states;
    std::vector<const Action*> actions;
    Tensor feats = Tensor::zeros({bc_batch.size(), env.descriptor().feature_dim});
    std::vector<int> acts;
    for (std::size_t i = 0; i < bc_batch.size(); ++i) {
      auto f = env.features(bc_batch[i].state);
      std::copy(f.begin(), f.end(), feats.values.begin() + i * f.size());
      acts.push_back(std::get<int>(bc_batch[i].action));
    }
    Tape t2;
    double bc = mul_scalar(bc_loss(policy, t2, t2.constant(feats), ActionBatch{acts},
                                   PolicyLossKind::nll), 1.0).item();
    CHECK(obj == bc);
  }

  // beta = 0 with a policy satisfying log pi = log P - log T exactly:
  // rig dyadic constants so the float cancellation is exact
  {
    MbilConfig c2 = cfg;
    c2.alpha = 1.0;
    c2.beta = 0.0;
    // log pi for a uniform zero-weight policy is exactly -log 4
    Rng r2(2);
    CategoricalPolicy uniform(env.descriptor().feature_dim, 4, 8, r2);
    for (auto* pt : uniform.params()) std::fill(pt->values.begin(), pt->values.end(), 0.0);
    double logpi = uniform.log_prob(env.features({0, 0}), Action{0});
    ConstPair cp(logpi - 0.5);  // p - t = logpi with t = -0.5 (dyadic)
    ConstTrans ct(-0.5);
    Tape tape;
    double obj =
        mbil_objective(tape, uniform, env, tuple_batch, bc_batch, cp, ct, c2).item();
    CHECK(obj == 0.0);
  }

  // both terms active: gradient w.r.t. every policy parameter matches FD
  cfg.alpha = 0.7;
  cfg.beta = 0.4;
  {
    Tape tape;
    Var obj = mbil_objective(tape, policy, env, tuple_batch, bc_batch, p_hat, t_hat, cfg);
    tape.backward(obj);
    for (std::size_t pi = 0; pi < policy.params().size(); ++pi) {
      Tensor* pt = policy.params()[pi];
      auto analytic = pt->grad;
      auto f = [&](const std::vector<double>& v) {
        auto saved = pt->values;
        pt->values = v;
        Tape tt;
        double r =
            mbil_objective(tt, policy, env, tuple_batch, bc_batch, p_hat, t_hat, cfg).item();
        pt->values = saved;
        return r;
      };
      INFO("objective param ", pi);
      CHECK(max_grad_err(f, pt->values, analytic) < 1e-4);
    }
  }

  // non-finite density evaluations carry the offending tuple index
  {
    ConstPair bad(-std::numeric_limits<double>::infinity());
    ConstTrans ok(-0.5);
    MbilConfig c3 = cfg;
    Tape tape;
    try {
      mbil_objective(tape, policy, env, tuple_batch, bc_batch, bad, ok, c3);
      FAIL("expected an error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("tuple index 0") != std::string::npos);
    }
  }
}

TEST_CASE("train on gridworld with the tabular estimator: report shape and learning") {
  GridWorld env(GridWorld::Params{.width = 3, .height = 3, .slip_num = 1, .slip_den = 10,
                                  .goal_row = 2, .goal_col = 2, .horizon = 50});
  GridWorldExpert expert(env);
  Dataset ds = synthetic_grid_dataset(env, expert, 20, 23);

  MbilConfig cfg;
  cfg.alpha = 1.0;
  cfg.beta = 1.0;
  cfg.estimator = DensityEstimator::tabular;
  cfg.iterations = 400;
  cfg.batch_size = 64;
  cfg.policy_hidden = 32;
  cfg.eval_every = 200;
  cfg.eval_episodes = 50;
  cfg.seed = 7;

  TrainResult res = train(ds, env, cfg);
  CHECK(res.report.iters.size() == 400);  // one record per iteration
  CHECK(res.report.evals.size() == 2);
  CHECK(res.p_flow == nullptr);  // tabular estimator keeps no flows

  // learned policy clearly beats a uniform-random one
  Rng urng(1);
  CategoricalPolicy uniform(env.descriptor().feature_dim, 4, 8, urng);
  for (auto* pt : uniform.params()) std::fill(pt->values.begin(), pt->values.end(), 0.0);
  EvalStats learned = evaluate_actor(env, policy_actor(env, *res.policy, true), 100, 50, 99);
  EvalStats random = evaluate_actor(env, policy_actor(env, uniform, true), 100, 50, 99);
  CHECK(learned.mean_return > random.mean_return + 2.0);

  // objective decreases over the first 100 iterations (median over 3 seeds)
  std::vector<double> deltas;
  for (std::uint64_t s : {11ull, 12ull, 13ull}) {
    MbilConfig c = cfg;
    c.seed = s;
    c.iterations = 100;
    c.eval_every = 0;
    TrainResult r = train(ds, env, c);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 10; ++i) head += r.report.iters[i].total;
    for (int i = 90; i < 100; ++i) tail += r.report.iters[i].total;
    deltas.push_back(head - tail);
  }
  std::sort(deltas.begin(), deltas.end());
  CHECK(deltas[1] > 0.0);  // median improvement
}

TEST_CASE("bc reduction: alpha=0 training is bit-identical to standalone BC") {
  GridWorld env(GridWorld::Params{.width = 3, .height = 3, .slip_num = 1, .slip_den = 10,
                                  .goal_row = 2, .goal_col = 2, .horizon = 50});
  GridWorldExpert expert(env);
  Dataset ds = synthetic_grid_dataset(env, expert, 10, 29);

  MbilConfig cfg;
  cfg.alpha = 0.0;
  cfg.beta = 1.0;
  cfg.iterations = 150;
  cfg.batch_size = 32;
  cfg.policy_hidden = 16;
  cfg.eval_every = 0;
  cfg.seed = 42;

  TrainResult mbil_run = train(ds, env, cfg);
  TrainResult bc_run = train_bc(ds, env, cfg);
  CHECK(flat_params(*mbil_run.policy) == flat_params(*bc_run.policy));

  // independent oracle loop: same streams, plain bc_loss + Adam
  TupleBuffer buf = build_tuples(ds);
  Rng prng(cfg.seed, seed_stream::kPolicyInit);
  CategoricalPolicy policy(env.descriptor().feature_dim, 4, cfg.policy_hidden, prng);
  AdamOptimizer opt(policy.params(), cfg.optimizer);
  IndexSampler sampler(buf.bc_pairs.size(), cfg.seed, seed_stream::kBcBatches);
  std::size_t feat = env.descriptor().feature_dim;
  for (long iter = 1; iter <= cfg.iterations; ++iter) {
    auto idx = sampler.next(cfg.batch_size);
    Tensor feats = Tensor::zeros({idx.size(), feat});
    std::vector<int> acts(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto f = env.features(buf.bc_pairs[idx[i]].state);
      std::copy(f.begin(), f.end(), feats.values.begin() + i * feat);
      acts[i] = std::get<int>(buf.bc_pairs[idx[i]].action);
    }
    Tape tape;
    Var loss = mul_scalar(
        bc_loss(policy, tape, tape.constant(feats), ActionBatch{acts}, PolicyLossKind::nll), 1.0);
    tape.backward(loss);
    opt.step();
  }
  CHECK(flat_params(*mbil_run.policy) == flat_params(policy));
}

TEST_CASE("train with flows on pointmass: frozen densities and determinism") {
  PointMass env(PointMass::Params{.dt = 0.1, .sigma = 0.1, .state_bound = 2.0,
                                  .start_box = 0.9, .horizon = 30});
  PointMassExpert expert(env);
  Dataset ds = generate_demonstrations(env, expert, 2, 30, 31);

  MbilConfig cfg;
  cfg.alpha = 0.001;
  cfg.beta = 1.0;
  cfg.policy_loss = PolicyLossKind::mse;
  cfg.iterations = 60;
  cfg.batch_size = 32;
  cfg.policy_hidden = 16;
  cfg.flow_arch = {.blocks = 2, .hidden = 16, .s_max = 2.0, .ctilde_dim = 0};
  cfg.p_fit = {.steps = 120, .batch_size = 32, .noise_sigma = 0.01, .optimizer = {}, .seed = 0,
               .log_every = 50};
  cfg.t_fit = cfg.p_fit;
  cfg.eval_every = 30;
  cfg.eval_episodes = 5;
  cfg.seed = 3;

  TrainResult a = train(ds, env, cfg);
  REQUIRE(a.p_flow != nullptr);
  REQUIRE(a.t_flow != nullptr);
  CHECK(std::isfinite(a.report.p_fit_nll));
  CHECK(a.report.iters.size() == 60);

  // policy training must not touch the frozen flows
  TrainResult b = train(ds, env, cfg);
  auto flat_flow = [](FlowModel& f) {
    std::vector<double> out;
    for (auto* p : f.params()) out.insert(out.end(), p->values.begin(), p->values.end());
    return out;
  };
  CHECK(flat_flow(*a.p_flow) == flat_flow(*b.p_flow));  // deterministic fit
  CHECK(flat_params(*a.policy) == flat_params(*b.policy));

  // freezing: retrain the same flows directly and compare to the cached logs
  TupleBuffer buf = build_tuples(ds);
  FlowPairDensity fp(*a.p_flow, env);
  auto logs1 = fp.log_prob_all(buf.tuples);
  auto logs2 = fp.log_prob_all(buf.tuples);
  CHECK(logs1 == logs2);
}

TEST_CASE("config validation") {
  MbilConfig cfg;
  cfg.alpha = 0.0;
  cfg.beta = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.alpha = -1.0;
  cfg.beta = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  GridWorld env(GridWorld::Params{.width = 3, .height = 3, .slip_num = 1, .slip_den = 10,
                                  .goal_row = 2, .goal_col = 2, .horizon = 50});
  GridWorldExpert expert(env);
  Dataset ds = synthetic_grid_dataset(env, expert, 3, 1);
  MbilConfig bad;
  bad.policy_loss = PolicyLossKind::mse;  // discrete actions reject mse
  bad.estimator = DensityEstimator::tabular;
  bad.iterations = 5;
  CHECK_THROWS_AS(train(ds, env, bad), std::invalid_argument);

  PointMass pm;
  PointMassExpert pme(pm);
  Dataset pds = generate_demonstrations(pm, pme, 1, 10, 1);
  MbilConfig mismatch;
  mismatch.estimator = DensityEstimator::tabular;  // tabular needs a grid
  mismatch.iterations = 5;
  CHECK_THROWS_AS(train(pds, pm, mismatch), std::invalid_argument);
  CHECK_THROWS_AS(train(pds, env, mismatch), std::invalid_argument);  // env mismatch
}

TEST_CASE("metrics csv: schema and eval alignment") {
  TrainReport rep;
  rep.iters = {{0.5, 1.0, 1.5}, {0.4, 0.9, 1.3}, {0.3, 0.8, 1.1}};
  rep.evals = {{2, -10.0, 1.5}};
  write_metrics_csv("/tmp/mbil_test_metrics.csv", rep, "run_a", 7);
  std::ifstream in("/tmp/mbil_test_metrics.csv");
  std::string header, l1, l2, l3;
  std::getline(in, header);
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, l3);
  CHECK(header ==
        "run_id,seed,iteration,dyn_loss,pol_loss,total_loss,eval_return_mean,eval_return_std");
  CHECK(l1.substr(0, 10) == "run_a,7,1,");
  CHECK(l1.find(",,") != std::string::npos);   // no eval at iteration 1
  CHECK(l2.find("-10") != std::string::npos);  // eval row at iteration 2
}
