#include "mbil/envs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "mbil/policy.hpp"

namespace mbil {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
}  // namespace

double TabularPolicy::log_prob(std::size_t s, std::size_t a) const {
  std::uint64_t n = num[s][a];
  if (n == 0) return kNegInf;
  return std::log(static_cast<double>(n)) - std::log(static_cast<double>(den));
}

// ---------------------------------------------------------------------------
// GridWorld

GridWorld::GridWorld() : GridWorld(Params{}) {}

GridWorld::GridWorld(Params p) : params_(p) {
  if (p.width < 2 || p.height < 2) throw std::invalid_argument("GridWorld: grid must be >= 2x2");
  if (p.slip_num > p.slip_den) throw std::invalid_argument("GridWorld: slip probability > 1");
  if (p.goal_row >= p.height || p.goal_col >= p.width)
    throw std::invalid_argument("GridWorld: goal outside the grid");

  std::size_t S = n_states();
  t_den_ = 2 * p.slip_den;
  std::uint64_t intended = 2 * (p.slip_den - p.slip_num);
  std::uint64_t perp = p.slip_num;
  t_num_.assign(S * kActions * S, 0);

  auto move = [&](std::size_t row, std::size_t col, int a) -> std::size_t {
    long long r = static_cast<long long>(row), c = static_cast<long long>(col);
    switch (a) {
      case kUp: r -= 1; break;
      case kDown: r += 1; break;
      case kLeft: c -= 1; break;
      case kRight: c += 1; break;
    }
    if (r < 0 || c < 0 || r >= static_cast<long long>(p.height) ||
        c >= static_cast<long long>(p.width))
      return row * p.width + col;  // blocked: stay
    return static_cast<std::size_t>(r) * p.width + static_cast<std::size_t>(c);
  };

  std::size_t goal = goal_index();
  for (std::size_t s = 0; s < S; ++s) {
    std::size_t row = s / p.width, col = s % p.width;
    for (std::size_t a = 0; a < kActions; ++a) {
      auto* dist = &t_num_[(s * kActions + a) * S];
      if (s == goal) {
        dist[s] = t_den_;  // absorbing
        continue;
      }
      int p1 = (a == kUp || a == kDown) ? kLeft : kUp;
      int p2 = (a == kUp || a == kDown) ? kRight : kDown;
      dist[move(row, col, static_cast<int>(a))] += intended;
      dist[move(row, col, p1)] += perp;
      dist[move(row, col, p2)] += perp;
    }
  }

  desc_.name = "gridworld";
  desc_.state_dim = 2;
  desc_.feature_dim = S;
  desc_.coord_dim = 2;
  desc_.action_space = ActionSpace::discrete(kActions);
  desc_.params = {{"width", p.width},       {"height", p.height}, {"slip_num", p.slip_num},
                  {"slip_den", p.slip_den}, {"goal_row", p.goal_row}, {"goal_col", p.goal_col},
                  {"horizon", p.horizon}};
}

std::size_t GridWorld::state_index(const std::vector<double>& s) const {
  if (s.size() != 2) throw std::invalid_argument("GridWorld: state must be (row, col)");
  auto row = static_cast<long long>(std::llround(s[0]));
  auto col = static_cast<long long>(std::llround(s[1]));
  if (row < 0 || col < 0 || row >= static_cast<long long>(params_.height) ||
      col >= static_cast<long long>(params_.width))
    throw std::out_of_range("GridWorld: state (" + std::to_string(row) + "," +
                            std::to_string(col) + ") outside the grid");
  return static_cast<std::size_t>(row) * params_.width + static_cast<std::size_t>(col);
}

std::vector<double> GridWorld::state_of(std::size_t idx) const {
  return {static_cast<double>(idx / params_.width), static_cast<double>(idx % params_.width)};
}

std::size_t GridWorld::goal_index() const {
  return params_.goal_row * params_.width + params_.goal_col;
}

std::vector<double> GridWorld::reset(Rng& rng) const {
  std::size_t pick = rng.uniform_index(n_states() - 1);
  if (pick >= goal_index()) ++pick;  // uniform over non-goal cells
  return state_of(pick);
}

StepResult GridWorld::step(const std::vector<double>& s, const Action& a, Rng& rng) const {
  desc_.action_space.validate(a);
  std::size_t si = state_index(s);
  std::size_t ai = static_cast<std::size_t>(std::get<int>(a));
  // Exact rational sampling from the transition row.
  std::uint64_t r = rng.uniform_index(t_den_);
  std::uint64_t acc = 0;
  std::size_t s2 = 0;
  for (std::size_t cand = 0; cand < n_states(); ++cand) {
    acc += transition_num(si, ai, cand);
    if (r < acc) {
      s2 = cand;
      break;
    }
  }
  StepResult out;
  out.state = state_of(s2);
  out.reward = si == goal_index() ? 0.0 : -1.0;
  out.done = s2 == goal_index();
  return out;
}

double GridWorld::true_transition_logpdf(const std::vector<double>& s, const Action& a,
                                         const std::vector<double>& s_next) const {
  desc_.action_space.validate(a);
  std::uint64_t n = transition_num(state_index(s), static_cast<std::size_t>(std::get<int>(a)),
                                   state_index(s_next));
  if (n == 0) return kNegInf;  // infeasible successor
  return std::log(static_cast<double>(n)) - std::log(static_cast<double>(t_den_));
}

std::vector<double> GridWorld::features(const std::vector<double>& s) const {
  std::vector<double> f(n_states(), 0.0);
  f[state_index(s)] = 1.0;
  return f;
}

std::vector<double> GridWorld::coords(const std::vector<double>& s) const { return s; }

std::vector<double> GridWorld::value_iteration(double tol, std::size_t max_iter) const {
  std::size_t S = n_states(), goal = goal_index();
  std::vector<double> v(S, 0.0), next(S, 0.0);
  for (std::size_t it = 0; it < max_iter; ++it) {
    double delta = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
      if (s == goal) {
        next[s] = 0.0;
        continue;
      }
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < kActions; ++a) {
        double q = -1.0;
        for (std::size_t s2 = 0; s2 < S; ++s2) {
          std::uint64_t n = transition_num(s, a, s2);
          if (n) q += transition_prob(s, a, s2) * v[s2];
        }
        best = std::max(best, q);
      }
      next[s] = best;
      delta = std::max(delta, std::fabs(next[s] - v[s]));
    }
    v.swap(next);
    if (delta < tol) break;
  }
  return v;
}

std::vector<std::size_t> GridWorld::greedy_policy(const std::vector<double>& values) const {
  std::size_t S = n_states();
  std::vector<std::size_t> pi(S, 0);
  for (std::size_t s = 0; s < S; ++s) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < kActions; ++a) {
      double q = -1.0;
      for (std::size_t s2 = 0; s2 < S; ++s2) {
        std::uint64_t n = transition_num(s, a, s2);
        if (n) q += transition_prob(s, a, s2) * values[s2];
      }
      if (q > best) {
        best = q;
        pi[s] = a;
      }
    }
  }
  return pi;
}

double GridWorld::policy_value(const TabularPolicy& pi) const {
  // Finite-horizon policy evaluation matching the rollout protocol.
  std::size_t S = n_states(), goal = goal_index();
  std::vector<double> v(S, 0.0), next(S, 0.0);
  for (std::size_t k = 0; k < params_.horizon; ++k) {
    for (std::size_t s = 0; s < S; ++s) {
      if (s == goal) {
        next[s] = 0.0;
        continue;
      }
      double acc = -1.0;
      for (std::size_t a = 0; a < kActions; ++a) {
        double pa = pi.prob(s, a);
        if (pa == 0.0) continue;
        for (std::size_t s2 = 0; s2 < S; ++s2) {
          std::uint64_t n = transition_num(s, a, s2);
          if (n) acc += pa * transition_prob(s, a, s2) * v[s2];
        }
      }
      next[s] = acc;
    }
    v.swap(next);
  }
  double total = 0.0;
  for (std::size_t s = 0; s < S; ++s)
    if (s != goal) total += v[s];
  return total / static_cast<double>(S - 1);
}

// ---------------------------------------------------------------------------
// GridWorldExpert

GridWorldExpert::GridWorldExpert(const GridWorld& env, std::uint64_t eps_num,
                                 std::uint64_t eps_den)
    : env_(env) {
  if (eps_num > eps_den) throw std::invalid_argument("GridWorldExpert: epsilon > 1");
  auto values = env.value_iteration();
  auto greedy = env.greedy_policy(values);
  std::size_t S = env.n_states();
  table_.den = GridWorld::kActions * eps_den;
  table_.num.assign(S, std::vector<std::uint64_t>(GridWorld::kActions, eps_num));
  for (std::size_t s = 0; s < S; ++s)
    table_.num[s][greedy[s]] += GridWorld::kActions * (eps_den - eps_num);
}

Action GridWorldExpert::act(const std::vector<double>& s, Rng& rng) const {
  std::size_t si = env_.state_index(s);
  std::uint64_t r = rng.uniform_index(table_.den);
  std::uint64_t acc = 0;
  for (std::size_t a = 0; a < GridWorld::kActions; ++a) {
    acc += table_.num[si][a];
    if (r < acc) return static_cast<int>(a);
  }
  return static_cast<int>(GridWorld::kActions - 1);
}

double GridWorldExpert::log_prob(const std::vector<double>& s, const Action& a) const {
  env_.descriptor().action_space.validate(a);
  return table_.log_prob(env_.state_index(s), static_cast<std::size_t>(std::get<int>(a)));
}

// ---------------------------------------------------------------------------
// PointMass

PointMass::PointMass() : PointMass(Params{}) {}

PointMass::PointMass(Params p) : params_(p) {
  if (p.sigma < 0 || p.dt <= 0) throw std::invalid_argument("PointMass: bad dt/sigma");
  desc_.name = "pointmass";
  desc_.state_dim = 2;
  desc_.feature_dim = 2;
  desc_.coord_dim = 2;
  desc_.action_space = ActionSpace::box(2, -1.0, 1.0);
  desc_.params = {{"dt", p.dt},
                  {"sigma", p.sigma},
                  {"state_bound", p.state_bound},
                  {"start_box", p.start_box},
                  {"horizon", p.horizon}};
}

std::vector<double> PointMass::reset(Rng& rng) const {
  return {rng.uniform(-params_.start_box, params_.start_box),
          rng.uniform(-params_.start_box, params_.start_box)};
}

StepResult PointMass::step(const std::vector<double>& s, const Action& a, Rng& rng) const {
  desc_.action_space.validate(a);
  const auto& av = std::get<std::vector<double>>(a);
  StepResult out;
  out.state.resize(2);
  for (int i = 0; i < 2; ++i) {
    double v = s[i] + av[i] * params_.dt + params_.sigma * rng.normal();
    out.state[i] = std::clamp(v, -params_.state_bound, params_.state_bound);
  }
  out.reward = -std::hypot(out.state[0], out.state[1]);
  out.done = false;
  return out;
}

double PointMass::true_transition_logpdf(const std::vector<double>& s, const Action& a,
                                         const std::vector<double>& s_next) const {
  desc_.action_space.validate(a);
  const auto& av = std::get<std::vector<double>>(a);
  double sigma = params_.sigma;
  double lp = 0.0;
  for (int i = 0; i < 2; ++i) {
    double mean = s[i] + av[i] * params_.dt;
    double z = (s_next[i] - mean) / sigma;
    lp += -0.5 * std::log(2.0 * M_PI) - std::log(sigma) - 0.5 * z * z;
  }
  return lp;
}

// ---------------------------------------------------------------------------
// Truncated normal + PointMassExpert

double truncated_normal_logpdf(double x, double mean, double stddev, double lo, double hi) {
  if (x < lo || x > hi) return kNegInf;
  double alpha = (lo - mean) / stddev;
  double beta = (hi - mean) / stddev;
  double z = (x - mean) / stddev;
  double mass = norm_cdf(beta) - norm_cdf(alpha);
  return -0.5 * std::log(2.0 * M_PI) - std::log(stddev) - 0.5 * z * z - std::log(mass);
}

double truncated_normal_sample(double mean, double stddev, double lo, double hi, Rng& rng) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    double v = mean + stddev * rng.normal();
    if (v >= lo && v <= hi) return v;
  }
  throw std::runtime_error("truncated_normal_sample: acceptance failure");
}

PointMassExpert::PointMassExpert(const PointMass& env, double k_p, double noise_std)
    : env_(env), k_p_(k_p), noise_std_(noise_std) {}

std::vector<double> PointMassExpert::mean_action(const std::vector<double>& s) const {
  const auto& space = env_.descriptor().action_space;
  return {std::clamp(-k_p_ * s[0], space.low, space.high),
          std::clamp(-k_p_ * s[1], space.low, space.high)};
}

Action PointMassExpert::act(const std::vector<double>& s, Rng& rng) const {
  const auto& space = env_.descriptor().action_space;
  auto mu = mean_action(s);
  std::vector<double> a(2);
  for (int i = 0; i < 2; ++i)
    a[i] = truncated_normal_sample(mu[i], noise_std_, space.low, space.high, rng);
  return a;
}

double PointMassExpert::log_prob(const std::vector<double>& s, const Action& a) const {
  const auto& space = env_.descriptor().action_space;
  const auto& av = std::get<std::vector<double>>(a);
  auto mu = mean_action(s);
  double lp = 0.0;
  for (int i = 0; i < 2; ++i)
    lp += truncated_normal_logpdf(av[i], mu[i], noise_std_, space.low, space.high);
  return lp;
}

// ---------------------------------------------------------------------------
// Demonstrations, balance check, evaluation

Dataset generate_demonstrations(const Env& env, const Expert& expert, std::size_t n_trajectories,
                                std::size_t horizon, std::uint64_t seed) {
  if (n_trajectories < 1) throw std::invalid_argument("generate_demonstrations: need n >= 1");
  Dataset ds;
  const auto& d = env.descriptor();
  ds.env_name = d.name;
  ds.state_dim = d.state_dim;
  ds.action_space = d.action_space;
  ds.env_params = d.params;
  Rng rng(seed, 31);
  for (std::size_t i = 0; i < n_trajectories; ++i) {
    Trajectory traj;
    auto s = env.reset(rng);
    for (std::size_t t = 0; t < horizon; ++t) {
      Action a = expert.act(s, rng);
      traj.steps.push_back({s, a});
      StepResult r = env.step(s, a, rng);
      if (r.done) break;
      s = std::move(r.state);
    }
    ds.trajectories.push_back(std::move(traj));
  }
  return ds;
}

double state_balance_check(const Env& env, const TabularPolicy& generator,
                           const TabularPolicy& candidate) {
  const auto* grid = dynamic_cast<const GridWorld*>(&env);
  if (grid == nullptr)
    throw std::invalid_argument(
        "state_balance_check: requires a discrete tabular environment (the action sum becomes an "
        "integral on continuous spaces)");
  std::size_t S = grid->n_states(), A = GridWorld::kActions;
  const auto d1 = static_cast<__int128>(generator.den) * grid->transition_den();
  const auto d2 = static_cast<__int128>(candidate.den) * grid->transition_den();
  double worst = 0.0;
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t s2 = 0; s2 < S; ++s2) {
      __int128 lhs = 0, rhs = 0;
      for (std::size_t a = 0; a < A; ++a) {
        lhs += static_cast<__int128>(generator.num[s][a]) * grid->transition_num(s, a, s2);
        rhs += static_cast<__int128>(candidate.num[s][a]) * grid->transition_num(s, a, s2);
      }
      __int128 diff = lhs * d2 - rhs * d1;
      if (diff < 0) diff = -diff;
      double err = static_cast<double>(diff) / (static_cast<double>(d1) * static_cast<double>(d2));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double state_balance_check(const Env& env, const TabularPolicy& generator) {
  return state_balance_check(env, generator, generator);
}

EvalStats evaluate_actor(const Env& env, const Actor& actor, std::size_t episodes,
                         std::size_t horizon, std::uint64_t seed) {
  if (episodes < 1) throw std::invalid_argument("evaluate_actor: need episodes >= 1");
  const auto& space = env.descriptor().action_space;
  EvalStats stats;
  stats.returns.reserve(episodes);
  for (std::size_t ep = 0; ep < episodes; ++ep) {
    Rng rng(seed, 1000 + ep);  // independent per-episode streams
    auto s = env.reset(rng);
    double ret = 0.0;
    for (std::size_t t = 0; t < horizon; ++t) {
      Action a = actor(s, rng);
      if (space.kind == ActionSpace::Kind::box) {
        auto& av = std::get<std::vector<double>>(a);
        for (auto& v : av) v = std::clamp(v, space.low, space.high);
      }
      StepResult r = env.step(s, a, rng);
      ret += r.reward;
      if (r.done) break;
      s = std::move(r.state);
    }
    stats.returns.push_back(ret);
  }
  double mean = 0.0;
  for (double r : stats.returns) mean += r;
  mean /= static_cast<double>(episodes);
  double var = 0.0;
  for (double r : stats.returns) var += (r - mean) * (r - mean);
  stats.mean_return = mean;
  stats.std_return = episodes > 1 ? std::sqrt(var / static_cast<double>(episodes - 1)) : 0.0;
  return stats;
}

Actor expert_actor(const Expert& expert) {
  return [&expert](const std::vector<double>& s, Rng& rng) { return expert.act(s, rng); };
}

Actor policy_actor(const Env& env, const Policy& policy, bool deterministic) {
  return [&env, &policy, deterministic](const std::vector<double>& s, Rng& rng) {
    auto f = env.features(s);
    return deterministic ? policy.mode(f) : policy.sample(f, rng);
  };
}

std::unique_ptr<Env> make_env(const std::string& name, const nlohmann::json& overrides) {
  if (name == "gridworld") {
    GridWorld::Params p;
    p.width = overrides.value("width", p.width);
    p.height = overrides.value("height", p.height);
    p.slip_num = overrides.value("slip_num", p.slip_num);
    p.slip_den = overrides.value("slip_den", p.slip_den);
    p.goal_row = overrides.value("goal_row", p.height - 1);
    p.goal_col = overrides.value("goal_col", p.width - 1);
    p.horizon = overrides.value("horizon", p.horizon);
    return std::make_unique<GridWorld>(p);
  }
  if (name == "pointmass") {
    PointMass::Params p;
    p.dt = overrides.value("dt", p.dt);
    p.sigma = overrides.value("sigma", p.sigma);
    p.state_bound = overrides.value("state_bound", p.state_bound);
    p.start_box = overrides.value("start_box", p.start_box);
    p.horizon = overrides.value("horizon", p.horizon);
    return std::make_unique<PointMass>(p);
  }
  throw std::invalid_argument("make_env: unknown environment '" + name +
                              "' (expected gridworld or pointmass)");
}

}  // namespace mbil
