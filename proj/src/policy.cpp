#include "mbil/policy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mbil {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

PolicyLossKind policy_loss_from_string(const std::string& s) {
  if (s == "nll") return PolicyLossKind::nll;
  if (s == "mse") return PolicyLossKind::mse;
  throw std::invalid_argument("unknown policy loss '" + s + "' (expected nll or mse)");
}

std::string to_string(PolicyLossKind k) { return k == PolicyLossKind::nll ? "nll" : "mse"; }

double Policy::log_prob(const std::vector<double>& state, const Action& action) {
  Tape tape;
  NoGradGuard ng(tape);
  Var s = tape.constant(Tensor::mat(1, state.size(), state));
  ActionBatch batch;
  if (std::holds_alternative<int>(action))
    batch = std::vector<int>{std::get<int>(action)};
  else {
    const auto& a = std::get<std::vector<double>>(action);
    batch = Tensor::mat(1, a.size(), a);
  }
  return log_prob_rows(tape, s, batch).value()[0];
}

void Policy::save(const std::string& path) const {
  save_checkpoint(path, checkpoint_envelope("policy", header(), named_params()));
}

// ---------------------------------------------------------------------------
// CategoricalPolicy

CategoricalPolicy::CategoricalPolicy(std::size_t state_dim, std::size_t n_actions,
                                     std::size_t hidden, Rng& rng)
    : hidden_(hidden) {
  net_ = Mlp::make({state_dim, hidden, hidden, n_actions}, OutputActivation::identity, rng);
}

Var CategoricalPolicy::log_prob_rows(Tape& tape, Var states, const ActionBatch& actions) {
  if (!std::holds_alternative<std::vector<int>>(actions))
    throw std::invalid_argument("CategoricalPolicy: expected discrete action indices");
  const auto& idx = std::get<std::vector<int>>(actions);
  std::size_t n = states.shape().size() == 2 ? states.shape()[0] : 1;
  if (idx.size() != n)
    throw std::invalid_argument("CategoricalPolicy: " + std::to_string(idx.size()) +
                                " actions for " + std::to_string(n) + " states");
  std::size_t a_count = n_actions();
  Tensor onehot = Tensor::zeros({n, a_count});
  for (std::size_t r = 0; r < n; ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= a_count)
      throw std::out_of_range("CategoricalPolicy: action index " + std::to_string(idx[r]) +
                              " out of range [0," + std::to_string(a_count) + ")");
    onehot.values[r * a_count + idx[r]] = 1.0;
  }
  Var logits = net_.forward(tape, states);
  if (logits.shape().size() == 1) logits = reshape(logits, {1, a_count});
  return row_sum(mul(log_softmax_rows(logits), tape.constant(std::move(onehot))));
}

std::vector<double> CategoricalPolicy::probs(const std::vector<double>& state) const {
  Tensor logits = net_.eval(Tensor::vec(state));
  double mx = *std::max_element(logits.values.begin(), logits.values.end());
  double z = 0.0;
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits.values[i] - mx);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

Action CategoricalPolicy::sample(const std::vector<double>& state, Rng& rng) const {
  auto p = probs(state);
  double u = rng.u01();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(p.size() - 1);
}

Action CategoricalPolicy::mode(const std::vector<double>& state) const {
  auto p = probs(state);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

NamedParams CategoricalPolicy::named_params() {
  NamedParams out;
  for (std::size_t i = 0; i < net_.layers.size(); ++i) {
    out.emplace_back("net.l" + std::to_string(i) + ".w", &net_.layers[i].weight);
    out.emplace_back("net.l" + std::to_string(i) + ".b", &net_.layers[i].bias);
  }
  return out;
}

NamedParamsConst CategoricalPolicy::named_params() const {
  NamedParamsConst out;
  for (std::size_t i = 0; i < net_.layers.size(); ++i) {
    out.emplace_back("net.l" + std::to_string(i) + ".w", &net_.layers[i].weight);
    out.emplace_back("net.l" + std::to_string(i) + ".b", &net_.layers[i].bias);
  }
  return out;
}

nlohmann::json CategoricalPolicy::header() const {
  return {{"policy", "categorical"},
          {"state_dim", state_dim()},
          {"hidden", hidden_},
          {"action", {{"kind", "discrete"}, {"n", n_actions()}}}};
}

std::unique_ptr<Policy> CategoricalPolicy::clone() const {
  return std::make_unique<CategoricalPolicy>(*this);
}

// ---------------------------------------------------------------------------
// GaussianPolicy

GaussianPolicy::GaussianPolicy(std::size_t state_dim, std::size_t action_dim, std::size_t hidden,
                               Rng& rng)
    : action_dim_(action_dim), hidden_(hidden) {
  trunk_ = Mlp::make({state_dim, hidden, hidden}, OutputActivation::identity, rng);
  mean_head_ = dense_init(hidden, action_dim, rng);
  log_std_head_ = dense_init(hidden, action_dim, rng);
}

std::pair<Var, Var> GaussianPolicy::mean_logstd_rows(Tape& tape, Var states) {
  // The trunk's second layer is hidden too, so activate its output.
  Var h = relu(trunk_.forward(tape, states));
  if (h.shape().size() == 1) h = reshape(h, {1, h.shape()[0]});
  Var mu = add(matmul(h, tape.leaf(mean_head_.weight)), tape.leaf(mean_head_.bias));
  Var raw = add(matmul(h, tape.leaf(log_std_head_.weight)), tape.leaf(log_std_head_.bias));
  return {mu, clip(raw, kLogStdMin, kLogStdMax)};
}

std::pair<std::vector<double>, std::vector<double>> GaussianPolicy::mean_logstd(
    const std::vector<double>& state) const {
  Tensor h = trunk_.eval(Tensor::vec(state));
  for (auto& v : h.values) v = v > 0.0 ? v : 0.0;
  std::vector<double> mu(action_dim_, 0.0), ls(action_dim_, 0.0);
  for (std::size_t j = 0; j < action_dim_; ++j) {
    double m = mean_head_.bias.values[j];
    double s = log_std_head_.bias.values[j];
    for (std::size_t k = 0; k < h.size(); ++k) {
      m += h.values[k] * mean_head_.weight.values[k * action_dim_ + j];
      s += h.values[k] * log_std_head_.weight.values[k * action_dim_ + j];
    }
    mu[j] = m;
    ls[j] = std::clamp(s, kLogStdMin, kLogStdMax);
  }
  return {mu, ls};
}

Var GaussianPolicy::log_prob_rows(Tape& tape, Var states, const ActionBatch& actions) {
  if (!std::holds_alternative<Tensor>(actions))
    throw std::invalid_argument("GaussianPolicy: expected continuous action rows");
  const Tensor& acts = std::get<Tensor>(actions);
  std::size_t n = states.shape().size() == 2 ? states.shape()[0] : 1;
  if (acts.rank() != 2 || acts.rows() != n || acts.cols() != action_dim_)
    throw std::invalid_argument("GaussianPolicy: action batch shape " + shape_str(acts.shape) +
                                " does not match " + std::to_string(n) + " x " +
                                std::to_string(action_dim_));
  auto [mu, ls] = mean_logstd_rows(tape, states);
  Var a = tape.constant(acts);
  Var zscore = mul(sub(a, mu), exp(neg(ls)));
  Var per_dim = add_scalar(sub(mul_scalar(square(zscore), -0.5), ls), -0.5 * kLog2Pi);
  return row_sum(per_dim);
}

Action GaussianPolicy::sample(const std::vector<double>& state, Rng& rng) const {
  auto [mu, ls] = mean_logstd(state);
  std::vector<double> a(action_dim_);
  for (std::size_t j = 0; j < action_dim_; ++j) a[j] = mu[j] + std::exp(ls[j]) * rng.normal();
  return a;
}

Action GaussianPolicy::mode(const std::vector<double>& state) const {
  return mean_logstd(state).first;
}

std::vector<Tensor*> GaussianPolicy::params() {
  auto out = trunk_.params();
  out.push_back(&mean_head_.weight);
  out.push_back(&mean_head_.bias);
  out.push_back(&log_std_head_.weight);
  out.push_back(&log_std_head_.bias);
  return out;
}

NamedParams GaussianPolicy::named_params() {
  NamedParams out;
  for (std::size_t i = 0; i < trunk_.layers.size(); ++i) {
    out.emplace_back("trunk.l" + std::to_string(i) + ".w", &trunk_.layers[i].weight);
    out.emplace_back("trunk.l" + std::to_string(i) + ".b", &trunk_.layers[i].bias);
  }
  out.emplace_back("mean_head.w", &mean_head_.weight);
  out.emplace_back("mean_head.b", &mean_head_.bias);
  out.emplace_back("log_std_head.w", &log_std_head_.weight);
  out.emplace_back("log_std_head.b", &log_std_head_.bias);
  return out;
}

NamedParamsConst GaussianPolicy::named_params() const {
  NamedParamsConst out;
  for (std::size_t i = 0; i < trunk_.layers.size(); ++i) {
    out.emplace_back("trunk.l" + std::to_string(i) + ".w", &trunk_.layers[i].weight);
    out.emplace_back("trunk.l" + std::to_string(i) + ".b", &trunk_.layers[i].bias);
  }
  out.emplace_back("mean_head.w", &mean_head_.weight);
  out.emplace_back("mean_head.b", &mean_head_.bias);
  out.emplace_back("log_std_head.w", &log_std_head_.weight);
  out.emplace_back("log_std_head.b", &log_std_head_.bias);
  return out;
}

nlohmann::json GaussianPolicy::header() const {
  return {{"policy", "gaussian"},
          {"state_dim", state_dim()},
          {"hidden", hidden_},
          {"action", {{"kind", "box"}, {"dim", action_dim_}}}};
}

std::unique_ptr<Policy> GaussianPolicy::clone() const {
  return std::make_unique<GaussianPolicy>(*this);
}

std::unique_ptr<Policy> Policy::load(const std::string& path) {
  nlohmann::json j = load_checkpoint(path, "policy");
  const auto& h = j.at("header");
  std::string kind = h.at("policy").get<std::string>();
  Rng rng(0);
  std::unique_ptr<Policy> p;
  if (kind == "categorical") {
    p = std::make_unique<CategoricalPolicy>(h.at("state_dim").get<std::size_t>(),
                                            h.at("action").at("n").get<std::size_t>(),
                                            h.at("hidden").get<std::size_t>(), rng);
  } else if (kind == "gaussian") {
    p = std::make_unique<GaussianPolicy>(h.at("state_dim").get<std::size_t>(),
                                         h.at("action").at("dim").get<std::size_t>(),
                                         h.at("hidden").get<std::size_t>(), rng);
  } else {
    throw std::runtime_error("Policy::load: unknown policy kind '" + kind + "'");
  }
  params_from_json(j.at("params"), p->named_params());
  return p;
}

Var bc_loss(Policy& policy, Tape& tape, Var states, const ActionBatch& actions,
            PolicyLossKind kind) {
  std::size_t n = states.shape().size() == 2 ? states.shape()[0] : 1;
  if (n == 0) throw std::invalid_argument("bc_loss: empty batch");
  if (kind == PolicyLossKind::nll)
    return mul_scalar(mean(policy.log_prob_rows(tape, states, actions)), -1.0);

  auto* gauss = dynamic_cast<GaussianPolicy*>(&policy);
  if (gauss == nullptr)
    throw std::invalid_argument(
        "bc_loss: mse is only defined for Gaussian policies (one-hot targets are not supported)");
  const Tensor& acts = std::get<Tensor>(actions);
  auto [mu, ls] = gauss->mean_logstd_rows(tape, states);
  (void)ls;
  return mean(row_sum(square(sub(mu, tape.constant(acts)))));
}

}  // namespace mbil
