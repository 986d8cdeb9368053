#include "mbil/flow.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mbil {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Soft clamp s_max * (2/pi) * atan(s / s_max): keeps every scale exponent in
// (-s_max, s_max) so each block stays bi-Lipschitz.
Var soft_clamp(Var raw, double s_max) {
  return mul_scalar(atan(mul_scalar(raw, 1.0 / s_max)), s_max * 2.0 / M_PI);
}

double soft_clamp_value(double raw, double s_max) {
  return s_max * (2.0 / M_PI) * std::atan(raw / s_max);
}

Tensor concat_rows_matrix(const Tensor& a, const Tensor& b) {
  std::size_t rows = a.rows(), ca = a.cols(), cb = b.cols();
  Tensor out = Tensor::zeros({rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < ca; ++c) out.values[r * (ca + cb) + c] = a.values[r * ca + c];
    for (std::size_t c = 0; c < cb; ++c) out.values[r * (ca + cb) + ca + c] = b.values[r * cb + c];
  }
  return out;
}

Tensor slice_matrix(const Tensor& m, std::size_t lo, std::size_t hi) {
  std::size_t rows = m.rows(), cols = m.cols(), w = hi - lo;
  Tensor out = Tensor::zeros({rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out.values[r * w + c] = m.values[r * cols + lo + c];
  return out;
}

}  // namespace

std::pair<Var, Var> CouplingBlock::forward(Tape& tape, Var x, Var c_i) {
  if (x.shape().size() != 2 || x.shape()[1] != dim)
    throw std::invalid_argument("CouplingBlock::forward: expected [N x " + std::to_string(dim) +
                                "], got " + shape_str(x.shape()));
  if (dim == 1) {
    // Degenerate coupling: conditioner-only affine map of the single coordinate.
    Var out = subnet_a.forward(tape, c_i);
    Var s = soft_clamp(slice_cols(out, 0, 1), s_max);
    Var t = slice_cols(out, 1, 2);
    Var y = add(mul(x, exp(s)), t);
    return {y, row_sum(s)};
  }
  Var front_part = slice_cols(x, 0, front);
  Var back_part = slice_cols(x, front, dim);
  Var u1 = swap_halves ? back_part : front_part;
  Var u2 = swap_halves ? front_part : back_part;
  std::size_t d1 = u1.shape()[1], d2 = u2.shape()[1];

  Var a_out = subnet_a.forward(tape, concat_cols(u1, c_i));
  Var s2 = soft_clamp(slice_cols(a_out, 0, d2), s_max);
  Var t2 = slice_cols(a_out, d2, 2 * d2);
  Var v2 = add(mul(u2, exp(s2)), t2);

  Var b_out = subnet_b.forward(tape, concat_cols(v2, c_i));
  Var s1 = soft_clamp(slice_cols(b_out, 0, d1), s_max);
  Var t1 = slice_cols(b_out, d1, 2 * d1);
  Var v1 = add(mul(u1, exp(s1)), t1);

  Var y = swap_halves ? concat_cols(v2, v1) : concat_cols(v1, v2);
  Var logdet = add(row_sum(s1), row_sum(s2));
  return {y, logdet};
}

std::pair<Tensor, std::vector<double>> CouplingBlock::forward_values(const Tensor& x,
                                                                     const Tensor& c_i) const {
  std::size_t rows = x.rows();
  std::vector<double> logdet(rows, 0.0);
  if (dim == 1) {
    Tensor out = subnet_a.eval(c_i);
    Tensor y = Tensor::zeros({rows, 1});
    for (std::size_t r = 0; r < rows; ++r) {
      double s = soft_clamp_value(out.values[r * 2 + 0], s_max);
      double t = out.values[r * 2 + 1];
      y.values[r] = x.values[r] * std::exp(s) + t;
      logdet[r] = s;
    }
    return {y, logdet};
  }
  Tensor front_part = slice_matrix(x, 0, front);
  Tensor back_part = slice_matrix(x, front, dim);
  const Tensor& u1 = swap_halves ? back_part : front_part;
  const Tensor& u2 = swap_halves ? front_part : back_part;
  std::size_t d1 = u1.cols(), d2 = u2.cols();

  Tensor a_out = subnet_a.eval(concat_rows_matrix(u1, c_i));
  Tensor v2 = Tensor::zeros({rows, d2});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d2; ++c) {
      double s = soft_clamp_value(a_out.values[r * 2 * d2 + c], s_max);
      double t = a_out.values[r * 2 * d2 + d2 + c];
      v2.values[r * d2 + c] = u2.values[r * d2 + c] * std::exp(s) + t;
      logdet[r] += s;
    }
  Tensor b_out = subnet_b.eval(concat_rows_matrix(v2, c_i));
  Tensor v1 = Tensor::zeros({rows, d1});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d1; ++c) {
      double s = soft_clamp_value(b_out.values[r * 2 * d1 + c], s_max);
      double t = b_out.values[r * 2 * d1 + d1 + c];
      v1.values[r * d1 + c] = u1.values[r * d1 + c] * std::exp(s) + t;
      logdet[r] += s;
    }
  Tensor y = swap_halves ? concat_rows_matrix(v2, v1) : concat_rows_matrix(v1, v2);
  return {y, logdet};
}

Tensor CouplingBlock::inverse(const Tensor& y, const Tensor& c_i) const {
  std::size_t rows = y.rows();
  if (dim == 1) {
    Tensor out = subnet_a.eval(c_i);
    Tensor x = Tensor::zeros({rows, 1});
    for (std::size_t r = 0; r < rows; ++r) {
      double s = soft_clamp_value(out.values[r * 2 + 0], s_max);
      double t = out.values[r * 2 + 1];
      x.values[r] = (y.values[r] - t) * std::exp(-s);
    }
    return x;
  }
  Tensor front_part = slice_matrix(y, 0, front);
  Tensor back_part = slice_matrix(y, front, dim);
  const Tensor& v1 = swap_halves ? back_part : front_part;
  const Tensor& v2 = swap_halves ? front_part : back_part;
  std::size_t d1 = v1.cols(), d2 = v2.cols();

  Tensor b_out = subnet_b.eval(concat_rows_matrix(v2, c_i));
  Tensor u1 = Tensor::zeros({rows, d1});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d1; ++c) {
      double s = soft_clamp_value(b_out.values[r * 2 * d1 + c], s_max);
      double t = b_out.values[r * 2 * d1 + d1 + c];
      u1.values[r * d1 + c] = (v1.values[r * d1 + c] - t) * std::exp(-s);
    }
  Tensor a_out = subnet_a.eval(concat_rows_matrix(u1, c_i));
  Tensor u2 = Tensor::zeros({rows, d2});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d2; ++c) {
      double s = soft_clamp_value(a_out.values[r * 2 * d2 + c], s_max);
      double t = a_out.values[r * 2 * d2 + d2 + c];
      u2.values[r * d2 + c] = (v2.values[r * d2 + c] - t) * std::exp(-s);
    }
  return swap_halves ? concat_rows_matrix(u2, u1) : concat_rows_matrix(u1, u2);
}

FlowModel FlowModel::make(std::size_t x_dim, std::size_t c_dim, FlowArch arch, Rng& rng) {
  if (x_dim == 0 || c_dim == 0)
    throw std::invalid_argument("FlowModel::make: x_dim and c_dim must be positive");
  FlowModel m;
  m.x_dim = x_dim;
  m.c_dim = c_dim;
  m.ctilde_dim = arch.ctilde_dim ? arch.ctilde_dim : std::max<std::size_t>(8, c_dim);
  m.hidden = arch.hidden;
  m.s_max = arch.s_max;
  std::size_t h = arch.hidden;
  m.encoder = Mlp::make({c_dim, h, h, m.ctilde_dim}, OutputActivation::identity, rng);
  std::size_t front = (x_dim + 1) / 2;
  for (std::size_t i = 0; i < arch.blocks; ++i) {
    m.adapters.push_back(Mlp::make({m.ctilde_dim, h, h, m.ctilde_dim}, OutputActivation::identity, rng));
    CouplingBlock b;
    b.index = i;
    b.swap_halves = (i % 2 == 1);
    b.dim = x_dim;
    b.front = front;
    b.s_max = arch.s_max;
    if (x_dim == 1) {
      b.subnet_a = Mlp::make({m.ctilde_dim, h, h, 2}, OutputActivation::identity, rng, true);
    } else {
      std::size_t d1 = b.swap_halves ? x_dim - front : front;
      std::size_t d2 = x_dim - d1;
      b.subnet_a = Mlp::make({d1 + m.ctilde_dim, h, h, 2 * d2}, OutputActivation::identity, rng, true);
      b.subnet_b = Mlp::make({d2 + m.ctilde_dim, h, h, 2 * d1}, OutputActivation::identity, rng, true);
    }
    m.blocks.push_back(std::move(b));
  }
  return m;
}

Var FlowModel::log_prob_rows(Tape& tape, Var x, Var c) {
  bool x_vec = x.shape().size() == 1;
  if (x_vec) x = reshape(x, {1, x.shape()[0]});
  if (c.shape().size() == 1) c = reshape(c, {1, c.shape()[0]});
  if (x.shape()[1] != x_dim || c.shape()[1] != c_dim || x.shape()[0] != c.shape()[0])
    throw std::invalid_argument("FlowModel::log_prob: shapes " + shape_str(x.shape()) + " / " +
                                shape_str(c.shape()) + " do not match model dims (" +
                                std::to_string(x_dim) + ", " + std::to_string(c_dim) + ")");
  for (double v : x.value())
    if (!std::isfinite(v)) throw std::invalid_argument("FlowModel::log_prob: non-finite x");
  for (double v : c.value())
    if (!std::isfinite(v)) throw std::invalid_argument("FlowModel::log_prob: non-finite c");

  Var ctilde = encoder.forward(tape, c);
  Var z = x;
  Var logdet;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    Var c_i = adapters[i].forward(tape, ctilde);
    auto [zi, ld] = blocks[i].forward(tape, z, c_i);
    z = zi;
    logdet = i == 0 ? ld : add(logdet, ld);
  }
  Var quad = mul_scalar(row_sum(square(z)), -0.5);
  Var base = add_scalar(quad, -0.5 * kLog2Pi * static_cast<double>(x_dim));
  Var lp = blocks.empty() ? base : add(base, logdet);
  return lp;
}

double FlowModel::log_prob(const std::vector<double>& x, const std::vector<double>& c) {
  Tape tape;
  NoGradGuard ng(tape);
  Var lp = log_prob_rows(tape, tape.constant(Tensor::mat(1, x_dim, x)),
                         tape.constant(Tensor::mat(1, c_dim, c)));
  return lp.value()[0];
}

std::vector<double> FlowModel::log_prob_batch(const Tensor& x, const Tensor& c) {
  Tape tape;
  NoGradGuard ng(tape);
  Var lp = log_prob_rows(tape, tape.constant(x), tape.constant(c));
  return lp.value();
}

std::pair<Tensor, std::vector<double>> FlowModel::transform(const Tensor& x,
                                                            const Tensor& c) const {
  Tensor ctilde = encoder.eval(c);
  Tensor z = x;
  std::vector<double> logdet(x.rows(), 0.0);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    Tensor c_i = adapters[i].eval(ctilde);
    auto [zi, ld] = blocks[i].forward_values(z, c_i);
    z = std::move(zi);
    for (std::size_t r = 0; r < logdet.size(); ++r) logdet[r] += ld[r];
  }
  return {z, logdet};
}

Tensor FlowModel::inverse_transform(const Tensor& z, const Tensor& c) const {
  Tensor ctilde = encoder.eval(c);
  Tensor x = z;
  for (std::size_t i = blocks.size(); i-- > 0;) {
    Tensor c_i = adapters[i].eval(ctilde);
    x = blocks[i].inverse(x, c_i);
  }
  return x;
}

Tensor FlowModel::sample(const std::vector<double>& c, std::size_t n, Rng& rng) const {
  if (n == 0) throw std::invalid_argument("FlowModel::sample: n must be >= 1");
  Tensor z = Tensor::mat(n, x_dim, rng.normal_vec(n * x_dim));
  Tensor cm = Tensor::zeros({n, c_dim});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c_dim; ++j) cm.values[r * c_dim + j] = c[j];
  return inverse_transform(z, cm);
}

std::vector<Tensor*> FlowModel::params() {
  std::vector<Tensor*> out;
  auto push = [&](Mlp& m) {
    for (auto* p : m.params()) out.push_back(p);
  };
  push(encoder);
  for (auto& a : adapters) push(a);
  for (auto& b : blocks) {
    push(b.subnet_a);
    if (!b.subnet_b.layers.empty()) push(b.subnet_b);
  }
  return out;
}

namespace {

template <class TensorPtr, class MlpT>
void collect_mlp(std::vector<std::pair<std::string, TensorPtr>>& out, const std::string& prefix,
                 MlpT& m) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    out.emplace_back(prefix + ".l" + std::to_string(i) + ".w", &m.layers[i].weight);
    out.emplace_back(prefix + ".l" + std::to_string(i) + ".b", &m.layers[i].bias);
  }
}

template <class TensorPtr, class FlowT>
std::vector<std::pair<std::string, TensorPtr>> flow_named(FlowT& f) {
  std::vector<std::pair<std::string, TensorPtr>> out;
  collect_mlp<TensorPtr>(out, "encoder", f.encoder);
  for (std::size_t i = 0; i < f.adapters.size(); ++i)
    collect_mlp<TensorPtr>(out, "adapter" + std::to_string(i), f.adapters[i]);
  for (std::size_t i = 0; i < f.blocks.size(); ++i) {
    collect_mlp<TensorPtr>(out, "block" + std::to_string(i) + ".a", f.blocks[i].subnet_a);
    if (!f.blocks[i].subnet_b.layers.empty())
      collect_mlp<TensorPtr>(out, "block" + std::to_string(i) + ".b", f.blocks[i].subnet_b);
  }
  return out;
}

}  // namespace

NamedParamsConst FlowModel::named_params() const { return flow_named<const Tensor*>(*this); }
NamedParams FlowModel::named_params() { return flow_named<Tensor*>(*this); }

void FlowModel::save(const std::string& path) const {
  nlohmann::json header{{"x_dim", x_dim},       {"c_dim", c_dim},
                        {"ctilde_dim", ctilde_dim}, {"blocks", blocks.size()},
                        {"hidden", hidden},     {"s_max", s_max},
                        {"split", "alternating-front-back"}, {"noise_sigma", noise_sigma}};
  save_checkpoint(path, checkpoint_envelope("flow", header, named_params()));
}

FlowModel FlowModel::load(const std::string& path) {
  nlohmann::json j = load_checkpoint(path, "flow");
  const auto& h = j.at("header");
  FlowArch arch;
  arch.blocks = h.at("blocks").get<std::size_t>();
  arch.hidden = h.at("hidden").get<std::size_t>();
  arch.s_max = h.at("s_max").get<double>();
  arch.ctilde_dim = h.at("ctilde_dim").get<std::size_t>();
  Rng rng(0);
  FlowModel m = make(h.at("x_dim").get<std::size_t>(), h.at("c_dim").get<std::size_t>(), arch, rng);
  m.noise_sigma = h.value("noise_sigma", 0.0);
  params_from_json(j.at("params"), m.named_params());
  return m;
}

FitReport fit_density(FlowModel& model, const Tensor& x, const Tensor& c,
                      const DensityFitConfig& config) {
  if (x.rank() != 2 || c.rank() != 2 || x.rows() != c.rows())
    throw std::invalid_argument("fit_density: x and c must be matrices with equal row counts");
  if (x.cols() != model.x_dim || c.cols() != model.c_dim)
    throw std::invalid_argument("fit_density: data dims " + shape_str(x.shape) + "/" +
                                shape_str(c.shape) + " do not match the model");
  if (x.rows() < 1) throw std::invalid_argument("fit_density: need at least one sample");
  if (config.batch_size < 1) throw std::invalid_argument("fit_density: batch_size must be >= 1");
  if (config.noise_sigma < 0) throw std::invalid_argument("fit_density: noise_sigma must be >= 0");

  std::size_t m = x.rows(), xd = model.x_dim, cd = model.c_dim;
  std::size_t bs = config.batch_size;
  Rng rng(config.seed, 17);
  AdamOptimizer opt(model.params(), config.optimizer);
  FitReport report;
  std::vector<std::size_t> idx(bs);

  for (long step = 0; step < config.steps; ++step) {
    Tensor xb = Tensor::zeros({bs, xd});
    Tensor cb = Tensor::zeros({bs, cd});
    for (std::size_t b = 0; b < bs; ++b) {
      idx[b] = rng.uniform_index(m);
      for (std::size_t j = 0; j < xd; ++j)
        xb.values[b * xd + j] = x.values[idx[b] * xd + j] + config.noise_sigma * rng.normal();
      for (std::size_t j = 0; j < cd; ++j)
        cb.values[b * cd + j] = c.values[idx[b] * cd + j] + config.noise_sigma * rng.normal();
    }
    Tape tape;
    Var lp = model.log_prob_rows(tape, tape.constant(std::move(xb)), tape.constant(std::move(cb)));
    Var loss = mul_scalar(mean(lp), -1.0);
    double nll = loss.item();
    if (!std::isfinite(nll)) {
      std::ostringstream os;
      os << "fit_density: non-finite loss at step " << step << "; batch indices [";
      for (std::size_t b = 0; b < bs; ++b) os << (b ? "," : "") << idx[b];
      os << "]";
      throw std::runtime_error(os.str());
    }
    tape.backward(loss);
    opt.step();
    if (step % config.log_every == 0 || step + 1 == config.steps)
      report.nll_history.emplace_back(step, nll);
  }
  report.steps = config.steps;

  // Final train NLL over the full dataset, no noise.
  double total = 0.0;
  std::size_t chunk = 1024;
  for (std::size_t lo = 0; lo < m; lo += chunk) {
    std::size_t hi = std::min(m, lo + chunk);
    Tensor xs = Tensor::zeros({hi - lo, xd}), cs = Tensor::zeros({hi - lo, cd});
    std::copy(x.values.begin() + lo * xd, x.values.begin() + hi * xd, xs.values.begin());
    std::copy(c.values.begin() + lo * cd, c.values.begin() + hi * cd, cs.values.begin());
    for (double v : model.log_prob_batch(xs, cs)) total -= v;
  }
  report.final_nll = total / static_cast<double>(m);
  model.noise_sigma = config.noise_sigma;
  return report;
}

}  // namespace mbil
