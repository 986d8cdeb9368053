#include "mbil/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mbil {

DenseLayer dense_init(std::size_t in, std::size_t out, Rng& rng) {
  DenseLayer l;
  double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> w(in * out);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  l.weight = Tensor::mat(in, out, std::move(w));
  l.bias = Tensor::zeros({out});
  return l;
}

Mlp Mlp::make(const std::vector<std::size_t>& widths, OutputActivation out, Rng& rng,
              bool zero_init_output) {
  if (widths.size() < 2) throw std::invalid_argument("Mlp::make: need at least {in, out} widths");
  Mlp net;
  net.output_activation = out;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    net.layers.push_back(dense_init(widths[i], widths[i + 1], rng));
  if (zero_init_output) {
    auto& last = net.layers.back();
    std::fill(last.weight.values.begin(), last.weight.values.end(), 0.0);
    std::fill(last.bias.values.begin(), last.bias.values.end(), 0.0);
  }
  return net;
}

Var Mlp::forward(Tape& tape, Var input) {
  std::size_t in_cols = input.shape().empty() ? 1 : input.shape().back();
  if (in_cols != in_dim())
    throw std::invalid_argument("Mlp::forward: input width " + std::to_string(in_cols) +
                                " does not match first layer width " + std::to_string(in_dim()));
  Var h = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    // Leaves dedup per tape, so repeated forwards share parameter nodes.
    Var w = tape.leaf(layers[i].weight);
    Var b = tape.leaf(layers[i].bias);
    h = add(matmul(h, w), b);
    if (i + 1 < layers.size()) {
      switch (hidden_activation) {
        case Activation::relu: h = relu(h); break;
      }
    }
  }
  switch (output_activation) {
    case OutputActivation::identity: break;
    case OutputActivation::softmax: h = softmax_rows(h); break;
  }
  return h;
}

Tensor Mlp::eval(const Tensor& input) const {
  std::size_t in_cols = input.shape.empty() ? 1 : input.shape.back();
  if (in_cols != in_dim())
    throw std::invalid_argument("Mlp::eval: input width " + std::to_string(in_cols) +
                                " does not match first layer width " + std::to_string(in_dim()));
  bool is_vec = input.rank() == 1;
  std::size_t rows = is_vec ? 1 : input.rows();
  std::vector<double> h = input.values;
  std::size_t cols = in_cols;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& w = layers[i].weight;
    const auto& b = layers[i].bias;
    std::size_t out_cols = w.shape[1];
    std::vector<double> next(rows * out_cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < cols; ++k) {
        double x = h[r * cols + k];
        const double* wk = w.values.data() + k * out_cols;
        double* nr = next.data() + r * out_cols;
        for (std::size_t c = 0; c < out_cols; ++c) nr[c] += x * wk[c];
      }
      for (std::size_t c = 0; c < out_cols; ++c) next[r * out_cols + c] += b.values[c];
    }
    if (i + 1 < layers.size())
      for (auto& v : next) v = v > 0.0 ? v : 0.0;
    h = std::move(next);
    cols = out_cols;
  }
  if (output_activation == OutputActivation::softmax) {
    for (std::size_t r = 0; r < rows; ++r) {
      double* row = h.data() + r * cols;
      double mx = *std::max_element(row, row + cols);
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        row[c] = std::exp(row[c] - mx);
        s += row[c];
      }
      for (std::size_t c = 0; c < cols; ++c) row[c] /= s;
    }
  }
  if (is_vec) return Tensor::vec(std::move(h));
  return Tensor::mat(rows, cols, std::move(h));
}

std::vector<Tensor*> Mlp::params() {
  std::vector<Tensor*> out;
  for (auto& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

std::vector<const Tensor*> Mlp::params() const {
  std::vector<const Tensor*> out;
  for (const auto& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

Var logsumexp_rows(Var logits) {
  Tape& tape = *logits.tape();
  bool is_vec = logits.shape().size() == 1;
  Var x = is_vec ? reshape(logits, {1, logits.shape()[0]}) : logits;
  std::size_t rows = x.shape()[0], cols = x.shape()[1];
  // Row max enters as a constant shift; logsumexp(x) = m + log sum exp(x - m)
  // has the exact softmax gradient regardless of m.
  std::vector<double> mx(rows, -std::numeric_limits<double>::infinity());
  const auto& v = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) mx[r] = std::max(mx[r], v[r * cols + c]);
  Var m = tape.constant(Tensor::mat(rows, 1, mx));
  Var shifted = sub(x, m);
  Var lse = add(reshape(log(row_sum(exp(shifted))), {rows, 1}), m);  // [rows x 1]
  if (is_vec) return reshape(lse, {});
  return reshape(lse, {rows});
}

Var log_softmax_rows(Var logits) {
  Tape& tape = *logits.tape();
  (void)tape;
  bool is_vec = logits.shape().size() == 1;
  Var x = is_vec ? reshape(logits, {1, logits.shape()[0]}) : logits;
  std::size_t rows = x.shape()[0];
  Var lse = reshape(logsumexp_rows(x), {rows, 1});
  Var out = sub(x, lse);
  if (is_vec) return reshape(out, {out.shape()[1]});
  return out;
}

Var softmax_rows(Var logits) { return exp(log_softmax_rows(logits)); }

}  // namespace mbil
