#pragma once

#include <cstddef>
#include <vector>

#include "mbil/rng.hpp"
#include "mbil/tape.hpp"
#include "mbil/tensor.hpp"

namespace mbil {

enum class Activation { relu };
enum class OutputActivation { identity, softmax };

struct DenseLayer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

// Feedforward network.  Paper-faithful configurations use two ReLU hidden
// layers; smaller shapes are allowed for tests and heads.
struct Mlp {
  std::vector<DenseLayer> layers;
  Activation hidden_activation = Activation::relu;
  OutputActivation output_activation = OutputActivation::identity;

  // widths = {in, hidden..., out}.  zero_init_output zeroes the last layer
  // (used by coupling subnets so a fresh flow is the identity map).
  static Mlp make(const std::vector<std::size_t>& widths, OutputActivation out, Rng& rng,
                  bool zero_init_output = false);

  Var forward(Tape& tape, Var input);         // input [N x in] or [in]
  Tensor eval(const Tensor& input) const;     // tape-free forward
  std::vector<Tensor*> params();
  std::vector<const Tensor*> params() const;
  std::size_t in_dim() const { return layers.front().weight.shape[0]; }
  std::size_t out_dim() const { return layers.back().weight.shape[1]; }
};

// Glorot-uniform weights, zero biases.
DenseLayer dense_init(std::size_t in, std::size_t out, Rng& rng);

// Numerically stable row-wise softmax helpers (max-shifted; exact gradients).
Var logsumexp_rows(Var logits);
Var log_softmax_rows(Var logits);
Var softmax_rows(Var logits);

}  // namespace mbil
