#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mbil/adam.hpp"
#include "mbil/checkpoint.hpp"
#include "mbil/nn.hpp"
#include "mbil/rng.hpp"
#include "mbil/tape.hpp"
#include "mbil/tensor.hpp"

namespace mbil {

// Double affine coupling with soft-clamped scales.  The first half is passive
// while the second transforms, then the roles flip within the same block;
// consecutive blocks swap which positional half leads.
struct CouplingBlock {
  std::size_t index = 0;
  bool swap_halves = false;
  std::size_t dim = 0;
  std::size_t front = 0;  // positional split: x[:front] | x[front:]
  double s_max = 2.0;
  Mlp subnet_a;  // (passive half, c_i) -> (scale, shift) for the other half
  Mlp subnet_b;  // (new half, c_i)    -> (scale, shift) for the passive half

  // Returns (y, per-row log|det J|).
  std::pair<Var, Var> forward(Tape& tape, Var x, Var c_i);
  // Tape-free exact inverse and forward (used for sampling and round trips).
  Tensor inverse(const Tensor& y, const Tensor& c_i) const;
  std::pair<Tensor, std::vector<double>> forward_values(const Tensor& x, const Tensor& c_i) const;
};

struct FlowArch {
  std::size_t blocks = 4;
  std::size_t hidden = 64;
  double s_max = 2.0;
  std::size_t ctilde_dim = 0;  // 0 -> max(8, c_dim)
};

struct DensityFitConfig {
  long steps = 3000;
  std::size_t batch_size = 128;
  double noise_sigma = 0.01;  // fresh Gaussian noise on x and c each step
  AdamConfig optimizer;
  std::uint64_t seed = 0;
  long log_every = 100;
};

struct FitReport {
  long steps = 0;
  double final_nll = 0.0;
  std::vector<std::pair<long, double>> nll_history;
};

// Conditional normalizing flow: conditioning encoder -> per-block adapters ->
// coupling blocks over a standard normal base.
struct FlowModel {
  std::size_t x_dim = 0;
  std::size_t c_dim = 0;
  std::size_t ctilde_dim = 0;
  std::size_t hidden = 64;
  double s_max = 2.0;
  double noise_sigma = 0.0;  // recorded by the last fit
  Mlp encoder;
  std::vector<Mlp> adapters;
  std::vector<CouplingBlock> blocks;

  static FlowModel make(std::size_t x_dim, std::size_t c_dim, FlowArch arch, Rng& rng);

  // Exact conditional log-likelihood, one value per row; differentiable
  // w.r.t. model parameters and w.r.t. x when x requires gradients.
  Var log_prob_rows(Tape& tape, Var x, Var c);
  double log_prob(const std::vector<double>& x, const std::vector<double>& c);
  std::vector<double> log_prob_batch(const Tensor& x, const Tensor& c);

  // z = g(x, c) and total log|det| without a tape.
  std::pair<Tensor, std::vector<double>> transform(const Tensor& x, const Tensor& c) const;
  Tensor inverse_transform(const Tensor& z, const Tensor& c) const;

  // n draws of x given one conditioning vector; deterministic per rng state.
  Tensor sample(const std::vector<double>& c, std::size_t n, Rng& rng) const;

  std::vector<Tensor*> params();
  NamedParamsConst named_params() const;
  NamedParams named_params();

  void save(const std::string& path) const;
  static FlowModel load(const std::string& path);
};

// Maximum-likelihood training with Gaussian-noise regularization on inputs
// and conditions.  Aborts with step/batch diagnostics if the loss goes
// non-finite.
FitReport fit_density(FlowModel& model, const Tensor& x, const Tensor& c,
                      const DensityFitConfig& config);

}  // namespace mbil
