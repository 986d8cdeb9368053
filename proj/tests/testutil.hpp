#pragma once

// Shared test oracles: central finite differences against tape gradients,
// plus small numeric helpers.  Everything here is independent of the
// reverse-pass implementation it checks.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mbil/rng.hpp"
#include "mbil/tensor.hpp"

namespace mbil::testutil {

inline double rel_err(double got, double want) {
  double denom = std::max({std::fabs(got), std::fabs(want), 1e-10});
  return std::fabs(got - want) / denom;
}

// d f / d x_i by central differences on a plain double->double functional.
inline double central_diff(const std::function<double(const std::vector<double>&)>& f,
                           std::vector<double> x, std::size_t i, double h = 1e-5) {
  double orig = x[i];
  x[i] = orig + h;
  double fp = f(x);
  x[i] = orig - h;
  double fm = f(x);
  x[i] = orig;
  return (fp - fm) / (2.0 * h);
}

// Max relative error between an analytic gradient and central differences
// over every coordinate of x.
inline double max_grad_err(const std::function<double(const std::vector<double>&)>& f,
                           const std::vector<double>& x, const std::vector<double>& analytic,
                           double h = 1e-5) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double fd = central_diff(f, x, i, h);
    worst = std::max(worst, rel_err(analytic[i], fd));
  }
  return worst;
}

inline std::vector<double> random_vec(mbil::Rng& rng, std::size_t n, double lo = -1.0,
                                      double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// log|det J| of a map R^d -> R^d by finite differences + LU decomposition.
inline double numeric_logabsdet(const std::function<std::vector<double>(const std::vector<double>&)>& f,
                                const std::vector<double>& x, double h = 1e-5) {
  std::size_t d = x.size();
  std::vector<double> J(d * d);
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    auto fp = f(xp), fm = f(xm);
    for (std::size_t i = 0; i < d; ++i) J[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
  }
  // LU with partial pivoting; returns log|det|.
  double logdet = 0.0;
  std::vector<double> a = J;
  for (std::size_t k = 0; k < d; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < d; ++i)
      if (std::fabs(a[i * d + k]) > std::fabs(a[piv * d + k])) piv = i;
    if (piv != k)
      for (std::size_t c = 0; c < d; ++c) std::swap(a[k * d + c], a[piv * d + c]);
    double p = a[k * d + k];
    logdet += std::log(std::fabs(p));
    for (std::size_t i = k + 1; i < d; ++i) {
      double m = a[i * d + k] / p;
      for (std::size_t c = k; c < d; ++c) a[i * d + c] -= m * a[k * d + c];
    }
  }
  return logdet;
}

}  // namespace mbil::testutil
