#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

#include "mbil/tensor.hpp"

namespace mbil {

class Tape;

// Handle to a node on a tape.  Cheap to copy; valid for the tape's lifetime.
class Var {
 public:
  Var() = default;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const std::vector<std::size_t>& shape() const;
  const std::vector<double>& value() const;
  const std::vector<double>& grad() const;
  std::size_t size() const { return value().size(); }
  double item() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape.  Operations evaluate eagerly and record a reverse-pass
// closure; backward() replays them in reverse creation order.  A tape is
// single-shot: a second backward() call is an error.
class Tape {
 public:
  struct Node {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated only when needs_grad
    bool needs_grad = false;
    Tensor* bound = nullptr;  // leaf binding for gradient write-back
    std::function<void(Tape&)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Binds a leaf; repeated registration of the same tensor returns the same
  // node so gradients accumulate in one place.
  Var leaf(Tensor& t);
  Var leaf(Tensor& t, bool requires_grad);
  Var constant(Tensor t);
  Var constant(double v);
  Var constant_vec(std::vector<double> v);

  // Propagates d(output)/d(leaf) into every bound leaf's grad field.
  void backward(const Var& output);

  bool consumed() const { return consumed_; }
  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  std::size_t node_count() const { return nodes_.size(); }

  // Low-level node access, used by the op implementations.
  std::size_t new_node(std::vector<std::size_t> shape, bool needs_grad);
  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }

 private:
  std::deque<Node> nodes_;
  std::unordered_map<Tensor*, std::size_t> bound_leaves_;
  bool consumed_ = false;
  bool grad_enabled_ = true;
};

// Registers frozen-model evaluations: leaves created inside the scope do not
// require gradients, so backward() skips their subgraphs.
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& t) : tape_(t), prev_(t.grad_enabled()) { tape_.set_grad_enabled(false); }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool prev_;
};

// Primitives.  Elementwise binaries broadcast a scalar, a row vector [d]
// against [N x d], or a column [N x 1] against [N x d].
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var matmul(Var a, Var b);
Var exp(Var v);
Var log(Var v);
Var tanh(Var v);
Var atan(Var v);
Var relu(Var v);
Var sum(Var v);                               // -> scalar
Var row_sum(Var m);                           // [N x d] -> [N]
Var col_sum(Var m);                           // [N x d] -> [d]
Var concat_cols(Var a, Var b);
Var slice_cols(Var v, std::size_t lo, std::size_t hi);
Var reshape(Var v, std::vector<std::size_t> shape);
Var add_scalar(Var v, double c);
Var mul_scalar(Var v, double c);
Var neg(Var v);
Var square(Var v);
Var clip(Var v, double lo, double hi);        // pass-through gradient inside (lo, hi)
Var mean(Var v);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var v) { return neg(v); }

}  // namespace mbil
