#include "mbil/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mbil {

namespace {

void check_same_tape(const char* op, Var a, Var b) {
  if (a.tape() == nullptr || b.tape() == nullptr)
    throw std::logic_error(std::string(op) + ": unbound Var");
  if (a.tape() != b.tape())
    throw std::logic_error(std::string(op) + ": operands live on different tapes");
}

[[noreturn]] void shape_error(const char* op, const std::vector<std::size_t>& a,
                              const std::vector<std::size_t>& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                              shape_str(b));
}

// Index map for broadcast binaries: operand index = (k / div) % mod.
struct BcastMap {
  std::size_t div = 1;
  std::size_t mod = 1;
  std::size_t operator()(std::size_t k) const { return (k / div) % mod; }
};

bool resolve_bcast(const std::vector<std::size_t>& out, const std::vector<std::size_t>& in,
                   BcastMap& map) {
  std::size_t n = shape_numel(out);
  if (in == out) {
    map = {1, n};
    return true;
  }
  if (shape_numel(in) == 1) {
    map = {1, 1};  // scalar
    return true;
  }
  if (out.size() == 2) {
    std::size_t rows = out[0], cols = out[1];
    // row vector [d] or [1 x d] against [N x d]
    if ((in.size() == 1 && in[0] == cols) || (in.size() == 2 && in[0] == 1 && in[1] == cols)) {
      map = {1, cols};
      return true;
    }
    // column [N x 1] or [N] only as explicit [N x 1] to avoid ambiguity
    if (in.size() == 2 && in[0] == rows && in[1] == 1) {
      map = {cols, rows};
      return true;
    }
  }
  return false;
}

// Picks the output shape for a broadcast binary; the broadcast side may be
// either operand.
bool binary_out_shape(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b,
                      std::vector<std::size_t>& out) {
  BcastMap m;
  if (a == b) {
    out = a;
    return true;
  }
  if (resolve_bcast(a, b, m) && shape_numel(a) >= shape_numel(b)) {
    out = a;
    return true;
  }
  if (resolve_bcast(b, a, m) && shape_numel(b) >= shape_numel(a)) {
    out = b;
    return true;
  }
  return false;
}

}  // namespace

const std::vector<std::size_t>& Var::shape() const { return tape_->node(id_).shape; }
const std::vector<double>& Var::value() const { return tape_->node(id_).value; }

const std::vector<double>& Var::grad() const {
  const auto& n = tape_->node(id_);
  if (!n.needs_grad)
    throw std::logic_error("Var::grad: node does not require gradients");
  return n.grad;
}

double Var::item() const {
  const auto& v = value();
  if (v.size() != 1) throw std::logic_error("Var::item: non-scalar value");
  return v[0];
}

std::size_t Tape::new_node(std::vector<std::size_t> shape, bool needs_grad) {
  Node n;
  n.shape = std::move(shape);
  n.value.assign(shape_numel(n.shape), 0.0);
  n.needs_grad = needs_grad;
  if (needs_grad) n.grad.assign(n.value.size(), 0.0);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

Var Tape::leaf(Tensor& t) { return leaf(t, grad_enabled_); }

Var Tape::leaf(Tensor& t, bool requires_grad) {
  auto it = bound_leaves_.find(&t);
  if (it != bound_leaves_.end()) {
    if (nodes_[it->second].needs_grad != requires_grad)
      throw std::logic_error("Tape::leaf: tensor re-registered with a different grad mode");
    return Var(this, it->second);
  }
  std::size_t id = new_node(t.shape, requires_grad);
  nodes_[id].value = t.values;
  nodes_[id].bound = &t;
  bound_leaves_.emplace(&t, id);
  return Var(this, id);
}

Var Tape::constant(Tensor t) {
  std::size_t id = new_node(t.shape, false);
  nodes_[id].value = std::move(t.values);
  return Var(this, id);
}

Var Tape::constant(double v) { return constant(Tensor::scalar(v)); }

Var Tape::constant_vec(std::vector<double> v) { return constant(Tensor::vec(std::move(v))); }

void Tape::backward(const Var& output) {
  if (output.tape() != this)
    throw std::logic_error("Tape::backward: output does not belong to this tape");
  if (consumed_)
    throw std::logic_error("Tape::backward: tape already consumed; build a fresh tape per pass");
  if (nodes_.empty()) throw std::logic_error("Tape::backward: no forward pass recorded");
  Node& out = nodes_[output.id()];
  if (out.value.size() != 1)
    throw std::invalid_argument("Tape::backward: output must be scalar, got shape " +
                                shape_str(out.shape));
  consumed_ = true;
  if (!out.needs_grad) {
    // Output independent of every grad leaf: all gradients are zero.
    for (auto& [tensor, id] : bound_leaves_)
      if (nodes_[id].needs_grad) tensor->grad.assign(tensor->values.size(), 0.0);
    return;
  }
  out.grad[0] = 1.0;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.needs_grad && n.backward) n.backward(*this);
  }
  for (auto& [tensor, id] : bound_leaves_) {
    Node& n = nodes_[id];
    if (n.needs_grad) tensor->grad = n.grad;
  }
}

namespace {

// Shared glue for unary elementwise ops.
template <class Fwd, class Dfn>
Var unary_op(const char* name, Var v, Fwd f, Dfn df) {
  (void)name;
  Tape& tp = *v.tape();
  const auto& nv = tp.node(v.id());
  std::size_t id = tp.new_node(nv.shape, nv.needs_grad);
  auto& out = tp.node(id);
  const auto& x = tp.node(v.id()).value;
  for (std::size_t k = 0; k < x.size(); ++k) out.value[k] = f(x[k]);
  if (out.needs_grad) {
    std::size_t vid = v.id();
    out.backward = [vid, id, df](Tape& t) {
      auto& src = t.node(vid);
      const auto& o = t.node(id);
      for (std::size_t k = 0; k < src.value.size(); ++k)
        src.grad[k] += df(src.value[k], o.value[k]) * o.grad[k];
    };
  }
  return Var(&tp, id);
}

template <class Fwd, class Da, class Db>
Var binary_op(const char* name, Var a, Var b, Fwd f, Da dfa, Db dfb) {
  check_same_tape(name, a, b);
  Tape& tp = *a.tape();
  const auto &na = tp.node(a.id()), &nb = tp.node(b.id());
  std::vector<std::size_t> out_shape;
  if (!binary_out_shape(na.shape, nb.shape, out_shape)) shape_error(name, na.shape, nb.shape);
  BcastMap ma, mb;
  resolve_bcast(out_shape, na.shape, ma);
  resolve_bcast(out_shape, nb.shape, mb);
  bool ng = na.needs_grad || nb.needs_grad;
  std::size_t id = tp.new_node(out_shape, ng);
  auto& out = tp.node(id);
  {
    const auto &va = na.value, &vb = nb.value;
    for (std::size_t k = 0; k < out.value.size(); ++k) out.value[k] = f(va[ma(k)], vb[mb(k)]);
  }
  if (ng) {
    std::size_t ida = a.id(), idb = b.id();
    out.backward = [ida, idb, id, ma, mb, dfa, dfb](Tape& t) {
      auto &sa = t.node(ida), &sb = t.node(idb);
      const auto& o = t.node(id);
      for (std::size_t k = 0; k < o.value.size(); ++k) {
        double g = o.grad[k];
        std::size_t ia = ma(k), ib = mb(k);
        if (sa.needs_grad) sa.grad[ia] += dfa(sa.value[ia], sb.value[ib]) * g;
        if (sb.needs_grad) sb.grad[ib] += dfb(sa.value[ia], sb.value[ib]) * g;
      }
    };
  }
  return Var(&tp, id);
}

}  // namespace

Var add(Var a, Var b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var matmul(Var a, Var b) {
  check_same_tape("matmul", a, b);
  Tape& tp = *a.tape();
  const auto &na = tp.node(a.id()), &nb = tp.node(b.id());
  // Promote vectors: [k]·[k x m] -> [m], [n x k]·[k] -> [n].
  std::size_t n, k, k2, m;
  bool a_vec = na.shape.size() == 1, b_vec = nb.shape.size() == 1;
  if (a_vec) {
    n = 1;
    k = na.shape[0];
  } else if (na.shape.size() == 2) {
    n = na.shape[0];
    k = na.shape[1];
  } else {
    shape_error("matmul", na.shape, nb.shape);
  }
  if (b_vec) {
    k2 = nb.shape[0];
    m = 1;
  } else if (nb.shape.size() == 2) {
    k2 = nb.shape[0];
    m = nb.shape[1];
  } else {
    shape_error("matmul", na.shape, nb.shape);
  }
  if (k != k2) shape_error("matmul", na.shape, nb.shape);

  std::vector<std::size_t> out_shape;
  if (a_vec && b_vec)
    out_shape = {};
  else if (a_vec)
    out_shape = {m};
  else if (b_vec)
    out_shape = {n};
  else
    out_shape = {n, m};

  bool ng = na.needs_grad || nb.needs_grad;
  std::size_t id = tp.new_node(out_shape, ng);
  auto& out = tp.node(id);
  {
    const double* A = na.value.data();
    const double* B = nb.value.data();
    double* C = out.value.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t kk = 0; kk < k; ++kk) {
        double aik = A[i * k + kk];
        const double* Bk = B + kk * m;
        double* Ci = C + i * m;
        for (std::size_t j = 0; j < m; ++j) Ci[j] += aik * Bk[j];
      }
  }
  if (ng) {
    std::size_t ida = a.id(), idb = b.id();
    out.backward = [ida, idb, id, n, k, m](Tape& t) {
      auto &sa = t.node(ida), &sb = t.node(idb);
      const auto& o = t.node(id);
      const double* G = o.grad.data();
      if (sa.needs_grad) {
        // dA = G · B^T
        const double* B = sb.value.data();
        double* dA = sa.grad.data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double* Gi = G + i * m;
            const double* Bk = B + kk * m;
            double acc = 0.0;
            for (std::size_t j = 0; j < m; ++j) acc += Gi[j] * Bk[j];
            dA[i * k + kk] += acc;
          }
      }
      if (sb.needs_grad) {
        // dB = A^T · G
        const double* A = sa.value.data();
        double* dB = sb.grad.data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            double aik = A[i * k + kk];
            const double* Gi = G + i * m;
            double* dBk = dB + kk * m;
            for (std::size_t j = 0; j < m; ++j) dBk[j] += aik * Gi[j];
          }
      }
    };
  }
  return Var(&tp, id);
}

Var exp(Var v) {
  return unary_op(
      "exp", v, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var v) {
  return unary_op(
      "log", v, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(Var v) {
  return unary_op(
      "tanh", v, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var atan(Var v) {
  return unary_op(
      "atan", v, [](double x) { return std::atan(x); },
      [](double x, double) { return 1.0 / (1.0 + x * x); });
}

Var relu(Var v) {
  return unary_op(
      "relu", v, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var add_scalar(Var v, double c) {
  return unary_op(
      "add_scalar", v, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var mul_scalar(Var v, double c) {
  return unary_op(
      "mul_scalar", v, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Var neg(Var v) { return mul_scalar(v, -1.0); }

Var square(Var v) {
  return unary_op(
      "square", v, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clip(Var v, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("clip: lo must be < hi");
  return unary_op(
      "clip", v, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var sum(Var v) {
  Tape& tp = *v.tape();
  const auto& nv = tp.node(v.id());
  std::size_t id = tp.new_node({}, nv.needs_grad);
  auto& out = tp.node(id);
  double acc = 0.0;
  for (double x : nv.value) acc += x;
  out.value[0] = acc;
  if (out.needs_grad) {
    std::size_t vid = v.id();
    out.backward = [vid, id](Tape& t) {
      auto& src = t.node(vid);
      double g = t.node(id).grad[0];
      for (auto& gv : src.grad) gv += g;
    };
  }
  return Var(&tp, id);
}

Var row_sum(Var m) {
  Tape& tp = *m.tape();
  const auto& nm = tp.node(m.id());
  if (nm.shape.size() != 2)
    throw std::invalid_argument("row_sum: expected a matrix, got " + shape_str(nm.shape));
  std::size_t rows = nm.shape[0], cols = nm.shape[1];
  std::size_t id = tp.new_node({rows}, nm.needs_grad);
  auto& out = tp.node(id);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += nm.value[r * cols + c];
    out.value[r] = acc;
  }
  if (out.needs_grad) {
    std::size_t vid = m.id();
    out.backward = [vid, id, rows, cols](Tape& t) {
      auto& src = t.node(vid);
      const auto& g = t.node(id).grad;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) src.grad[r * cols + c] += g[r];
    };
  }
  return Var(&tp, id);
}

Var col_sum(Var m) {
  Tape& tp = *m.tape();
  const auto& nm = tp.node(m.id());
  if (nm.shape.size() != 2)
    throw std::invalid_argument("col_sum: expected a matrix, got " + shape_str(nm.shape));
  std::size_t rows = nm.shape[0], cols = nm.shape[1];
  std::size_t id = tp.new_node({cols}, nm.needs_grad);
  auto& out = tp.node(id);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.value[c] += nm.value[r * cols + c];
  if (out.needs_grad) {
    std::size_t vid = m.id();
    out.backward = [vid, id, rows, cols](Tape& t) {
      auto& src = t.node(vid);
      const auto& g = t.node(id).grad;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) src.grad[r * cols + c] += g[c];
    };
  }
  return Var(&tp, id);
}

namespace {

// (rows, cols, is_matrix) view used by concat/slice over the last dimension.
struct RowView {
  std::size_t rows, cols;
  bool is_matrix;
};

RowView row_view(const char* op, const std::vector<std::size_t>& s) {
  if (s.size() == 1) return {1, s[0], false};
  if (s.size() == 2) return {s[0], s[1], true};
  throw std::invalid_argument(std::string(op) + ": expected vector or matrix, got " + shape_str(s));
}

}  // namespace

Var concat_cols(Var a, Var b) {
  check_same_tape("concat_cols", a, b);
  Tape& tp = *a.tape();
  const auto &na = tp.node(a.id()), &nb = tp.node(b.id());
  RowView va = row_view("concat_cols", na.shape), vb = row_view("concat_cols", nb.shape);
  if (va.rows != vb.rows) shape_error("concat_cols", na.shape, nb.shape);
  std::size_t rows = va.rows, ca = va.cols, cb = vb.cols;
  std::vector<std::size_t> out_shape =
      (va.is_matrix || vb.is_matrix) ? std::vector<std::size_t>{rows, ca + cb}
                                     : std::vector<std::size_t>{ca + cb};
  bool ng = na.needs_grad || nb.needs_grad;
  std::size_t id = tp.new_node(out_shape, ng);
  auto& out = tp.node(id);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < ca; ++c) out.value[r * (ca + cb) + c] = na.value[r * ca + c];
    for (std::size_t c = 0; c < cb; ++c) out.value[r * (ca + cb) + ca + c] = nb.value[r * cb + c];
  }
  if (ng) {
    std::size_t ida = a.id(), idb = b.id();
    out.backward = [ida, idb, id, rows, ca, cb](Tape& t) {
      auto &sa = t.node(ida), &sb = t.node(idb);
      const auto& g = t.node(id).grad;
      for (std::size_t r = 0; r < rows; ++r) {
        if (sa.needs_grad)
          for (std::size_t c = 0; c < ca; ++c) sa.grad[r * ca + c] += g[r * (ca + cb) + c];
        if (sb.needs_grad)
          for (std::size_t c = 0; c < cb; ++c) sb.grad[r * cb + c] += g[r * (ca + cb) + ca + c];
      }
    };
  }
  return Var(&tp, id);
}

Var slice_cols(Var v, std::size_t lo, std::size_t hi) {
  Tape& tp = *v.tape();
  const auto& nv = tp.node(v.id());
  RowView view = row_view("slice_cols", nv.shape);
  if (lo >= hi || hi > view.cols)
    throw std::invalid_argument("slice_cols: range [" + std::to_string(lo) + "," +
                                std::to_string(hi) + ") invalid for shape " + shape_str(nv.shape));
  std::size_t rows = view.rows, cols = view.cols, w = hi - lo;
  std::vector<std::size_t> out_shape =
      view.is_matrix ? std::vector<std::size_t>{rows, w} : std::vector<std::size_t>{w};
  std::size_t id = tp.new_node(out_shape, nv.needs_grad);
  auto& out = tp.node(id);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out.value[r * w + c] = nv.value[r * cols + lo + c];
  if (out.needs_grad) {
    std::size_t vid = v.id();
    out.backward = [vid, id, rows, cols, lo, w](Tape& t) {
      auto& src = t.node(vid);
      const auto& g = t.node(id).grad;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) src.grad[r * cols + lo + c] += g[r * w + c];
    };
  }
  return Var(&tp, id);
}

Var reshape(Var v, std::vector<std::size_t> shape) {
  Tape& tp = *v.tape();
  const auto& nv = tp.node(v.id());
  if (shape_numel(shape) != nv.value.size())
    shape_error("reshape", nv.shape, shape);
  std::size_t id = tp.new_node(shape, nv.needs_grad);
  auto& out = tp.node(id);
  out.value = nv.value;
  if (out.needs_grad) {
    std::size_t vid = v.id();
    out.backward = [vid, id](Tape& t) {
      auto& src = t.node(vid);
      const auto& g = t.node(id).grad;
      for (std::size_t k = 0; k < g.size(); ++k) src.grad[k] += g[k];
    };
  }
  return Var(&tp, id);
}

Var mean(Var v) {
  std::size_t n = v.size();
  return mul_scalar(sum(v), 1.0 / static_cast<double>(n));
}

}  // namespace mbil
