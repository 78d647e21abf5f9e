#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "relax/errors.hpp"

namespace relax {

using Vec = std::vector<double>;

class Tape;

/// Lightweight handle to a node owned by a Tape.
struct Node {
  Tape* tape = nullptr;
  std::size_t idx = static_cast<std::size_t>(-1);

  bool valid() const { return tape != nullptr; }
  const Vec& value() const;
  std::size_t size() const { return value().size(); }
  double scalar() const;
};

namespace detail {

// Emits symbolic adjoint contributions for one node: given the adjoint of
// the node's output, hand each input its contribution expression.
using EmitFn = std::function<void(
    Node self_adjoint,
    const std::function<void(std::size_t input_idx, Node contrib)>& accum)>;

struct NodeData {
  Vec value;
  Vec adjoint;
  std::vector<std::size_t> inputs;
  std::function<void()> fwd;  // null for leaves
  std::function<void()> bwd;  // null for leaves and non-differentiable ops
  EmitFn emit;                // null where bwd is null
  bool mutable_leaf = false;
};

inline void check_same_or_scalar(std::size_t a, std::size_t b,
                                 const char* op) {
  if (a != b && a != 1 && b != 1)
    throw ContractError(std::string(op) + ": length mismatch");
}

}  // namespace detail

/// A recorded differentiable computation over flat real vectors.
///
/// Nodes are evaluated eagerly as they are built; recompute() re-runs the
/// whole program after leaf values change, and run_backward() accumulates
/// adjoints in reverse order. Single-threaded by contract.
class Tape {
public:
  Node make_node(Vec value, std::vector<std::size_t> inputs,
                 std::function<void()> fwd, std::function<void()> bwd,
                 detail::EmitFn emit) {
    std::size_t idx = nodes_.size();
    detail::NodeData nd;
    nd.value = std::move(value);
    nd.adjoint.assign(nd.value.size(), 0.0);
    nd.inputs = std::move(inputs);
    nd.fwd = std::move(fwd);
    nd.bwd = std::move(bwd);
    nd.emit = std::move(emit);
    nodes_.push_back(std::move(nd));
    check_finite(idx);
    return Node{this, idx};
  }

  /// Trainable leaf; registered so optimizers can walk all parameters.
  Node param(Vec value, std::string name = "") {
    Node n = input(std::move(value));
    params_.push_back(n.idx);
    param_names_.push_back(std::move(name));
    return n;
  }

  /// Mutable non-trainable leaf (noise, data, sampled values).
  Node input(Vec value) {
    std::size_t idx = nodes_.size();
    detail::NodeData nd;
    nd.value = std::move(value);
    nd.adjoint.assign(nd.value.size(), 0.0);
    nd.mutable_leaf = true;
    nodes_.push_back(std::move(nd));
    check_finite(idx);
    return Node{this, idx};
  }

  Node input_scalar(double v) { return input(Vec{v}); }

  Node constant(Vec value) {
    Node n = input(std::move(value));
    nodes_[n.idx].mutable_leaf = false;
    return n;
  }

  Node constant(double v) { return constant(Vec{v}); }

  void set_value(Node n, std::span<const double> v) {
    detail::NodeData& nd = nodes_.at(n.idx);
    if (!nd.mutable_leaf) throw ContractError("set_value: not a mutable leaf");
    if (v.size() != nd.value.size())
      throw ContractError("set_value: length mismatch");
    std::copy(v.begin(), v.end(), nd.value.begin());
  }

  void set_value(Node n, double v) { set_value(n, std::span(&v, 1)); }

  const Vec& value(std::size_t idx) const { return nodes_[idx].value; }
  const Vec& value(Node n) const { return nodes_[n.idx].value; }
  Vec& mutable_value(std::size_t idx) { return nodes_[idx].value; }
  Vec& adjoint(std::size_t idx) { return nodes_[idx].adjoint; }
  const Vec& adjoint(Node n) const { return nodes_[n.idx].adjoint; }
  const std::vector<std::size_t>& inputs_of(std::size_t idx) const {
    return nodes_[idx].inputs;
  }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::size_t>& params() const { return params_; }

  /// Re-runs every stored forward closure in recording order.
  void recompute() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].fwd) {
        nodes_[i].fwd();
        check_finite(i);
      }
    }
  }

  /// Forward pass per the module contract: recompute and read off a root.
  const Vec& forward(Node root) {
    recompute();
    return value(root);
  }

  void zero_adjoints() {
    for (auto& nd : nodes_) std::fill(nd.adjoint.begin(), nd.adjoint.end(), 0.0);
  }

  void add_adjoint(Node n, std::span<const double> seed) {
    Vec& a = nodes_.at(n.idx).adjoint;
    if (seed.size() != a.size())
      throw ContractError("add_adjoint: length mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += seed[i];
  }

  /// Runs all backward closures in reverse order. Callers seed adjoints
  /// first (zero_adjoints + add_adjoint).
  void run_backward() {
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].bwd) nodes_[i].bwd();
    }
  }

  /// Standard reverse pass from a scalar root.
  void backward(Node root) {
    if (value(root).size() != 1)
      throw ContractError("backward: root must be scalar");
    zero_adjoints();
    nodes_[root.idx].adjoint[0] = 1.0;
    run_backward();
  }

  /// Gradient of the last backward pass with respect to a leaf.
  const Vec& grad(Node leaf) const { return nodes_.at(leaf.idx).adjoint; }

  /// backward() then gradients for every registered param, keyed by index.
  std::unordered_map<std::size_t, Vec> backward_grads(Node root) {
    backward(root);
    std::unordered_map<std::size_t, Vec> out;
    for (std::size_t p : params_) out[p] = nodes_[p].adjoint;
    return out;
  }

  detail::NodeData& data(std::size_t idx) { return nodes_[idx]; }

private:
  void check_finite(std::size_t idx) {
    for (double v : nodes_[idx].value)
      if (!std::isfinite(v))
        throw NumericalError("non-finite value in forward pass", idx);
  }

  std::deque<detail::NodeData> nodes_;
  std::vector<std::size_t> params_;
  std::vector<std::string> param_names_;
};

inline const Vec& Node::value() const { return tape->value(idx); }

inline double Node::scalar() const {
  const Vec& v = value();
  if (v.size() != 1) throw ContractError("scalar() on non-scalar node");
  return v[0];
}

// ---------------------------------------------------------------------------
// Primitive ops. Each op installs three behaviours: an eager/replayable
// forward closure, a numeric backward closure, and a symbolic VJP emitter
// used by gradient_nodes() to build derivative expressions as new nodes.
// ---------------------------------------------------------------------------

namespace detail {

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

constexpr double kLogClamp = 1e-12;

// Broadcast read: b(i) for elementwise binary ops where one side may be
// a length-1 scalar.
inline double bget(const Vec& v, std::size_t i) {
  return v.size() == 1 ? v[0] : v[i];
}

}  // namespace detail

Node broadcast_to(Node a, std::size_t n);
Node reduce_sum(Node a);

/// Elementwise binary op with scalar broadcast on either side.
template <class FwdF, class BwdF, class EmitF>
Node binary_op(const char* name, Node a, Node b, FwdF f, BwdF dfd, EmitF emit) {
  Tape* t = a.tape;
  std::size_t na = a.size(), nb = b.size();
  detail::check_same_or_scalar(na, nb, name);
  std::size_t n = std::max(na, nb);
  std::size_t ia = a.idx, ib = b.idx;

  auto compute = [t, ia, ib, n, f](Vec& out) {
    const Vec& va = t->value(ia);
    const Vec& vb = t->value(ib);
    for (std::size_t i = 0; i < n; ++i)
      out[i] = f(detail::bget(va, i), detail::bget(vb, i));
  };
  Vec v(n);
  compute(v);

  std::size_t self = t->size();
  auto fwd = [t, self, compute]() { compute(t->mutable_value(self)); };
  auto bwd = [t, self, ia, ib, n, dfd]() {
    const Vec& adj = t->adjoint(self);
    const Vec& va = t->value(ia);
    const Vec& vb = t->value(ib);
    Vec& aa = t->adjoint(ia);
    Vec& ab = t->adjoint(ib);
    for (std::size_t i = 0; i < n; ++i) {
      auto [da, db] = dfd(detail::bget(va, i), detail::bget(vb, i));
      aa[aa.size() == 1 ? 0 : i] += adj[i] * da;
      ab[ab.size() == 1 ? 0 : i] += adj[i] * db;
    }
  };
  return t->make_node(std::move(v), {ia, ib}, std::move(fwd), std::move(bwd),
                      emit);
}

template <class FwdF, class BwdF, class EmitF>
Node unary_op(Node a, FwdF f, BwdF df, EmitF emit) {
  Tape* t = a.tape;
  std::size_t n = a.size(), ia = a.idx;
  auto compute = [t, ia, n, f](Vec& out) {
    const Vec& va = t->value(ia);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(va[i]);
  };
  Vec v(n);
  compute(v);
  std::size_t self = t->size();
  auto fwd = [t, self, compute]() { compute(t->mutable_value(self)); };
  auto bwd = [t, self, ia, n, df]() {
    const Vec& adj = t->adjoint(self);
    const Vec& va = t->value(ia);
    const Vec& vo = t->value(self);
    Vec& aa = t->adjoint(ia);
    for (std::size_t i = 0; i < n; ++i) aa[i] += adj[i] * df(va[i], vo[i]);
  };
  return t->make_node(std::move(v), {ia}, std::move(fwd), std::move(bwd),
                      emit);
}

Node mul(Node a, Node b);
Node add(Node a, Node b);
Node neg(Node a);
Node sub(Node a, Node b);
Node div(Node a, Node b);
Node sum(Node a);
Node sigmoid(Node a);
Node heaviside(Node a);
Node softmax(Node a);
Node concat(Node a, Node b);
Node slice(Node a, std::size_t off, std::size_t len);

// Helper used by emitters that must fold a broadcast contribution back to a
// scalar input.
inline void accum_bcast(Node contrib, std::size_t input_idx,
                        std::size_t input_len,
                        const std::function<void(std::size_t, Node)>& accum) {
  if (input_len == 1 && contrib.size() != 1)
    accum(input_idx, reduce_sum(contrib));
  else
    accum(input_idx, contrib);
}

inline Node add(Node a, Node b) {
  std::size_t ia = a.idx, la = a.size(), ib = b.idx, lb = b.size();
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return std::pair{1.0, 1.0}; },
      [ia, la, ib, lb](Node adj, const auto& accum) {
        accum_bcast(adj, ia, la, accum);
        accum_bcast(adj, ib, lb, accum);
      });
}

inline Node sub(Node a, Node b) {
  std::size_t ia = a.idx, la = a.size(), ib = b.idx, lb = b.size();
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return std::pair{1.0, -1.0}; },
      [ia, la, ib, lb](Node adj, const auto& accum) {
        accum_bcast(adj, ia, la, accum);
        accum_bcast(neg(adj), ib, lb, accum);
      });
}

inline Node mul(Node a, Node b) {
  std::size_t ia = a.idx, la = a.size(), ib = b.idx, lb = b.size();
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y) { return std::pair{y, x}; },
      [a, b, ia, la, ib, lb](Node adj, const auto& accum) {
        accum_bcast(mul(adj, b), ia, la, accum);
        accum_bcast(mul(adj, a), ib, lb, accum);
      });
}

inline Node div(Node a, Node b) {
  std::size_t ia = a.idx, la = a.size(), ib = b.idx, lb = b.size();
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y) { return std::pair{1.0 / y, -x / (y * y)}; },
      [a, b, ia, la, ib, lb](Node adj, const auto& accum) {
        accum_bcast(div(adj, b), ia, la, accum);
        accum_bcast(neg(div(mul(adj, a), mul(b, b))), ib, lb, accum);
      });
}

inline Node neg(Node a) {
  std::size_t ia = a.idx;
  return unary_op(
      a, [](double x) { return -x; }, [](double, double) { return -1.0; },
      [ia](Node adj, const auto& accum) { accum(ia, neg(adj)); });
}

inline Node exp(Node a) {
  std::size_t ia = a.idx;
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; },
      [a, ia](Node adj, const auto& accum) { accum(ia, mul(adj, exp(a))); });
}

/// log with the argument clamped at 1e-12.
inline Node log(Node a) {
  std::size_t ia = a.idx;
  return unary_op(
      a, [](double x) { return std::log(std::max(x, detail::kLogClamp)); },
      [](double x, double) { return 1.0 / std::max(x, detail::kLogClamp); },
      [a, ia](Node adj, const auto& accum) { accum(ia, div(adj, a)); });
}

inline Node log1p(Node a) {
  std::size_t ia = a.idx;
  return unary_op(
      a, [](double x) { return std::log1p(x); },
      [](double x, double) { return 1.0 / (1.0 + x); },
      [a, ia](Node adj, const auto& accum) {
        Node one = adj.tape->constant(1.0);
        accum(ia, div(adj, add(one, a)));
      });
}

inline Node sigmoid(Node a) {
  std::size_t ia = a.idx;
  return unary_op(
      a, [](double x) { return detail::stable_sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); },
      [a, ia](Node adj, const auto& accum) {
        Node s = sigmoid(a);
        Node one = adj.tape->constant(1.0);
        accum(ia, mul(adj, mul(s, sub(one, s))));
      });
}

inline Node tanh(Node a) {
  std::size_t ia = a.idx;
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; },
      [a, ia](Node adj, const auto& accum) {
        Node th = tanh(a);
        Node one = adj.tape->constant(1.0);
        accum(ia, mul(adj, sub(one, mul(th, th))));
      });
}

inline Node relu(Node a) {
  std::size_t ia = a.idx;
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; },
      [a, ia](Node adj, const auto& accum) {
        accum(ia, mul(adj, heaviside(a)));
      });
}

inline Node softplus(Node a) {
  std::size_t ia = a.idx;
  return unary_op(
      a, [](double x) { return detail::stable_softplus(x); },
      [](double x, double) { return detail::stable_sigmoid(x); },
      [a, ia](Node adj, const auto& accum) {
        accum(ia, mul(adj, sigmoid(a)));
      });
}

inline Node square(Node a) {
  std::size_t ia = a.idx;
  return unary_op(
      a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; },
      [a, ia](Node adj, const auto& accum) {
        Node two = adj.tape->constant(2.0);
        accum(ia, mul(adj, mul(two, a)));
      });
}

/// Forward-only step function 1[x > 0]; derivative treated as zero.
inline Node heaviside(Node a) {
  Tape* t = a.tape;
  std::size_t ia = a.idx, n = a.size();
  auto compute = [t, ia, n](Vec& out) {
    const Vec& va = t->value(ia);
    for (std::size_t i = 0; i < n; ++i) out[i] = va[i] > 0.0 ? 1.0 : 0.0;
  };
  Vec v(n);
  compute(v);
  std::size_t self = t->size();
  return t->make_node(
      std::move(v), {ia},
      [t, self, compute]() { compute(t->mutable_value(self)); }, nullptr,
      nullptr);
}

/// Forward-only argmax; ties broken by lowest index. Non-differentiable.
inline Node max_index(Node a) {
  Tape* t = a.tape;
  std::size_t ia = a.idx, n = a.size();
  auto compute = [t, ia, n](Vec& out) {
    const Vec& va = t->value(ia);
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (va[i] > va[best]) best = i;
    out[0] = static_cast<double>(best);
  };
  Vec v(1);
  compute(v);
  std::size_t self = t->size();
  return t->make_node(
      std::move(v), {ia},
      [t, self, compute]() { compute(t->mutable_value(self)); }, nullptr,
      nullptr);
}

/// Forward value passes through; backward contributes nothing.
inline Node stop_gradient(Node a) {
  Tape* t = a.tape;
  std::size_t ia = a.idx, n = a.size();
  Vec v = t->value(ia);
  std::size_t self = t->size();
  return t->make_node(
      std::move(v), {ia},
      [t, self, ia]() { t->mutable_value(self) = t->value(ia); }, nullptr,
      nullptr);
}

inline Node sum(Node a) {
  Tape* t = a.tape;
  std::size_t ia = a.idx, n = a.size();
  auto compute = [t, ia, n](Vec& out) {
    const Vec& va = t->value(ia);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += va[i];
    out[0] = s;
  };
  Vec v(1);
  compute(v);
  std::size_t self = t->size();
  auto fwd = [t, self, compute]() { compute(t->mutable_value(self)); };
  auto bwd = [t, self, ia, n]() {
    double adj = t->adjoint(self)[0];
    Vec& aa = t->adjoint(ia);
    for (std::size_t i = 0; i < n; ++i) aa[i] += adj;
  };
  return t->make_node(std::move(v), {ia}, std::move(fwd), std::move(bwd),
                      [ia, n](Node adj, const auto& accum) {
                        accum(ia, broadcast_to(adj, n));
                      });
}

inline Node mean(Node a) {
  Tape* t = a.tape;
  double inv = 1.0 / static_cast<double>(a.size());
  return mul(sum(a), t->constant(inv));
}

inline Node reduce_sum(Node a) { return sum(a); }

/// Replicates a scalar node to length n.
inline Node broadcast_to(Node a, std::size_t n) {
  Tape* t = a.tape;
  if (a.size() != 1) throw ContractError("broadcast_to: source not scalar");
  std::size_t ia = a.idx;
  auto compute = [t, ia, n](Vec& out) {
    double v = t->value(ia)[0];
    for (std::size_t i = 0; i < n; ++i) out[i] = v;
  };
  Vec v(n);
  compute(v);
  std::size_t self = t->size();
  auto fwd = [t, self, compute]() { compute(t->mutable_value(self)); };
  auto bwd = [t, self, ia, n]() {
    const Vec& adj = t->adjoint(self);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += adj[i];
    t->adjoint(ia)[0] += s;
  };
  return t->make_node(std::move(v), {ia}, std::move(fwd), std::move(bwd),
                      [ia](Node adj, const auto& accum) {
                        accum(ia, reduce_sum(adj));
                      });
}

inline Node softmax(Node a) {
  Tape* t = a.tape;
  std::size_t ia = a.idx, n = a.size();
  auto compute = [t, ia, n](Vec& out) {
    const Vec& va = t->value(ia);
    double m = va[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, va[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = std::exp(va[i] - m);
      z += out[i];
    }
    for (std::size_t i = 0; i < n; ++i) out[i] /= z;
  };
  Vec v(n);
  compute(v);
  std::size_t self = t->size();
  auto fwd = [t, self, compute]() { compute(t->mutable_value(self)); };
  auto bwd = [t, self, ia, n]() {
    const Vec& adj = t->adjoint(self);
    const Vec& y = t->value(self);
    Vec& aa = t->adjoint(ia);
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += adj[i] * y[i];
    for (std::size_t i = 0; i < n; ++i) aa[i] += y[i] * (adj[i] - dot);
  };
  return t->make_node(std::move(v), {ia}, std::move(fwd), std::move(bwd),
                      [a, ia](Node adj, const auto& accum) {
                        Node y = softmax(a);
                        Node dot = sum(mul(y, adj));
                        accum(ia, mul(y, sub(adj, dot)));
                      });
}

inline Node logsumexp(Node a) {
  Tape* t = a.tape;
  std::size_t ia = a.idx, n = a.size();
  auto compute = [t, ia, n](Vec& out) {
    const Vec& va = t->value(ia);
    double m = va[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, va[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(va[i] - m);
    out[0] = m + std::log(s);
  };
  Vec v(1);
  compute(v);
  std::size_t self = t->size();
  auto fwd = [t, self, compute]() { compute(t->mutable_value(self)); };
  auto bwd = [t, self, ia, n]() {
    double adj = t->adjoint(self)[0];
    const Vec& va = t->value(ia);
    double lse = t->value(self)[0];
    Vec& aa = t->adjoint(ia);
    for (std::size_t i = 0; i < n; ++i) aa[i] += adj * std::exp(va[i] - lse);
  };
  return t->make_node(std::move(v), {ia}, std::move(fwd), std::move(bwd),
                      [a, ia](Node adj, const auto& accum) {
                        accum(ia, mul(softmax(a), adj));
                      });
}

inline Node log_softmax(Node a) {
  return sub(a, broadcast_to(logsumexp(a), a.size()));
}

Node matvec_t(Node w, Node y, std::size_t rows, std::size_t cols);
Node outer(Node a, Node b);

/// y = W x with W stored row-major flat (rows x cols).
inline Node matvec(Node w, Node x, std::size_t rows, std::size_t cols) {
  Tape* t = w.tape;
  if (w.size() != rows * cols || x.size() != cols)
    throw ContractError("matvec: shape mismatch");
  std::size_t iw = w.idx, ix = x.idx;
  auto compute = [t, iw, ix, rows, cols](Vec& out) {
    const Vec& vw = t->value(iw);
    const Vec& vx = t->value(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      const double* row = vw.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) s += row[c] * vx[c];
      out[r] = s;
    }
  };
  Vec v(rows);
  compute(v);
  std::size_t self = t->size();
  auto fwd = [t, self, compute]() { compute(t->mutable_value(self)); };
  auto bwd = [t, self, iw, ix, rows, cols]() {
    const Vec& adj = t->adjoint(self);
    const Vec& vw = t->value(iw);
    const Vec& vx = t->value(ix);
    Vec& aw = t->adjoint(iw);
    Vec& ax = t->adjoint(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      double ar = adj[r];
      double* awrow = aw.data() + r * cols;
      const double* wrow = vw.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) {
        awrow[c] += ar * vx[c];
        ax[c] += ar * wrow[c];
      }
    }
  };
  return t->make_node(std::move(v), {iw, ix}, std::move(fwd), std::move(bwd),
                      [w, x, iw, ix, rows, cols](Node adj, const auto& accum) {
                        accum(iw, outer(adj, x));
                        accum(ix, matvec_t(w, adj, rows, cols));
                      });
}

/// y = W^T x for W stored row-major flat (rows x cols); x has length rows.
inline Node matvec_t(Node w, Node y, std::size_t rows, std::size_t cols) {
  Tape* t = w.tape;
  if (w.size() != rows * cols || y.size() != rows)
    throw ContractError("matvec_t: shape mismatch");
  std::size_t iw = w.idx, iy = y.idx;
  auto compute = [t, iw, iy, rows, cols](Vec& out) {
    const Vec& vw = t->value(iw);
    const Vec& vy = t->value(iy);
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = vw.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) out[c] += row[c] * vy[r];
    }
  };
  Vec v(cols);
  compute(v);
  std::size_t self = t->size();
  auto fwd = [t, self, compute]() { compute(t->mutable_value(self)); };
  auto bwd = [t, self, iw, iy, rows, cols]() {
    const Vec& adj = t->adjoint(self);
    const Vec& vw = t->value(iw);
    const Vec& vy = t->value(iy);
    Vec& aw = t->adjoint(iw);
    Vec& ay = t->adjoint(iy);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* wrow = vw.data() + r * cols;
      double* awrow = aw.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) {
        awrow[c] += vy[r] * adj[c];
        ay[r] += wrow[c] * adj[c];
      }
    }
  };
  return t->make_node(std::move(v), {iw, iy}, std::move(fwd), std::move(bwd),
                      [w, y, iw, iy, rows, cols](Node adj, const auto& accum) {
                        accum(iw, outer(y, adj));
                        accum(iy, matvec(w, adj, rows, cols));
                      });
}

/// Flat outer product a b^T, length |a|*|b| row-major.
inline Node outer(Node a, Node b) {
  Tape* t = a.tape;
  std::size_t ia = a.idx, ib = b.idx, na = a.size(), nb = b.size();
  auto compute = [t, ia, ib, na, nb](Vec& out) {
    const Vec& va = t->value(ia);
    const Vec& vb = t->value(ib);
    for (std::size_t r = 0; r < na; ++r)
      for (std::size_t c = 0; c < nb; ++c) out[r * nb + c] = va[r] * vb[c];
  };
  Vec v(na * nb);
  compute(v);
  std::size_t self = t->size();
  auto fwd = [t, self, compute]() { compute(t->mutable_value(self)); };
  auto bwd = [t, self, ia, ib, na, nb]() {
    const Vec& adj = t->adjoint(self);
    const Vec& va = t->value(ia);
    const Vec& vb = t->value(ib);
    Vec& aa = t->adjoint(ia);
    Vec& ab = t->adjoint(ib);
    for (std::size_t r = 0; r < na; ++r)
      for (std::size_t c = 0; c < nb; ++c) {
        aa[r] += adj[r * nb + c] * vb[c];
        ab[c] += adj[r * nb + c] * va[r];
      }
  };
  return t->make_node(std::move(v), {ia, ib}, std::move(fwd), std::move(bwd),
                      [a, b, ia, ib, na, nb](Node adj, const auto& accum) {
                        accum(ia, matvec(adj, b, na, nb));
                        accum(ib, matvec_t(adj, a, na, nb));
                      });
}

/// W x + b with W row-major (rows x cols).
inline Node affine(Node w, Node b, Node x, std::size_t rows,
                   std::size_t cols) {
  return add(matvec(w, x, rows, cols), b);
}

inline Node dot(Node a, Node b) { return sum(mul(a, b)); }

inline Node concat(Node a, Node b) {
  Tape* t = a.tape;
  std::size_t ia = a.idx, ib = b.idx, na = a.size(), nb = b.size();
  auto compute = [t, ia, ib, na, nb](Vec& out) {
    const Vec& va = t->value(ia);
    const Vec& vb = t->value(ib);
    std::copy(va.begin(), va.end(), out.begin());
    std::copy(vb.begin(), vb.end(), out.begin() + na);
  };
  Vec v(na + nb);
  compute(v);
  std::size_t self = t->size();
  auto fwd = [t, self, compute]() { compute(t->mutable_value(self)); };
  auto bwd = [t, self, ia, ib, na, nb]() {
    const Vec& adj = t->adjoint(self);
    Vec& aa = t->adjoint(ia);
    Vec& ab = t->adjoint(ib);
    for (std::size_t i = 0; i < na; ++i) aa[i] += adj[i];
    for (std::size_t i = 0; i < nb; ++i) ab[i] += adj[na + i];
  };
  return t->make_node(std::move(v), {ia, ib}, std::move(fwd), std::move(bwd),
                      [ia, ib, na, nb](Node adj, const auto& accum) {
                        accum(ia, slice(adj, 0, na));
                        accum(ib, slice(adj, na, nb));
                      });
}

inline Node slice(Node a, std::size_t off, std::size_t len) {
  Tape* t = a.tape;
  std::size_t ia = a.idx;
  if (off + len > a.size()) throw ContractError("slice: out of range");
  auto compute = [t, ia, off, len](Vec& out) {
    const Vec& va = t->value(ia);
    std::copy(va.begin() + off, va.begin() + off + len, out.begin());
  };
  Vec v(len);
  compute(v);
  std::size_t self = t->size();
  auto fwd = [t, self, compute]() { compute(t->mutable_value(self)); };
  auto bwd = [t, self, ia, off, len]() {
    const Vec& adj = t->adjoint(self);
    Vec& aa = t->adjoint(ia);
    for (std::size_t i = 0; i < len; ++i) aa[off + i] += adj[i];
  };
  std::size_t total = a.size();
  return t->make_node(std::move(v), {ia}, std::move(fwd), std::move(bwd),
                      [ia, off, len, total](Node adj, const auto& accum) {
                        Tape* tp = adj.tape;
                        Node padded = adj;
                        if (off > 0)
                          padded = concat(tp->constant(Vec(off, 0.0)), padded);
                        if (off + len < total)
                          padded = concat(
                              padded,
                              tp->constant(Vec(total - off - len, 0.0)));
                        accum(ia, padded);
                      });
}

inline Node operator+(Node a, Node b) { return add(a, b); }
inline Node operator-(Node a, Node b) { return sub(a, b); }
inline Node operator*(Node a, Node b) { return mul(a, b); }
inline Node operator/(Node a, Node b) { return div(a, b); }
inline Node operator-(Node a) { return neg(a); }

// ---------------------------------------------------------------------------
// Symbolic reverse mode: builds the gradient of a scalar root with respect
// to chosen leaves as *new nodes on the same tape*, so derivative values
// themselves stay differentiable. This is how estimators expose d c_phi/dz
// terms that the variance objective later differentiates in phi.
// ---------------------------------------------------------------------------

inline std::vector<Node> gradient_nodes(Node root, std::span<const Node> wrt) {
  Tape* t = root.tape;
  if (root.size() != 1)
    throw ContractError("gradient_nodes: root must be scalar");

  // Adjoint expressions, indexed by node id; built highest-index first.
  std::unordered_map<std::size_t, Node> adj;
  adj[root.idx] = t->constant(1.0);

  std::size_t limit = root.idx + 1;
  for (std::size_t i = limit; i-- > 0;) {
    auto it = adj.find(i);
    if (it == adj.end()) continue;
    const detail::NodeData& nd = t->data(i);
    if (!nd.emit) continue;
    Node self_adj = it->second;
    nd.emit(self_adj, [&adj, t](std::size_t input_idx, Node contrib) {
      auto jt = adj.find(input_idx);
      if (jt == adj.end())
        adj.emplace(input_idx, contrib);
      else
        jt->second = add(jt->second, contrib);
    });
  }

  std::vector<Node> out;
  out.reserve(wrt.size());
  for (const Node& w : wrt) {
    auto it = adj.find(w.idx);
    if (it != adj.end())
      out.push_back(it->second);
    else
      out.push_back(t->constant(Vec(w.size(), 0.0)));
  }
  return out;
}

inline Node gradient_node(Node root, Node wrt) {
  return gradient_nodes(root, std::span(&wrt, 1))[0];
}

}  // namespace relax
