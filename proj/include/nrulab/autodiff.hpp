#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records every forward operation as a node holding its value and a
// backward closure. Var is a lightweight handle (tape pointer + node id).
// Node ids are assigned in creation order, so inputs always precede outputs
// and backward() can sweep the tape once in reverse.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <deque>
#include <vector>

#include "nrulab/error.hpp"
#include "nrulab/tensor.hpp"

namespace nrulab::ad {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline ConstMatrixMap as_matrix(const Tensor& t) {
  return ConstMatrixMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

inline MatrixMap as_matrix(Tensor& t) {
  return MatrixMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr; }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable leaf (parameter or probed input).
  Var leaf(Tensor value, std::string name = {}) {
    Var v = push("leaf", {}, std::move(value), nullptr, true);
    if (!name.empty()) named_[std::move(name)] = v.id;
    return v;
  }

  /// Non-differentiable value; gradients never flow into it.
  Var constant(Tensor value) { return push("const", {}, std::move(value), nullptr, false); }

  /// Records an operation. The backward closure runs only if some input
  /// requires a gradient.
  Var record(std::string op, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward) {
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_[in].requires_grad;
    return push(std::move(op), std::move(inputs), std::move(value),
                needs ? std::move(backward) : BackwardFn{}, needs);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& value(Var v) const { return value(v.id); }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }

  /// Incoming gradient of a node during the backward sweep.
  const Tensor& upstream(std::size_t id) const { return grads_[id]; }

  /// Accumulation buffer for the gradient of `id`, zero-initialized on first use.
  /// Returns nullptr when the node does not require a gradient.
  Tensor* grad_buffer(std::size_t id) {
    if (!nodes_[id].requires_grad) return nullptr;
    Tensor& g = grads_[id];
    if (g.size() == 0) g = Tensor::zeros(nodes_[id].value.shape());
    return &g;
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates gradients to every node.
  void backward(Var loss) {
    if (loss.tape != this) throw ContractError("backward: loss belongs to a different tape");
    if (value(loss).size() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(value(loss).shape()));
    }
    grads_.assign(nodes_.size(), Tensor{});
    if (!nodes_[loss.id].requires_grad) return;
    grads_[loss.id] = Tensor::ones(value(loss).shape());
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || grads_[i].size() == 0) continue;
      n.backward(*this, i);
    }
  }

  /// Gradient of a node after backward(); zeros when no gradient reached it.
  Tensor grad(Var v) const {
    if (v.id < grads_.size() && grads_[v.id].size() != 0) return grads_[v.id];
    return Tensor::zeros(value(v).shape());
  }

  /// Gradients of all named leaves (zeros for leaves the loss does not use).
  std::map<std::string, Tensor> named_grads() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : named_) out.emplace(name, grad(Var{const_cast<Tape*>(this), id}));
    return out;
  }

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor value;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(std::string op, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward,
           bool requires_grad) {
    nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(value), std::move(backward),
                          requires_grad});
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // stable addresses: value() references survive later ops
  std::vector<Tensor> grads_;
  std::map<std::string, std::size_t> named_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

/// Convenience: the same op, with `backward` returning a name->gradient map.
inline std::map<std::string, Tensor> backward(Tape& tape, Var loss) {
  tape.backward(loss);
  return tape.named_grads();
}

namespace detail {

inline Tape& same_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw ContractError("operation on an unbound Var");
    if (t && v.tape != t) throw ContractError("operands recorded on different tapes");
    t = v.tape;
  }
  return *t;
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() == 0 || t.rank() > 2) {
    throw DimensionError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class F, class G>
Var unary_elementwise(Var x, const char* op, F forward, G derivative_from_output) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = forward(xv[i]);
  const std::size_t xi = x.id;
  return tape.record(op, {xi}, std::move(out), [xi, derivative_from_output](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_buffer(xi);
    if (!gx) return;
    const Tensor& g = t.upstream(self);
    const Tensor& xv = t.value(xi);
    const Tensor& yv = t.value(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * derivative_from_output(xv[i], yv[i]);
  });
}

}  // namespace detail

/// x[BxD_in] * W[D_in x D_out] + b[D_out], bias broadcast over rows.
inline Var affine(Var x, Var W, Var b) {
  Tape& tape = detail::same_tape({x, W, b});
  const Tensor& xv = x.value();
  const Tensor& Wv = W.value();
  const Tensor& bv = b.value();
  detail::require_matrix(xv, "affine");
  if (Wv.rank() != 2 || xv.cols() != Wv.rows() || bv.rank() != 1 || bv.size() != Wv.cols()) {
    throw DimensionError("affine: cannot apply x" + shape_str(xv.shape()) + " W" + shape_str(Wv.shape()) +
                         " b" + shape_str(bv.shape()));
  }
  const std::size_t rows = xv.rows();
  const std::size_t out_cols = Wv.cols();
  Shape shape = xv.rank() == 1 ? Shape{out_cols} : Shape{rows, out_cols};
  Tensor out(shape);
  auto om = as_matrix(out);
  om.noalias() = as_matrix(xv) * as_matrix(Wv);
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data(), static_cast<Eigen::Index>(out_cols));
  const std::size_t xi = x.id, wi = W.id, bi = b.id;
  return tape.record("affine", {xi, wi, bi}, std::move(out), [xi, wi, bi](Tape& t, std::size_t self) {
    auto g = as_matrix(t.upstream(self));
    if (Tensor* gx = t.grad_buffer(xi)) as_matrix(*gx).noalias() += g * as_matrix(t.value(wi)).transpose();
    if (Tensor* gw = t.grad_buffer(wi)) as_matrix(*gw).noalias() += as_matrix(t.value(xi)).transpose() * g;
    if (Tensor* gb = t.grad_buffer(bi)) {
      Eigen::Map<Eigen::RowVectorXd>(gb->data(), static_cast<Eigen::Index>(gb->size())) += g.colwise().sum();
    }
  });
}

/// x[BxD_in] * W[D_in x D_out].
inline Var matmul(Var x, Var W) {
  Tape& tape = detail::same_tape({x, W});
  const Tensor& xv = x.value();
  const Tensor& Wv = W.value();
  detail::require_matrix(xv, "matmul");
  if (Wv.rank() != 2 || xv.cols() != Wv.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_str(xv.shape()) + " by " + shape_str(Wv.shape()));
  }
  Shape shape = xv.rank() == 1 ? Shape{Wv.cols()} : Shape{xv.rows(), Wv.cols()};
  Tensor out(shape);
  as_matrix(out).noalias() = as_matrix(xv) * as_matrix(Wv);
  const std::size_t xi = x.id, wi = W.id;
  return tape.record("matmul", {xi, wi}, std::move(out), [xi, wi](Tape& t, std::size_t self) {
    auto g = as_matrix(t.upstream(self));
    if (Tensor* gx = t.grad_buffer(xi)) as_matrix(*gx).noalias() += g * as_matrix(t.value(wi)).transpose();
    if (Tensor* gw = t.grad_buffer(wi)) as_matrix(*gw).noalias() += as_matrix(t.value(xi)).transpose() * g;
  });
}

inline Var add(Var a, Var b) {
  Tape& tape = detail::same_tape({a, b});
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ai = a.id, bi = b.id;
  return tape.record("add", {ai, bi}, std::move(out), [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    for (std::size_t in : {ai, bi}) {
      if (Tensor* gi = t.grad_buffer(in)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
      }
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape& tape = detail::same_tape({a, b});
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ai = a.id, bi = b.id;
  return tape.record("sub", {ai, bi}, std::move(out), [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (Tensor* ga = t.grad_buffer(ai)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (Tensor* gb = t.grad_buffer(bi)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  Tape& tape = detail::same_tape({a, b});
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ai = a.id, bi = b.id;
  return tape.record("mul", {ai, bi}, std::move(out), [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (Tensor* ga = t.grad_buffer(ai)) {
      const Tensor& bv = t.value(bi);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor* gb = t.grad_buffer(bi)) {
      const Tensor& av = t.value(ai);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

/// scale * x + shift, elementwise.
inline Var scale_shift(Var x, double scale, double shift = 0.0) {
  return detail::unary_elementwise(
      x, "scale_shift", [scale, shift](double v) { return scale * v + shift; },
      [scale](double, double) { return scale; });
}

inline Var relu(Var x) {
  return detail::unary_elementwise(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var sigmoid(Var x) {
  return detail::unary_elementwise(
      x, "sigmoid", [](double v) { return stable_sigmoid(v); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh_act(Var x) {
  return detail::unary_elementwise(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

/// Sum of all elements, as a shape-[1] tensor.
inline Var sum(Var x) {
  Tape& tape = *x.tape;
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const std::size_t xi = x.id;
  return tape.record("sum", {xi}, Tensor({1}, s), [xi](Tape& t, std::size_t self) {
    if (Tensor* gx = t.grad_buffer(xi)) {
      const double g = t.upstream(self)[0];
      for (double& v : gx->values()) v += g;
    }
  });
}

/// Per-row vectorized outer product: out[b, i*s + j] = p[b,i] * q[b,j].
inline Var outer_product(Var p, Var q) {
  Tape& tape = detail::same_tape({p, q});
  const Tensor& pv = p.value();
  const Tensor& qv = q.value();
  detail::require_matrix(pv, "outer_product");
  detail::require_matrix(qv, "outer_product");
  if (pv.rows() != qv.rows() || pv.rank() != qv.rank()) {
    throw DimensionError("outer_product: batch mismatch " + shape_str(pv.shape()) + " vs " + shape_str(qv.shape()));
  }
  const std::size_t B = pv.rows(), r = pv.cols(), s = qv.cols();
  Tensor out(pv.rank() == 1 ? Shape{r * s} : Shape{B, r * s});
  for (std::size_t b = 0; b < B; ++b) {
    const double* pr = pv.data() + b * r;
    const double* qr = qv.data() + b * s;
    double* o = out.data() + b * r * s;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < s; ++j) o[i * s + j] = pr[i] * qr[j];
  }
  const std::size_t pi = p.id, qi = q.id;
  return tape.record("outer_product", {pi, qi}, std::move(out), [pi, qi, B, r, s](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& pv = t.value(pi);
    const Tensor& qv = t.value(qi);
    Tensor* gp = t.grad_buffer(pi);
    Tensor* gq = t.grad_buffer(qi);
    using Vec = Eigen::Map<Eigen::VectorXd>;
    using ConstVec = Eigen::Map<const Eigen::VectorXd>;
    for (std::size_t b = 0; b < B; ++b) {
      ConstMatrixMap G(g.data() + b * r * s, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(s));
      if (gp) Vec(gp->data() + b * r, static_cast<Eigen::Index>(r)).noalias() +=
                  G * ConstVec(qv.data() + b * s, static_cast<Eigen::Index>(s));
      if (gq) Vec(gq->data() + b * s, static_cast<Eigen::Index>(s)).noalias() +=
                  G.transpose() * ConstVec(pv.data() + b * r, static_cast<Eigen::Index>(r));
    }
  });
}

namespace detail {

inline double int_pow(double base, int exponent) {
  if (exponent == 4) {
    const double b2 = base * base;
    return b2 * b2;
  }
  if (exponent == 5) {
    const double b2 = base * base;
    return b2 * b2 * base;
  }
  double r = 1.0;
  for (int i = 0; i < exponent; ++i) r *= base;
  return r;
}

}  // namespace detail

/// Row-wise v / max(||v||_p, eps).
inline Var lp_normalize(Var v, int p = 5, double eps = 1e-12) {
  if (p < 1) throw ContractError("lp_normalize: p must be >= 1, got " + std::to_string(p));
  Tape& tape = *v.tape;
  const Tensor& vv = v.value();
  detail::require_matrix(vv, "lp_normalize");
  const std::size_t B = vv.rows(), m = vv.cols();
  Tensor out(vv.shape());
  std::vector<double> norms(B);
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = vv.data() + b * m;
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) acc += detail::int_pow(std::abs(row[i]), p);
    const double norm = std::pow(acc, 1.0 / p);
    norms[b] = norm;
    const double denom = std::max(norm, eps);
    for (std::size_t i = 0; i < m; ++i) out.data()[b * m + i] = row[i] / denom;
  }
  const std::size_t vi = v.id;
  return tape.record("lp_normalize", {vi}, std::move(out),
                     [vi, p, eps, B, m, norms = std::move(norms)](Tape& t, std::size_t self) {
                       Tensor* gv = t.grad_buffer(vi);
                       if (!gv) return;
                       const Tensor& g = t.upstream(self);
                       const Tensor& vv = t.value(vi);
                       for (std::size_t b = 0; b < B; ++b) {
                         const double* gr = g.data() + b * m;
                         const double* vr = vv.data() + b * m;
                         double* out = gv->data() + b * m;
                         const double n = norms[b];
                         if (!(n > eps)) {
                           for (std::size_t i = 0; i < m; ++i) out[i] += gr[i] / eps;
                           continue;
                         }
                         double gdotv = 0.0;
                         for (std::size_t i = 0; i < m; ++i) gdotv += gr[i] * vr[i];
                         // d||v||/dv_i = sign(v_i) |v_i|^(p-1) / ||v||^(p-1)
                         const double coef = gdotv / (n * n * detail::int_pow(n, p - 1));
                         for (std::size_t i = 0; i < m; ++i) {
                           const double a = std::abs(vr[i]);
                           const double sgn = vr[i] > 0.0 ? 1.0 : (vr[i] < 0.0 ? -1.0 : 0.0);
                           out[i] += gr[i] / n - coef * sgn * detail::int_pow(a, p - 1);
                         }
                       }
                     });
}

/// Row-wise standardization with learned gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double var_eps = 1e-5) {
  Tape& tape = detail::same_tape({x, gain, bias});
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "layer_norm");
  const std::size_t B = xv.rows(), D = xv.cols();
  if (D < 2) throw DimensionError("layer_norm: need at least 2 features, got " + shape_str(xv.shape()));
  if (gain.value().shape() != Shape{D} || bias.value().shape() != Shape{D}) {
    throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(D) + "], got " +
                         shape_str(gain.value().shape()) + " and " + shape_str(bias.value().shape()));
  }
  Tensor normalized(xv.shape());
  std::vector<double> inv_std(B);
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = xv.data() + b * D;
    double mean = 0.0;
    for (std::size_t i = 0; i < D; ++i) mean += row[i];
    mean /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t i = 0; i < D; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= static_cast<double>(D);
    inv_std[b] = 1.0 / std::sqrt(var + var_eps);
    for (std::size_t i = 0; i < D; ++i) normalized.data()[b * D + i] = (row[i] - mean) * inv_std[b];
  }
  Tensor out(xv.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < D; ++i) out.data()[b * D + i] = normalized.data()[b * D + i] * gv[i] + bv[i];

  const std::size_t xi = x.id, gi = gain.id, bi = bias.id;
  return tape.record(
      "layer_norm", {xi, gi, bi}, std::move(out),
      [xi, gi, bi, B, D, inv_std = std::move(inv_std), normalized = std::move(normalized)](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        const Tensor& gainv = t.value(gi);
        if (Tensor* gg = t.grad_buffer(gi)) {
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < D; ++i) (*gg)[i] += g.data()[b * D + i] * normalized.data()[b * D + i];
        }
        if (Tensor* gb = t.grad_buffer(bi)) {
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < D; ++i) (*gb)[i] += g.data()[b * D + i];
        }
        Tensor* gx = t.grad_buffer(xi);
        if (!gx) return;
        const double inv_d = 1.0 / static_cast<double>(D);
        for (std::size_t b = 0; b < B; ++b) {
          const double* gr = g.data() + b * D;
          const double* nr = normalized.data() + b * D;
          double mean_g = 0.0, mean_gn = 0.0;
          for (std::size_t i = 0; i < D; ++i) {
            const double gh = gr[i] * gainv[i];
            mean_g += gh;
            mean_gn += gh * nr[i];
          }
          mean_g *= inv_d;
          mean_gn *= inv_d;
          for (std::size_t i = 0; i < D; ++i) {
            const double gh = gr[i] * gainv[i];
            gx->data()[b * D + i] += inv_std[b] * (gh - mean_g - nr[i] * mean_gn);
          }
        }
      });
}

/// Weighted sum over rows of -log softmax(logits)[target]; rows with zero
/// weight are skipped entirely.
inline Var weighted_softmax_cross_entropy(Var logits, const std::vector<int>& targets,
                                          const std::vector<double>& weights) {
  Tape& tape = *logits.tape;
  const Tensor& lv = logits.value();
  detail::require_matrix(lv, "softmax_cross_entropy");
  const std::size_t B = lv.rows(), C = lv.cols();
  if (targets.size() != B || weights.size() != B) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(B) + " rows");
  }
  Tensor probs(lv.shape());
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (targets[b] < 0 || static_cast<std::size_t>(targets[b]) >= C) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(targets[b]) + " outside [0, " +
                       std::to_string(C) + ")");
    }
    if (weights[b] == 0.0) continue;
    const double* row = lv.data() + b * C;
    double mx = row[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    const double log_z = std::log(z);
    for (std::size_t c = 0; c < C; ++c) probs.data()[b * C + c] = std::exp(row[c] - mx - log_z);
    loss += weights[b] * (log_z + mx - row[targets[b]]);
  }
  const std::size_t li = logits.id;
  return tape.record("softmax_cross_entropy", {li}, Tensor({1}, loss),
                     [li, B, C, targets, weights, probs = std::move(probs)](Tape& t, std::size_t self) {
                       Tensor* gl = t.grad_buffer(li);
                       if (!gl) return;
                       const double g = t.upstream(self)[0];
                       for (std::size_t b = 0; b < B; ++b) {
                         if (weights[b] == 0.0) continue;
                         const double s = g * weights[b];
                         double* out = gl->data() + b * C;
                         const double* pr = probs.data() + b * C;
                         for (std::size_t c = 0; c < C; ++c) out[c] += s * pr[c];
                         out[targets[b]] -= s;
                       }
                     });
}

/// Mean over rows of -log softmax(logits)[target].
inline Var softmax_cross_entropy(Var logits, const std::vector<int>& targets) {
  const std::size_t B = logits.value().rows();
  return weighted_softmax_cross_entropy(logits, targets, std::vector<double>(B, 1.0 / static_cast<double>(B)));
}

/// Mean over the rows selected by `mask`.
inline Var masked_softmax_cross_entropy(Var logits, const std::vector<int>& targets,
                                        const std::vector<bool>& mask) {
  std::size_t count = 0;
  for (bool m : mask) count += m ? 1 : 0;
  if (count == 0) throw ContractError("masked_softmax_cross_entropy: mask selects no rows");
  std::vector<double> weights(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) weights[i] = mask[i] ? 1.0 / static_cast<double>(count) : 0.0;
  return weighted_softmax_cross_entropy(logits, targets, weights);
}

/// Concatenates along the last axis: [B x D_i]... -> [B x sum D_i].
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat: no parts");
  Tape& tape = *parts.front().tape;
  const Tensor& first = parts.front().value();
  detail::require_matrix(first, "concat");
  const std::size_t B = first.rows();
  const std::size_t rank = first.rank();
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.tape != &tape) throw ContractError("concat: operands recorded on different tapes");
    const Tensor& v = p.value();
    if (v.rank() != rank || v.rows() != B) {
      throw DimensionError("concat: batch mismatch " + shape_str(first.shape()) + " vs " + shape_str(v.shape()));
    }
    widths.push_back(v.cols());
    ids.push_back(p.id);
    total += v.cols();
  }
  Tensor out(rank == 1 ? Shape{total} : Shape{B, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(v.data() + b * widths[k], widths[k], out.data() + b * total + offset);
    offset += widths[k];
  }
  return tape.record("concat", ids, std::move(out), [ids, widths, B, total](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* gp = t.grad_buffer(ids[k])) {
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < widths[k]; ++i) gp->data()[b * widths[k] + i] += g.data()[b * total + offset + i];
      }
      offset += widths[k];
    }
  });
}

/// Concatenates rank-2 tensors along the first axis: [R_i x C]... -> [sum R_i x C].
inline Var stack_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("stack_rows: no parts");
  Tape& tape = *parts.front().tape;
  const std::size_t C = parts.front().value().cols();
  std::vector<std::size_t> ids, offsets;
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.tape != &tape) throw ContractError("stack_rows: operands recorded on different tapes");
    const Tensor& v = p.value();
    if (v.rank() != 2 || v.cols() != C) {
      throw DimensionError("stack_rows: column mismatch " + shape_str(parts.front().value().shape()) + " vs " +
                           shape_str(v.shape()));
    }
    ids.push_back(p.id);
    offsets.push_back(rows * C);
    rows += v.rows();
  }
  Tensor out({rows, C});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    std::copy(v.values().begin(), v.values().end(), out.data() + offsets[k]);
  }
  return tape.record("stack_rows", ids, std::move(out), [ids, offsets](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* gp = t.grad_buffer(ids[k])) {
        for (std::size_t i = 0; i < gp->size(); ++i) (*gp)[i] += g[offsets[k] + i];
      }
    }
  });
}

/// Columns [begin, end) of the last axis.
inline Var slice(Var x, std::size_t begin, std::size_t end) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  detail::require_matrix(xv, "slice");
  const std::size_t B = xv.rows(), D = xv.cols();
  if (begin >= end || end > D) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of bounds for " + shape_str(xv.shape()));
  }
  const std::size_t w = end - begin;
  Tensor out(xv.rank() == 1 ? Shape{w} : Shape{B, w});
  for (std::size_t b = 0; b < B; ++b) std::copy_n(xv.data() + b * D + begin, w, out.data() + b * w);
  const std::size_t xi = x.id;
  return tape.record("slice", {xi}, std::move(out), [xi, B, D, begin, w](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_buffer(xi);
    if (!gx) return;
    const Tensor& g = t.upstream(self);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < w; ++i) gx->data()[b * D + begin + i] += g.data()[b * w + i];
  });
}

/// Same data, new shape.
inline Var reshape(Var x, Shape shape) {
  Tape& tape = *x.tape;
  if (shape_size(shape) != x.value().size()) {
    throw DimensionError("reshape: " + shape_str(x.value().shape()) + " to " + shape_str(shape));
  }
  const std::size_t xi = x.id;
  return tape.record("reshape", {xi}, x.value().reshaped(std::move(shape)), [xi](Tape& t, std::size_t self) {
    if (Tensor* gx = t.grad_buffer(xi)) {
      const Tensor& g = t.upstream(self);
      const double* src = g.data();
      double* dst = gx->data();
      for (std::size_t i = 0, n = g.size(); i < n; ++i) dst[i] += src[i];
    }
  });
}

/// Combines k scaled directions per row:
/// out[b, j] = sum_i alpha[b, i] * dirs[b, i*m + j], alpha [B x k], dirs [B x k*m].
inline Var weighted_head_sum(Var alpha, Var dirs) {
  Tape& tape = detail::same_tape({alpha, dirs});
  const Tensor& av = alpha.value();
  const Tensor& dv = dirs.value();
  if (av.rank() != 2 || dv.rank() != 2 || av.rows() != dv.rows() || dv.cols() % av.cols() != 0) {
    throw DimensionError("weighted_head_sum: incompatible " + shape_str(av.shape()) + " and " + shape_str(dv.shape()));
  }
  const std::size_t B = av.rows(), k = av.cols(), m = dv.cols() / k;
  Tensor out({B, m});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < k; ++i) {
      const double a = av.data()[b * k + i];
      const double* d = dv.data() + b * k * m + i * m;
      double* o = out.data() + b * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += a * d[j];
    }
  const std::size_t ai = alpha.id, di = dirs.id;
  return tape.record("weighted_head_sum", {ai, di}, std::move(out), [ai, di, B, k, m](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& av = t.value(ai);
    const Tensor& dv = t.value(di);
    Tensor* ga = t.grad_buffer(ai);
    Tensor* gd = t.grad_buffer(di);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < k; ++i) {
        const double* gr = g.data() + b * m;
        const double* d = dv.data() + b * k * m + i * m;
        if (ga) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += gr[j] * d[j];
          ga->data()[b * k + i] += acc;
        }
        if (gd) {
          const double a = av.data()[b * k + i];
          double* o = gd->data() + b * k * m + i * m;
          for (std::size_t j = 0; j < m; ++j) o[j] += a * gr[j];
        }
      }
  });
}

}  // namespace nrulab::ad
