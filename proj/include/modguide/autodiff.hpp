#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "modguide/errors.hpp"
#include "modguide/tensor.hpp"

namespace modguide {

template <typename Scalar>
class Graph;

/// Handle to a value recorded on a Graph.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, Index id) : graph_(graph), id_(id) {}

  Graph<Scalar>& graph() const { return *graph_; }
  Index id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor<Scalar>& value() const { return graph_->value(id_); }
  ConstMatrixMap<Scalar> m() const { return value().matrix(); }
  const Shape& shape() const { return value().shape(); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const { return graph_->requires_grad(id_); }

 private:
  Graph<Scalar>* graph_ = nullptr;
  Index id_ = -1;
};

/// Tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so a reverse sweep over node ids is
/// a valid topological order for the backward pass. A graph is owned by one
/// thread; parameters are borrowed by const reference and their gradients are
/// only written back through accumulate_parameter_grads().
template <typename Scalar>
class Graph {
 public:
  using GradMap = ConstMatrixMap<Scalar>;
  using BackwardFn = std::function<void(Graph&, GradMap)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  Index size() const { return static_cast<Index>(nodes_.size()); }

  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), nullptr, false, {}); }

  Var<Scalar> leaf(Tensor<Scalar> value, bool requires_grad = true) {
    return push(std::move(value), nullptr, requires_grad && grad_enabled_, {});
  }

  /// Borrow a parameter without copying it. The tensor must outlive the graph.
  Var<Scalar> parameter(Tensor<Scalar>& param) {
    const bool rg = param.requires_grad() && grad_enabled_;
    Var<Scalar> v = push(Tensor<Scalar>{}, &param, rg, {});
    if (rg) params_.emplace_back(v.id(), &param);
    return v;
  }

  /// Read-only borrow; never receives gradient.
  Var<Scalar> frozen(const Tensor<Scalar>& param) { return push(Tensor<Scalar>{}, &param, false, {}); }

  /// Record an operation result. `backward` is dropped when no input needs grad.
  Var<Scalar> record(Tensor<Scalar> value, bool any_input_requires_grad, BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced by graph node " + std::to_string(nodes_.size()));
    }
    const bool rg = grad_enabled_ && any_input_requires_grad;
    return push(std::move(value), nullptr, rg, rg ? std::move(backward) : BackwardFn{});
  }

  const Tensor<Scalar>& value(Index id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.borrowed ? *n.borrowed : n.owned;
  }
  bool requires_grad(Index id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  template <typename Derived>
  void accumulate(const Var<Scalar>& v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (!n.requires_grad) return;
    const Tensor<Scalar>& val = value(v.id());
    if (n.grad.empty()) {
      n.grad.resize(static_cast<std::size_t>(val.size()));
      MatrixMap<Scalar>(n.grad.data(), val.rows(), val.cols()) = g;
    } else {
      MatrixMap<Scalar>(n.grad.data(), val.rows(), val.cols()) += g;
    }
  }

  /// Adds `g` into rows [begin, begin + g.rows()) of v's gradient.
  template <typename Derived>
  void accumulate_rows(const Var<Scalar>& v, Index begin, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (!n.requires_grad) return;
    const Tensor<Scalar>& val = value(v.id());
    if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(val.size()), Scalar(0));
    MatrixMap<Scalar>(n.grad.data(), val.rows(), val.cols()).middleRows(begin, g.rows()) += g;
  }

  /// accumulate(v, lhs * rhs) without materializing the product first.
  template <typename L, typename R>
  void accumulate_product(const Var<Scalar>& v, const L& lhs, const R& rhs) {
    Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (!n.requires_grad) return;
    const Tensor<Scalar>& val = value(v.id());
    const bool fresh = n.grad.empty();
    if (fresh) n.grad.resize(static_cast<std::size_t>(val.size()));
    MatrixMap<Scalar> dst(n.grad.data(), val.rows(), val.cols());
    if (fresh) {
      dst.noalias() = lhs * rhs;
    } else {
      dst.noalias() += lhs * rhs;
    }
  }

  /// Gradient of the last backward() target with respect to `v`; zeros if untouched.
  Tensor<Scalar> grad(const Var<Scalar>& v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id())];
    const Tensor<Scalar>& val = value(v.id());
    if (n.grad.empty()) return Tensor<Scalar>(val.shape());
    Tensor<Scalar> out(val.shape());
    std::copy(n.grad.begin(), n.grad.end(), out.data().begin());
    return out;
  }
  bool has_grad(const Var<Scalar>& v) const { return !nodes_[static_cast<std::size_t>(v.id())].grad.empty(); }

  void backward(const Var<Scalar>& target) {
    if (!grad_enabled_) throw ConfigError("backward() on a graph built without gradients");
    if (target.value().size() != 1) {
      throw DimensionError("backward() needs a scalar target, got " + shape_string(target.shape()));
    }
    if (!requires_grad(target.id())) return;
    accumulate(target, Matrix<Scalar>::Constant(1, 1, Scalar(1)));
    for (Index id = target.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.backward || n.grad.empty()) continue;
      const Tensor<Scalar>& val = value(id);
      n.backward(*this, GradMap(n.grad.data(), val.rows(), val.cols()));
    }
  }

  /// Add every borrowed parameter's gradient into the parameter's own grad buffer,
  /// in the order the parameters were first borrowed.
  void accumulate_parameter_grads() {
    for (auto& [id, param] : params_) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.empty()) continue;
      auto& dst = param->grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    }
  }

 private:
  struct Node {
    Tensor<Scalar> owned;
    const Tensor<Scalar>* borrowed = nullptr;
    Buffer<Scalar> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<Scalar> push(Tensor<Scalar> value, const Tensor<Scalar>* borrowed, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), borrowed, {}, rg, std::move(fn)});
    return Var<Scalar>(this, static_cast<Index>(nodes_.size()) - 1);
  }

  std::deque<Node> nodes_;
  std::vector<std::pair<Index, Tensor<Scalar>*>> params_;
  bool grad_enabled_;
};

namespace detail {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <typename Scalar>
void require_row_vector(const Var<Scalar>& r, Index cols, const char* op) {
  if (r.value().size() != cols) {
    throw DimensionError(std::string(op) + ": expected a row of " + std::to_string(cols) + " values, got " +
                         shape_string(r.shape()));
  }
}

/// A tensor's storage viewed as one compile-time row vector.
template <typename Scalar>
Eigen::Map<const RowVector<Scalar>> as_row(const Var<Scalar>& v) {
  return Eigen::Map<const RowVector<Scalar>>(v.value().data().data(), v.value().size());
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor<Scalar> out({a.rows(), b.cols()}, uninitialized);
  out.matrix().noalias() = a.m() * b.m();
  return a.graph().record(std::move(out), a.requires_grad() || b.requires_grad(),
                          [a, b](Graph<Scalar>& g, auto grad) {
                            if (a.requires_grad()) g.accumulate_product(a, grad, b.m().transpose());
                            if (b.requires_grad()) g.accumulate_product(b, a.m().transpose(), grad);
                          });
}

/// x W + b for x [n x in], W [in x out], b [out].
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b) {
  if (x.cols() != w.rows()) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(w.shape()));
  }
  detail::require_row_vector(b, w.cols(), "linear bias");
  Shape shape = x.shape();
  shape.back() = w.cols();
  Tensor<Scalar> out(std::move(shape), uninitialized);
  out.matrix().noalias() = x.m() * w.m();
  out.matrix().rowwise() += detail::as_row(b);
  return x.graph().record(std::move(out), x.requires_grad() || w.requires_grad() || b.requires_grad(),
                          [x, w, b](Graph<Scalar>& g, auto grad) {
                            if (x.requires_grad()) g.accumulate_product(x, grad, w.m().transpose());
                            if (w.requires_grad()) g.accumulate_product(w, x.m().transpose(), grad);
                            if (b.requires_grad()) g.accumulate(b, grad.colwise().sum().template reshaped<Eigen::RowMajor>(b.rows(), b.cols()));
                          });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<Scalar> out(a.shape(), uninitialized);
  out.matrix() = a.m() + b.m();
  return a.graph().record(std::move(out), a.requires_grad() || b.requires_grad(),
                          [a, b](Graph<Scalar>& g, auto grad) {
                            g.accumulate(a, grad);
                            g.accumulate(b, grad);
                          });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<Scalar> out(a.shape(), uninitialized);
  out.matrix() = a.m() - b.m();
  return a.graph().record(std::move(out), a.requires_grad() || b.requires_grad(),
                          [a, b](Graph<Scalar>& g, auto grad) {
                            g.accumulate(a, grad);
                            g.accumulate(b, -grad);
                          });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<Scalar> out(a.shape(), uninitialized);
  out.matrix() = a.m().cwiseProduct(b.m());
  return a.graph().record(std::move(out), a.requires_grad() || b.requires_grad(),
                          [a, b](Graph<Scalar>& g, auto grad) {
                            if (a.requires_grad()) g.accumulate(a, grad.cwiseProduct(b.m()));
                            if (b.requires_grad()) g.accumulate(b, grad.cwiseProduct(a.m()));
                          });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar c) {
  Tensor<Scalar> out(a.shape(), uninitialized);
  out.matrix() = a.m() * c;
  return a.graph().record(std::move(out), a.requires_grad(),
                          [a, c](Graph<Scalar>& g, auto grad) { g.accumulate(a, grad * c); });
}

/// Adds a row vector to every row.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& r) {
  detail::require_row_vector(r, a.cols(), "add_row");
  Tensor<Scalar> out(a.shape(), uninitialized);
  out.matrix() = a.m().rowwise() + detail::as_row(r);
  return a.graph().record(std::move(out), a.requires_grad() || r.requires_grad(),
                          [a, r](Graph<Scalar>& g, auto grad) {
                            g.accumulate(a, grad);
                            if (r.requires_grad()) g.accumulate(r, grad.colwise().sum().template reshaped<Eigen::RowMajor>(r.rows(), r.cols()));
                          });
}

/// Per-column affine map s * scale + shift applied to every row.
template <typename Scalar>
Var<Scalar> scale_shift_rows(const Var<Scalar>& s, const Var<Scalar>& scale_row, const Var<Scalar>& shift_row) {
  const Index d = s.cols();
  detail::require_row_vector(scale_row, d, "scale_shift_rows scale");
  detail::require_row_vector(shift_row, d, "scale_shift_rows shift");
  Tensor<Scalar> out(s.shape(), uninitialized);
  const auto alpha = detail::as_row(scale_row);
  const auto beta = detail::as_row(shift_row);
  out.matrix() = (s.m().array().rowwise() * alpha.array()).rowwise() + beta.array();
  return s.graph().record(
      std::move(out), s.requires_grad() || scale_row.requires_grad() || shift_row.requires_grad(),
      [s, scale_row, shift_row](Graph<Scalar>& g, auto grad) {
        if (s.requires_grad()) {
          g.accumulate(s, (grad.array().rowwise() * detail::as_row(scale_row).array()).matrix());
        }
        if (scale_row.requires_grad()) {
          g.accumulate(scale_row,
                       grad.cwiseProduct(s.m()).colwise().sum().template reshaped<Eigen::RowMajor>(scale_row.rows(), scale_row.cols()));
        }
        if (shift_row.requires_grad()) {
          g.accumulate(shift_row, grad.colwise().sum().template reshaped<Eigen::RowMajor>(shift_row.rows(), shift_row.cols()));
        }
      });
}

/// Adds a constant to every element.
template <typename Scalar>
Var<Scalar> add_constant(const Var<Scalar>& a, Scalar c) {
  Tensor<Scalar> out(a.shape(), uninitialized);
  out.matrix() = a.m().array() + c;
  return a.graph().record(std::move(out), a.requires_grad(),
                          [a](Graph<Scalar>& g, auto grad) { g.accumulate(a, grad); });
}

template <typename Scalar>
Scalar silu_value(Scalar x) {
  return x * detail::sigmoid(x);
}

template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& x) {
  // Array expressions so Eigen can vectorize the exponential.
  Tensor<Scalar> out(x.shape(), uninitialized);
  const auto xa = x.m().array();
  out.matrix().array() = xa / (Scalar(1) + (-xa).exp());
  return x.graph().record(std::move(out), x.requires_grad(), [x](Graph<Scalar>& g, auto grad) {
    const auto xa = x.m().array();
    const auto s = (Scalar(1) + (-xa).exp()).inverse();
    g.accumulate(x, (grad.array() * (s * (Scalar(1) + xa * (Scalar(1) - s)))).matrix());
  });
}

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kLayerNormEps = 1e-6;

/// Row-wise normalization to zero mean and unit variance, without affine terms.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x) {
  const Index n = x.rows();
  const Index d = x.cols();
  Matrix<Scalar> xhat(n, d);
  RowVector<Scalar> inv_std(n);
  for (Index r = 0; r < n; ++r) {
    const auto row = x.m().row(r);
    const Scalar mean = row.mean();
    const Scalar var = (row.array() - mean).square().mean();
    inv_std[r] = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
    xhat.row(r) = (row.array() - mean) * inv_std[r];
  }
  auto out = Tensor<Scalar>::from_matrix(x.shape(), xhat);
  return x.graph().record(std::move(out), x.requires_grad(),
                          [x, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<Scalar>& g, auto grad) {
                            Matrix<Scalar> gx(grad.rows(), grad.cols());
                            for (Index r = 0; r < grad.rows(); ++r) {
                              const Scalar gmean = grad.row(r).mean();
                              const Scalar gxmean = grad.row(r).cwiseProduct(xhat.row(r)).mean();
                              gx.row(r) = inv_std[r] * (grad.row(r).array() - gmean - xhat.row(r).array() * gxmean);
                            }
                            g.accumulate(x, gx);
                          });
}

/// Numerically stable softmax of each row.
template <typename Scalar, typename Derived>
void softmax_rows_inplace(Eigen::MatrixBase<Derived>& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const Scalar mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& x) {
  Matrix<Scalar> p = x.m();
  softmax_rows_inplace<Scalar>(p);
  auto out = Tensor<Scalar>::from_matrix(x.shape(), p);
  return x.graph().record(std::move(out), x.requires_grad(), [x, p = std::move(p)](Graph<Scalar>& g, auto grad) {
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rowdot = grad.cwiseProduct(p).rowwise().sum();
    g.accumulate(x, p.cwiseProduct(grad.colwise() - rowdot));
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Per-head attention weights, [heads] x [queries x keys].
template <typename Scalar>
using AttentionWeights = std::vector<Matrix<Scalar>>;

/// Multi-head scaled dot-product attention over already-projected Q, K, V.
///
/// Columns are split into `heads` contiguous groups. When `record` is non-null
/// it receives the softmax weights of every head; recording only copies them.
template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, Index heads,
                      AttentionWeights<Scalar>* record = nullptr) {
  const Index d = q.cols();
  if (heads <= 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw DimensionError("attention: incompatible q/k/v shapes " + shape_string(q.shape()) + ", " +
                         shape_string(k.shape()) + ", " + shape_string(v.shape()));
  }
  const Index hd = d / heads;
  const Scalar s = Scalar(1) / std::sqrt(Scalar(hd));
  auto probs = std::make_shared<AttentionWeights<Scalar>>(static_cast<std::size_t>(heads));
  Matrix<Scalar> out(q.rows(), d);
  for (Index h = 0; h < heads; ++h) {
    Matrix<Scalar>& p = (*probs)[static_cast<std::size_t>(h)];
    p.noalias() = (q.m().middleCols(h * hd, hd) * k.m().middleCols(h * hd, hd).transpose()) * s;
    softmax_rows_inplace<Scalar>(p);
    out.middleCols(h * hd, hd).noalias() = p * v.m().middleCols(h * hd, hd);
  }
  if (record) *record = *probs;
  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  return q.graph().record(Tensor<Scalar>::from_matrix(out), rg,
                          [q, k, v, heads, hd, s, probs](Graph<Scalar>& g, auto grad) {
                            Matrix<Scalar> gq = Matrix<Scalar>::Zero(q.rows(), q.cols());
                            Matrix<Scalar> gk = Matrix<Scalar>::Zero(k.rows(), k.cols());
                            Matrix<Scalar> gv = Matrix<Scalar>::Zero(v.rows(), v.cols());
                            Matrix<Scalar> gp;
                            for (Index h = 0; h < heads; ++h) {
                              const Matrix<Scalar>& p = (*probs)[static_cast<std::size_t>(h)];
                              const auto go = grad.middleCols(h * hd, hd);
                              gv.middleCols(h * hd, hd).noalias() = p.transpose() * go;
                              gp.noalias() = go * v.m().middleCols(h * hd, hd).transpose();
                              const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rowdot = gp.cwiseProduct(p).rowwise().sum();
                              gp = p.cwiseProduct(gp.colwise() - rowdot) * s;
                              gq.middleCols(h * hd, hd).noalias() = gp * k.m().middleCols(h * hd, hd);
                              gk.middleCols(h * hd, hd).noalias() = gp.transpose() * q.m().middleCols(h * hd, hd);
                            }
                            g.accumulate(q, gq);
                            g.accumulate(k, gk);
                            g.accumulate(v, gv);
                          });
}

// ---------------------------------------------------------------------------
// Structural

template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const Index d = parts.front().cols();
  Index n = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.cols() != d) {
      throw DimensionError("concat_rows: width mismatch " + shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    }
    n += p.rows();
    rg = rg || p.requires_grad();
  }
  Tensor<Scalar> out({n, d}, uninitialized);
  Index r = 0;
  for (const auto& p : parts) {
    out.matrix().middleRows(r, p.rows()) = p.m();
    r += p.rows();
  }
  return parts.front().graph().record(std::move(out), rg, [parts](Graph<Scalar>& g, auto grad) {
    Index row = 0;
    for (const auto& p : parts) {
      g.accumulate(p, grad.middleRows(row, p.rows()));
      row += p.rows();
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& x, Index begin, Index count) {
  if (begin < 0 || count <= 0 || begin + count > x.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_string(x.shape()));
  }
  Tensor<Scalar> out({count, x.cols()}, uninitialized);
  out.matrix() = x.m().middleRows(begin, count);
  return x.graph().record(std::move(out), x.requires_grad(),
                          [x, begin](Graph<Scalar>& g, auto grad) { g.accumulate_rows(x, begin, grad); });
}

/// Horizontal concatenation of two tensors with equal row counts.
template <typename Scalar>
Var<Scalar> concat_cols(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("concat_cols: row mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Matrix<Scalar> out(a.rows(), a.cols() + b.cols());
  out << a.m(), b.m();
  const Index ac = a.cols();
  const Index bc = b.cols();
  return a.graph().record(Tensor<Scalar>::from_matrix(out), a.requires_grad() || b.requires_grad(),
                          [a, b, ac, bc](Graph<Scalar>& g, auto grad) {
                            g.accumulate(a, grad.leftCols(ac));
                            g.accumulate(b, grad.rightCols(bc));
                          });
}

/// out.flat[i] = x.flat[index[i]]; the backward pass scatter-adds.
template <typename Scalar>
Var<Scalar> gather(const Var<Scalar>& x, std::shared_ptr<const std::vector<Index>> index, Shape out_shape) {
  if (static_cast<Index>(index->size()) != shape_size(out_shape)) {
    throw DimensionError("gather: index length does not match " + shape_string(out_shape));
  }
  Tensor<Scalar> out(std::move(out_shape), uninitialized);
  const auto src = x.value().data();
  for (std::size_t i = 0; i < index->size(); ++i) {
    const Index j = (*index)[i];
    if (j < 0 || j >= x.value().size()) throw DimensionError("gather: index out of range");
    out[static_cast<Index>(i)] = src[static_cast<std::size_t>(j)];
  }
  return x.graph().record(std::move(out), x.requires_grad(), [x, index](Graph<Scalar>& g, auto grad) {
    Matrix<Scalar> full = Matrix<Scalar>::Zero(x.rows(), x.cols());
    const Scalar* gsrc = grad.data();
    Scalar* dst = full.data();
    for (std::size_t i = 0; i < index->size(); ++i) dst[(*index)[i]] += gsrc[i];
    g.accumulate(x, full);
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  Tensor<Scalar> out = x.value().reshaped(std::move(shape));
  return x.graph().record(std::move(out), x.requires_grad(), [x](Graph<Scalar>& g, auto grad) {
    g.accumulate(x, grad.template reshaped<Eigen::RowMajor>(x.rows(), x.cols()));
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  return x.graph().record(Tensor<Scalar>::scalar(x.m().sum()), x.requires_grad(), [x](Graph<Scalar>& g, auto grad) {
    g.accumulate(x, Matrix<Scalar>::Constant(x.rows(), x.cols(), grad(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  const Scalar n = Scalar(x.value().size());
  return x.graph().record(Tensor<Scalar>::scalar(x.m().sum() / n), x.requires_grad(),
                          [x, n](Graph<Scalar>& g, auto grad) {
                            g.accumulate(x, Matrix<Scalar>::Constant(x.rows(), x.cols(), grad(0, 0) / n));
                          });
}

/// Mean squared error between equally shaped tensors.
template <typename Scalar>
Var<Scalar> mse(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "mse");
  const Scalar n = Scalar(a.value().size());
  Matrix<Scalar> diff = a.m() - b.m();
  const Scalar loss = diff.squaredNorm() / n;
  return a.graph().record(Tensor<Scalar>::scalar(loss), a.requires_grad() || b.requires_grad(),
                          [a, b, n, diff = std::move(diff)](Graph<Scalar>& g, auto grad) {
                            const Scalar c = Scalar(2) * grad(0, 0) / n;
                            if (a.requires_grad()) g.accumulate(a, diff * c);
                            if (b.requires_grad()) g.accumulate(b, diff * (-c));
                          });
}

}  // namespace modguide
