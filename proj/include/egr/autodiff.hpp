#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// Every operation appends a node to a Tape. Nodes are recorded in
// topological order, so Tape::backward() walks them in reverse and each
// node pushes its accumulated gradient to its inputs.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <utility>
#include <vector>

#include "egr/error.hpp"

namespace egr::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Input or parameter node; receives gradient but has no parents.
  Var leaf(Matrix value) { return record(std::move(value), nullptr); }

  Var record(Matrix value, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), false, std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }

  const Matrix& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  void backward() {
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool has_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline const Matrix& Var::grad() const { return tape_->grad(id_); }

namespace detail {
inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error(std::string("shape mismatch in ") + op);
}
}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw Error("shape mismatch in matmul");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() * b.value(), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g * t.value(ib).transpose());
    t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::same_shape(a, b, "add");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() + b.value(), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape(a, b, "sub");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() - b.value(), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

/// a (m x n) + b (m x 1) broadcast over columns.
inline Var add_colwise(const Var& a, const Var& b) {
  if (b.cols() != 1 || b.rows() != a.rows()) throw Error("shape mismatch in add_colwise");
  const auto ia = a.id(), ib = b.id();
  Matrix out = a.value().colwise() + b.value().col(0);
  return a.tape()->record(std::move(out), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g.rowwise().sum());
  });
}

inline Var scale(const Var& a, double s) {
  const auto ia = a.id();
  return a.tape()->record(a.value() * s, [ia, s](Tape& t, const Matrix& g) { t.accumulate(ia, g * s); });
}

inline Var add_scalar(const Var& a, double c) {
  const auto ia = a.id();
  return a.tape()->record(a.value().array() + c, [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g); });
}

/// a * s for a 1x1 variable s.
inline Var mul_scalar(const Var& a, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1) throw Error("mul_scalar expects a 1x1 scalar");
  const auto ia = a.id(), is = s.id();
  return a.tape()->record(a.value() * s.value()(0, 0), [ia, is](Tape& t, const Matrix& g) {
    t.accumulate(ia, g * t.value(is)(0, 0));
    Matrix gs(1, 1);
    gs(0, 0) = g.cwiseProduct(t.value(ia)).sum();
    t.accumulate(is, gs);
  });
}

inline Var cmul(const Var& a, const Var& b) {
  detail::same_shape(a, b, "cmul");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value().cwiseProduct(b.value()), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

/// Scales column c of a (r x n) by s(0, c) (s is 1 x n).
inline Var mul_rowbcast(const Var& a, const Var& s) {
  if (s.rows() != 1 || s.cols() != a.cols()) throw Error("shape mismatch in mul_rowbcast");
  const auto ia = a.id(), is = s.id();
  Matrix out = a.value() * s.value().row(0).asDiagonal();
  return a.tape()->record(std::move(out), [ia, is](Tape& t, const Matrix& g) {
    t.accumulate(ia, g * t.value(is).row(0).asDiagonal());
    t.accumulate(is, g.cwiseProduct(t.value(ia)).colwise().sum());
  });
}

inline Var reciprocal(const Var& a) {
  const auto ia = a.id();
  Matrix out = a.value().cwiseInverse();
  return a.tape()->record(out, [ia, out](Tape& t, const Matrix& g) {
    t.accumulate(ia, -g.cwiseProduct(out.cwiseProduct(out)));
  });
}

inline Var sigmoid(const Var& a) {
  const auto ia = a.id();
  Matrix out = a.value().unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  return a.tape()->record(out, [ia, out](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseProduct(out.cwiseProduct((1.0 - out.array()).matrix())));
  });
}

inline Var leaky_relu(const Var& a, double slope) {
  const auto ia = a.id();
  Matrix out = a.value().unaryExpr([slope](double v) { return v > 0 ? v : slope * v; });
  return a.tape()->record(std::move(out), [ia, slope](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(ia);
    t.accumulate(ia, g.binaryExpr(x, [slope](double gv, double xv) { return xv > 0 ? gv : slope * gv; }));
  });
}

/// Normalizes each column over its rows, then applies gain/offset (m x 1).
inline Var layer_norm(const Var& a, const Var& gain, const Var& offset, double eps = 1e-5) {
  const Eigen::Index m = a.rows();
  if (gain.rows() != m || offset.rows() != m || gain.cols() != 1 || offset.cols() != 1)
    throw Error("shape mismatch in layer_norm");
  const auto ia = a.id(), ig = gain.id(), ib = offset.id();
  const Matrix& x = a.value();
  const Eigen::RowVectorXd mean = x.colwise().mean();
  Matrix centered = x.rowwise() - mean;
  const Eigen::RowVectorXd var = centered.colwise().squaredNorm() / static_cast<double>(m);
  const Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix xhat = centered * inv_std.asDiagonal();
  Matrix out = (xhat.array().colwise() * gain.value().col(0).array()).colwise() + offset.value().col(0).array();
  return a.tape()->record(std::move(out), [ia, ig, ib, xhat, inv_std](Tape& t, const Matrix& g) {
    t.accumulate(ib, g.rowwise().sum());
    t.accumulate(ig, g.cwiseProduct(xhat).rowwise().sum());
    const Matrix gx = g.array().colwise() * t.value(ig).col(0).array();
    const Eigen::RowVectorXd mean_g = gx.colwise().mean();
    const Eigen::RowVectorXd mean_gx = gx.cwiseProduct(xhat).colwise().mean();
    Matrix dx = gx.rowwise() - mean_g;
    dx -= xhat * mean_gx.asDiagonal();
    t.accumulate(ia, dx * inv_std.asDiagonal());
  });
}

/// Columns a[:, idx[k]].
inline Var gather_cols(const Var& a, std::vector<int> idx) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = x.col(idx[k]);
  const auto ia = a.id();
  const Eigen::Index rows = x.rows(), cols = x.cols();
  return a.tape()->record(std::move(out), [ia, idx = std::move(idx), rows, cols](Tape& t, const Matrix& g) {
    Matrix ga = Matrix::Zero(rows, cols);
    for (std::size_t k = 0; k < idx.size(); ++k) ga.col(idx[k]) += g.col(static_cast<Eigen::Index>(k));
    t.accumulate(ia, ga);
  });
}

/// out[:, i] = mean of a[:, e] over edges e with seg[e] == i (zero if none).
inline Var segment_mean(const Var& a, std::vector<int> seg, Eigen::Index n) {
  const Matrix& x = a.value();
  if (static_cast<std::size_t>(x.cols()) != seg.size()) throw Error("shape mismatch in segment_mean");
  Eigen::VectorXd inv_count = Eigen::VectorXd::Zero(n);
  for (int s : seg) inv_count(s) += 1.0;
  for (Eigen::Index i = 0; i < n; ++i) inv_count(i) = inv_count(i) > 0 ? 1.0 / inv_count(i) : 0.0;
  Matrix out = Matrix::Zero(x.rows(), n);
  for (std::size_t e = 0; e < seg.size(); ++e) out.col(seg[e]) += x.col(static_cast<Eigen::Index>(e));
  out = out * inv_count.asDiagonal();
  const auto ia = a.id();
  return a.tape()->record(std::move(out), [ia, seg = std::move(seg), inv_count](Tape& t, const Matrix& g) {
    Matrix ga(g.rows(), static_cast<Eigen::Index>(seg.size()));
    for (std::size_t e = 0; e < seg.size(); ++e)
      ga.col(static_cast<Eigen::Index>(e)) = g.col(seg[e]) * inv_count(seg[e]);
    t.accumulate(ia, ga);
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_rows of nothing");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw Error("shape mismatch in concat_rows");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.id(), p.rows());
    r += p.rows();
  }
  return parts.front().tape()->record(std::move(out), [spans](Tape& t, const Matrix& g) {
    Eigen::Index row = 0;
    for (const auto& [id, n] : spans) {
      t.accumulate(id, g.middleRows(row, n));
      row += n;
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_cols of nothing");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw Error("shape mismatch in concat_cols");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    spans.emplace_back(p.id(), p.cols());
    c += p.cols();
  }
  return parts.front().tape()->record(std::move(out), [spans](Tape& t, const Matrix& g) {
    Eigen::Index col = 0;
    for (const auto& [id, n] : spans) {
      t.accumulate(id, g.middleCols(col, n));
      col += n;
    }
  });
}

inline Var slice_cols(const Var& a, Eigen::Index begin, Eigen::Index count) {
  const auto ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return a.tape()->record(a.value().middleCols(begin, count), [ia, begin, count, rows, cols](Tape& t, const Matrix& g) {
    Matrix ga = Matrix::Zero(rows, cols);
    ga.middleCols(begin, count) = g;
    t.accumulate(ia, ga);
  });
}

inline Var transpose(const Var& a) {
  const auto ia = a.id();
  return a.tape()->record(a.value().transpose(), [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g.transpose()); });
}

/// Per-column squared Euclidean norm, 1 x n.
inline Var col_sqnorm(const Var& a) {
  const auto ia = a.id();
  return a.tape()->record(a.value().colwise().squaredNorm(), [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, 2.0 * t.value(ia) * g.row(0).asDiagonal());
  });
}

/// Per-column Euclidean norm, 1 x n. The gradient at a zero column is taken as 0.
inline Var col_norm(const Var& a) {
  const auto ia = a.id();
  Matrix out = a.value().colwise().norm();
  return a.tape()->record(out, [ia, out](Tape& t, const Matrix& g) {
    Eigen::RowVectorXd s(out.cols());
    for (Eigen::Index c = 0; c < out.cols(); ++c) s(c) = out(0, c) > 0 ? g(0, c) / out(0, c) : 0.0;
    t.accumulate(ia, t.value(ia) * s.asDiagonal());
  });
}

/// Softmax down each column.
inline Var softmax_cols(const Var& a) {
  Matrix out = a.value();
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    const double mx = out.col(c).maxCoeff();
    out.col(c) = (out.col(c).array() - mx).exp().matrix();
    out.col(c) /= out.col(c).sum();
  }
  const auto ia = a.id();
  return a.tape()->record(out, [ia, out](Tape& t, const Matrix& g) {
    const Eigen::RowVectorXd dot = g.cwiseProduct(out).colwise().sum();
    t.accumulate(ia, out.cwiseProduct(g.rowwise() - dot));
  });
}

}  // namespace egr::ad
