#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "memvit/numerics/tensor.hpp"

// Differentiable free functions over Tensor<Scalar>. Each op validates shapes,
// records its cost on the active ScopedOpCounter, and registers a backward
// closure when any input requires a gradient.

namespace memvit {

namespace detail {

template <typename Scalar>
Node<Scalar>& parent(Node<Scalar>& self, std::size_t i) {
  return *self.parents[i];
}

inline void require_same_shape(const char* op, Index r1, Index c1, Index r2, Index c2) {
  if (r1 != r2 || c1 != c2) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(r1, c1) + " vs " +
                         shape_string(r2, c2));
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.rows(), a.cols()) + " x " +
                         shape_string(b.rows(), b.cols()));
  }
  count_macs(static_cast<std::int64_t>(a.rows()) * a.cols() * b.cols());
  Matrix<Scalar> out = a.value() * b.value();
  return Tensor<Scalar>::from_op(std::move(out), {a, b}, [](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) pa.grad_buffer().noalias() += self.grad * pb.value.transpose();
    if (pb.requires_grad) pb.grad_buffer().noalias() += pa.value.transpose() * self.grad;
  });
}

/// a · bᵀ without materializing the transpose.
template <typename Scalar>
Tensor<Scalar> matmul_nt(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner extents differ, " + shape_string(a.rows(), a.cols()) +
                         " x " + shape_string(b.rows(), b.cols()) + "^T");
  }
  count_macs(static_cast<std::int64_t>(a.rows()) * a.cols() * b.rows());
  Matrix<Scalar> out = a.value() * b.value().transpose();
  return Tensor<Scalar>::from_op(std::move(out), {a, b}, [](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) pa.grad_buffer().noalias() += self.grad * pb.value;
    if (pb.requires_grad) pb.grad_buffer().noalias() += self.grad.transpose() * pa.value;
  });
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("add", a.rows(), a.cols(), b.rows(), b.cols());
  return Tensor<Scalar>::from_op(a.value() + b.value(), {a, b}, [](Node<Scalar>& self) {
    detail::parent(self, 0).accumulate(self.grad);
    detail::parent(self, 1).accumulate(self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("sub", a.rows(), a.cols(), b.rows(), b.cols());
  return Tensor<Scalar>::from_op(a.value() - b.value(), {a, b}, [](Node<Scalar>& self) {
    detail::parent(self, 0).accumulate(self.grad);
    detail::parent(self, 1).accumulate(-self.grad);
  });
}

/// Elementwise product.
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("mul", a.rows(), a.cols(), b.rows(), b.cols());
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return Tensor<Scalar>::from_op(std::move(out), {a, b}, [](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) pa.grad_buffer() += self.grad.cwiseProduct(pb.value);
    if (pb.requires_grad) pb.grad_buffer() += self.grad.cwiseProduct(pa.value);
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  return Tensor<Scalar>::from_op(a.value() * s, {a}, [s](Node<Scalar>& self) {
    detail::parent(self, 0).accumulate(self.grad * s);
  });
}

/// a + c where c is a constant (no gradient), e.g. an additive mask.
template <typename Scalar>
Tensor<Scalar> add_constant(const Tensor<Scalar>& a, const Matrix<Scalar>& c) {
  detail::require_same_shape("add_constant", a.rows(), a.cols(), c.rows(), c.cols());
  return Tensor<Scalar>::from_op(a.value() + c, {a}, [](Node<Scalar>& self) {
    detail::parent(self, 0).accumulate(self.grad);
  });
}

/// Adds a [1,n] row to every row of a [m,n] matrix.
template <typename Scalar>
Tensor<Scalar> add_row(const Tensor<Scalar>& a, const Tensor<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: expected [1," + std::to_string(a.cols()) + "] row, got " +
                         shape_string(row.rows(), row.cols()));
  }
  Matrix<Scalar> out = a.value().rowwise() + row.value().row(0);
  return Tensor<Scalar>::from_op(std::move(out), {a, row}, [](Node<Scalar>& self) {
    detail::parent(self, 0).accumulate(self.grad);
    auto& pr = detail::parent(self, 1);
    if (pr.requires_grad) {
      auto& g = pr.grad_buffer();
      for (Index i = 0; i < self.grad.rows(); ++i) g.row(0) += self.grad.row(i);
    }
  });
}

/// Sum of all elements, accumulated left to right in row-major order.
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  Scalar acc = 0;
  const Scalar* p = a.value().data();
  for (Index i = 0; i < a.size(); ++i) acc += p[i];
  Matrix<Scalar> out(1, 1);
  out(0, 0) = acc;
  return Tensor<Scalar>::from_op(std::move(out), {a}, [](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    if (pa.requires_grad) pa.grad_buffer().array() += self.grad(0, 0);
  });
}

/// Column means over rows: [m,n] -> [1,n]. Used for global token pooling.
template <typename Scalar>
Tensor<Scalar> mean_rows(const Tensor<Scalar>& a) {
  if (a.rows() < 1) throw DimensionError("mean_rows: empty input");
  count_elementwise(a.size());
  Matrix<Scalar> out = Matrix<Scalar>::Zero(1, a.cols());
  for (Index i = 0; i < a.rows(); ++i) out.row(0) += a.value().row(i);
  out /= static_cast<Scalar>(a.rows());
  return Tensor<Scalar>::from_op(std::move(out), {a}, [](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    if (!pa.requires_grad) return;
    auto& g = pa.grad_buffer();
    const Scalar inv = Scalar(1) / static_cast<Scalar>(g.rows());
    for (Index i = 0; i < g.rows(); ++i) g.row(i) += self.grad.row(0) * inv;
  });
}

/// Row-wise softmax with the row max subtracted first. NaN inputs propagate.
template <typename Scalar>
Tensor<Scalar> softmax_lastdim(const Tensor<Scalar>& x) {
  if (x.cols() < 1) throw DimensionError("softmax_lastdim: last extent must be >= 1");
  count_elementwise(x.size());
  Matrix<Scalar> y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const auto row = x.value().row(i);
    Scalar m = row(0);
    for (Index j = 1; j < row.size(); ++j) m = std::max(m, row(j));
    if (row.hasNaN()) m = std::numeric_limits<Scalar>::quiet_NaN();
    Scalar s = 0;
    for (Index j = 0; j < row.size(); ++j) {
      y(i, j) = std::exp(row(j) - m);
      s += y(i, j);
    }
    y.row(i) /= s;
  }
  Matrix<Scalar> saved = y;
  return Tensor<Scalar>::from_op(std::move(y), {x}, [saved = std::move(saved)](Node<Scalar>& self) {
    auto& px = detail::parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (Index i = 0; i < saved.rows(); ++i) {
      const Scalar dot = self.grad.row(i).dot(saved.row(i));
      g.row(i).array() += saved.row(i).array() * (self.grad.row(i).array() - dot);
    }
  });
}

/// Per-row normalization over channels, then affine gamma/beta ([1,d] each).
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-6)) {
  const Index n = x.rows();
  const Index d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw DimensionError("layer_norm: affine parameters must be [1," + std::to_string(d) + "]");
  }
  count_elementwise(x.size());
  Matrix<Scalar> xhat(n, d);
  RowVector<Scalar> inv_std(n);
  for (Index i = 0; i < n; ++i) {
    Scalar mean = 0;
    for (Index j = 0; j < d; ++j) mean += x.value()(i, j);
    mean /= static_cast<Scalar>(d);
    Scalar var = 0;
    for (Index j = 0; j < d; ++j) {
      const Scalar c = x.value()(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<Scalar>(d);
    inv_std(i) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mean) * inv_std(i);
  }
  Matrix<Scalar> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
                       beta.value().row(0).array();
  return Tensor<Scalar>::from_op(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<Scalar>& self) {
        auto& px = detail::parent(self, 0);
        auto& pg = detail::parent(self, 1);
        auto& pb = detail::parent(self, 2);
        const Index d = xhat.cols();
        if (px.requires_grad) {
          auto& g = px.grad_buffer();
          for (Index i = 0; i < xhat.rows(); ++i) {
            RowVector<Scalar> dxhat = self.grad.row(i).cwiseProduct(pg.value.row(0));
            const Scalar mean_d = dxhat.sum() / static_cast<Scalar>(d);
            const Scalar mean_dx = dxhat.dot(xhat.row(i)) / static_cast<Scalar>(d);
            g.row(i).array() +=
                inv_std(i) * (dxhat.array() - mean_d - xhat.row(i).array() * mean_dx);
          }
        }
        if (pg.requires_grad) {
          auto& g = pg.grad_buffer();
          for (Index i = 0; i < xhat.rows(); ++i) g.row(0) += self.grad.row(i).cwiseProduct(xhat.row(i));
        }
        if (pb.requires_grad) {
          auto& g = pb.grad_buffer();
          for (Index i = 0; i < xhat.rows(); ++i) g.row(0) += self.grad.row(i);
        }
      });
}

/// Exact (erf) GELU.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  count_elementwise(x.size());
  const Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  Matrix<Scalar> out = x.value().unaryExpr([inv_sqrt2](Scalar v) {
    return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2));
  });
  return Tensor<Scalar>::from_op(std::move(out), {x}, [inv_sqrt2](Node<Scalar>& self) {
    auto& px = detail::parent(self, 0);
    if (!px.requires_grad) return;
    const Scalar inv_sqrt_2pi = Scalar(0.39894228040143267794);
    Matrix<Scalar> d = px.value.unaryExpr([&](Scalar v) {
      return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-Scalar(0.5) * v * v);
    });
    px.grad_buffer() += self.grad.cwiseProduct(d);
  });
}

/// Vertical concatenation (token axis).
template <typename Scalar>
Tensor<Scalar> concat_rows(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(p.rows(), p.cols()) + " vs " +
                           shape_string(parts.front().rows(), cols));
    }
    rows += p.rows();
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return Tensor<Scalar>::from_op(std::move(out), parts, [offsets](Node<Scalar>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (p.requires_grad) p.grad_buffer() += self.grad.middleRows(offsets[k], p.value.rows());
    }
  });
}

/// Horizontal concatenation (channel axis).
template <typename Scalar>
Tensor<Scalar> concat_cols(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(p.rows(), p.cols()) + " vs " +
                           shape_string(rows, parts.front().cols()));
    }
    cols += p.cols();
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return Tensor<Scalar>::from_op(std::move(out), parts, [offsets](Node<Scalar>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (p.requires_grad) p.grad_buffer() += self.grad.middleCols(offsets[k], p.value.cols());
    }
  });
}

template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of " + shape_string(a.rows(), a.cols()));
  }
  Matrix<Scalar> out = a.value().middleCols(start, count);
  return Tensor<Scalar>::from_op(std::move(out), {a}, [start, count](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    if (pa.requires_grad) pa.grad_buffer().middleCols(start, count) += self.grad;
  });
}

/// out[:, j] = a[:, index[j]]. Backward scatter-adds.
template <typename Scalar>
Tensor<Scalar> gather_cols(const Tensor<Scalar>& a, std::vector<Index> index) {
  Matrix<Scalar> out(a.rows(), static_cast<Index>(index.size()));
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (index[j] < 0 || index[j] >= a.cols()) {
      throw DimensionError("gather_cols: column " + std::to_string(index[j]) + " out of " +
                           shape_string(a.rows(), a.cols()));
    }
    out.col(static_cast<Index>(j)) = a.value().col(index[j]);
  }
  return Tensor<Scalar>::from_op(std::move(out), {a}, [index = std::move(index)](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    if (!pa.requires_grad) return;
    auto& g = pa.grad_buffer();
    for (std::size_t j = 0; j < index.size(); ++j) g.col(index[j]) += self.grad.col(static_cast<Index>(j));
  });
}

/// out[i, c] = q.row(i) · table.row(index[i * C + c]), for an [Nq, C] index
/// grid of table rows. Computes only the needed dot products.
template <typename Scalar>
Tensor<Scalar> indexed_row_dot(const Tensor<Scalar>& q, const Tensor<Scalar>& table,
                               std::vector<Index> index, Index columns) {
  if (q.cols() != table.cols()) {
    throw DimensionError("indexed_row_dot: width mismatch " + shape_string(q.rows(), q.cols()) + " vs " +
                         shape_string(table.rows(), table.cols()));
  }
  if (static_cast<Index>(index.size()) != q.rows() * columns) {
    throw DimensionError("indexed_row_dot: index grid has " + std::to_string(index.size()) +
                         " entries, expected " + std::to_string(q.rows() * columns));
  }
  for (Index r : index) {
    if (r < 0 || r >= table.rows()) {
      throw ConfigError("relative offset index " + std::to_string(r) + " outside table of " +
                        std::to_string(table.rows()) + " rows");
    }
  }
  count_macs(static_cast<std::int64_t>(q.rows()) * columns * q.cols());
  Matrix<Scalar> out(q.rows(), columns);
  for (Index i = 0; i < q.rows(); ++i) {
    for (Index c = 0; c < columns; ++c) out(i, c) = q.value().row(i).dot(table.value().row(index[i * columns + c]));
  }
  return Tensor<Scalar>::from_op(std::move(out), {q, table},
                                 [index = std::move(index), columns](Node<Scalar>& self) {
                                   auto& pq = detail::parent(self, 0);
                                   auto& pt = detail::parent(self, 1);
                                   const Index rows = self.grad.rows();
                                   if (pq.requires_grad) {
                                     auto& g = pq.grad_buffer();
                                     for (Index i = 0; i < rows; ++i)
                                       for (Index c = 0; c < columns; ++c)
                                         g.row(i) += self.grad(i, c) * pt.value.row(index[i * columns + c]);
                                   }
                                   if (pt.requires_grad) {
                                     auto& g = pt.grad_buffer();
                                     for (Index i = 0; i < rows; ++i)
                                       for (Index c = 0; c < columns; ++c)
                                         g.row(index[i * columns + c]) += self.grad(i, c) * pq.value.row(i);
                                   }
                                 });
}

/// Negative log-likelihood of `target` under softmax(logits); logits is [1, C].
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, Index target) {
  if (logits.rows() != 1) throw DimensionError("cross_entropy: logits must be [1,C]");
  if (target < 0 || target >= logits.cols()) {
    throw DimensionError("cross_entropy: target " + std::to_string(target) + " outside " +
                         std::to_string(logits.cols()) + " classes");
  }
  const auto row = logits.value().row(0);
  const Scalar m = row.maxCoeff();
  Scalar s = 0;
  for (Index j = 0; j < row.size(); ++j) s += std::exp(row(j) - m);
  const Scalar lse = m + std::log(s);
  Matrix<Scalar> out(1, 1);
  out(0, 0) = lse - row(target);
  RowVector<Scalar> probs = (row.array() - lse).exp();
  return Tensor<Scalar>::from_op(std::move(out), {logits},
                                 [probs = std::move(probs), target](Node<Scalar>& self) {
                                   auto& pl = detail::parent(self, 0);
                                   if (!pl.requires_grad) return;
                                   RowVector<Scalar> g = probs;
                                   g(target) -= Scalar(1);
                                   pl.grad_buffer().row(0) += self.grad(0, 0) * g;
                                 });
}

/// Identity forward; blocks all gradient flow into x and its producers.
template <typename Scalar>
Tensor<Scalar> stop_gradient(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.value(), /*requires_grad=*/false);
}

}  // namespace memvit

namespace memvit {

/// x · w + b for x [n, d_in], w [d_in, d_out], b [1, d_out].
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
  return add_row(matmul(x, w), b);
}

}  // namespace memvit
