#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "memvit/numerics/ops.hpp"

namespace memvit {

/// Additive value for forbidden query/key pairs.
inline constexpr double kMaskedLogit = -1e9;

/// Multi-head scaled dot-product attention. Channels are split into `heads`
/// contiguous groups; for each head
///   softmax((Q_h K_hᵀ + bias_h) / sqrt(d_head) + mask) V_h
/// and the head outputs are concatenated. `head_bias` is empty or one
/// [N_q, N_k] tensor per head; `mask` holds 0 or kMaskedLogit.
template <typename Scalar>
Tensor<Scalar> attend(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v, Index heads,
                      std::span<const Tensor<Scalar>> head_bias = {},
                      const std::optional<Matrix<Scalar>>& mask = std::nullopt,
                      std::vector<Matrix<Scalar>>* probabilities = nullptr) {
  if (heads < 1 || q.cols() % heads != 0) {
    throw DimensionError("attend: width " + std::to_string(q.cols()) + " not divisible into " +
                         std::to_string(heads) + " heads");
  }
  if (k.cols() != q.cols() || v.cols() != q.cols()) {
    throw DimensionError("attend: head widths differ, Q " + shape_string(q.rows(), q.cols()) + " K " +
                         shape_string(k.rows(), k.cols()) + " V " + shape_string(v.rows(), v.cols()));
  }
  if (k.rows() != v.rows()) {
    throw DimensionError("attend: key/value counts differ " + shape_string(k.rows(), k.cols()) + " vs " +
                         shape_string(v.rows(), v.cols()));
  }
  if (!head_bias.empty() && static_cast<Index>(head_bias.size()) != heads) {
    throw DimensionError("attend: expected one bias per head");
  }
  if (mask) {
    if (mask->rows() != q.rows() || mask->cols() != k.rows()) {
      throw DimensionError("attend: mask " + shape_string(mask->rows(), mask->cols()) + ", expected " +
                           shape_string(q.rows(), k.rows()));
    }
    for (Index i = 0; i < mask->rows(); ++i) {
      if ((mask->row(i).array() <= Scalar(kMaskedLogit / 2)).all()) {
        throw ContractError("attend: query row " + std::to_string(i) + " has every key masked");
      }
    }
  }
  const Index dh = q.cols() / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  std::vector<Tensor<Scalar>> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    Tensor<Scalar> qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
    Tensor<Scalar> kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
    Tensor<Scalar> vh = heads == 1 ? v : slice_cols(v, h * dh, dh);
    Tensor<Scalar> logits = matmul_nt(qh, kh);
    if (!head_bias.empty()) {
      const auto& b = head_bias[static_cast<std::size_t>(h)];
      if (b.rows() != logits.rows() || b.cols() != logits.cols()) {
        throw DimensionError("attend: bias " + shape_string(b.rows(), b.cols()) + ", expected " +
                             shape_string(logits.rows(), logits.cols()));
      }
      logits = add(logits, b);
    }
    logits = scale(logits, inv_sqrt);
    if (mask) logits = add_constant(logits, *mask);
    Tensor<Scalar> p = softmax_lastdim(logits);
    if (probabilities) probabilities->push_back(p.value());
    outs.push_back(matmul(p, vh));
  }
  return heads == 1 ? outs.front() : concat_cols(outs);
}

}  // namespace memvit
