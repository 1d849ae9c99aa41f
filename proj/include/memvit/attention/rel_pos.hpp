#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <vector>

#include "memvit/numerics/ops.hpp"
#include "memvit/numerics/conv.hpp"

namespace memvit {

/// Decomposed relative position embeddings, one table per axis, shared by
/// all heads of a layer. Axis table `a` has 2*max[a]-1 rows indexed by
/// (query - key) + max[a] - 1.
template <typename Scalar>
struct RelPosTable {
  Triple max;
  Tensor<Scalar> t;  // [2*max.t-1, d_head]
  Tensor<Scalar> h;
  Tensor<Scalar> w;

  const Tensor<Scalar>& axis(int a) const { return a == 0 ? t : (a == 1 ? h : w); }
};

/// bias[i, j] = q_i · (r_t[Δt] + r_h[Δh] + r_w[Δw]) where Δ = query position
/// minus key position. Positions are integers in a common grid; temporal
/// positions of memory keys are negative (earlier clips).
///
/// Per axis only the distinct key coordinates are dotted against the
/// queries, then expanded to all keys.
template <typename Scalar>
Tensor<Scalar> rel_pos_bias(const Tensor<Scalar>& q, std::span<const Triple> query_positions,
                            std::span<const Triple> key_positions, const RelPosTable<Scalar>& table) {
  if (static_cast<Index>(query_positions.size()) != q.rows()) {
    throw DimensionError("rel_pos_bias: " + std::to_string(query_positions.size()) + " query positions for " +
                         std::to_string(q.rows()) + " queries");
  }
  std::optional<Tensor<Scalar>> total;
  for (int a = 0; a < 3; ++a) {
    std::vector<Index> coords;
    coords.reserve(key_positions.size());
    for (const auto& p : key_positions) coords.push_back(p[a]);
    std::vector<Index> distinct = coords;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

    const Index n = static_cast<Index>(distinct.size());
    const Index offset = table.max[a] - 1;
    std::vector<Index> grid(static_cast<std::size_t>(q.rows() * n));
    for (Index i = 0; i < q.rows(); ++i) {
      for (Index c = 0; c < n; ++c) {
        const Index delta = query_positions[static_cast<std::size_t>(i)][a] - distinct[static_cast<std::size_t>(c)];
        const Index row = delta + offset;
        if (row < 0 || row >= table.axis(a).rows()) {
          throw ConfigError("relative offset " + std::to_string(delta) + " on axis " + std::to_string(a) +
                            " exceeds table range ±" + std::to_string(offset));
        }
        grid[static_cast<std::size_t>(i * n + c)] = row;
      }
    }
    std::vector<Index> expand(coords.size());
    for (std::size_t j = 0; j < coords.size(); ++j) {
      expand[j] = std::lower_bound(distinct.begin(), distinct.end(), coords[j]) - distinct.begin();
    }
    auto axis_bias = gather_cols(indexed_row_dot(q, table.axis(a), std::move(grid), n), std::move(expand));
    total = total ? add(*total, axis_bias) : axis_bias;
  }
  return *total;
}

}  // namespace memvit
