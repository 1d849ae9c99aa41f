#pragma once

#include <array>
#include <cstdint>

#include "memvit/numerics/conv.hpp"
#include "memvit/numerics/tensor.hpp"

namespace memvit {

/// Tokens of one clip (or one cached memory step) with their spatiotemporal
/// factorization. Row r of `data` is the token at the row-major position
/// decode of r over `extents`.
template <typename Scalar>
struct TokenTensor {
  Tensor<Scalar> data;  // [t*h*w, d]
  Triple extents;
  std::int64_t clip_index = 0;
  std::int64_t video_id = 0;

  TokenTensor() = default;
  TokenTensor(Tensor<Scalar> d, Triple e, std::int64_t clip = 0, std::int64_t video = 0)
      : data(std::move(d)), extents(e), clip_index(clip), video_id(video) {
    if (data.rows() != extents.volume()) {
      throw DimensionError("token tensor has " + std::to_string(data.rows()) + " rows but extents " +
                           to_string(extents) + " hold " + std::to_string(extents.volume()));
    }
  }

  Index tokens() const { return data.rows(); }
  Index channels() const { return data.cols(); }

  /// (t, h, w) of row `row`.
  Triple position(Index row) const {
    return {row / (extents.h * extents.w), (row / extents.w) % extents.h, row % extents.w};
  }

  /// Same metadata, new payload.
  TokenTensor with_data(Tensor<Scalar> d, Triple e) const { return TokenTensor(std::move(d), e, clip_index, video_id); }
};

}  // namespace memvit
