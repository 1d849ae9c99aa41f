#pragma once

#include <optional>

#include "memvit/attention/token_tensor.hpp"
#include "memvit/numerics/conv.hpp"

namespace memvit {

/// Spatiotemporal window over tokens. Padding is symmetric except on the
/// temporal axis of a causal window, where all 2*p_t frames of padding go
/// before the sequence so each output only sees current or past frames.
struct PoolSpec {
  Triple kernel{1, 1, 1};
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};
  bool learnable = true;
  bool causal = false;

  bool is_identity() const { return kernel.volume() == 1 && stride.volume() == 1; }
  Triple pad_before() const {
    Triple p = padding;
    if (causal) p.t = 2 * padding.t;
    return p;
  }
  Triple pad_after() const {
    Triple p = padding;
    if (causal) p.t = 0;
    return p;
  }
  ConvPlan plan(Triple in) const { return ConvPlan(in, kernel, stride, pad_before(), pad_after()); }
  Triple output_extents(Triple in) const {
    Triple out;
    for (int a = 0; a < 3; ++a) {
      out[a] = window_output_extent(in[a], kernel[a], stride[a], pad_before()[a], pad_after()[a]);
      if (out[a] < 1) {
        throw ConfigError("pooling " + to_string(kernel) + "/" + to_string(stride) + " over " + to_string(in) +
                          " yields an empty axis");
      }
    }
    return out;
  }
};

/// Pools tokens per channel. `weight` ([kernel volume, d]) must be present
/// iff the spec is learnable; a non-learnable spec averages in-bounds taps.
template <typename Scalar>
TokenTensor<Scalar> pool(const TokenTensor<Scalar>& x, const PoolSpec& spec,
                         const std::optional<Tensor<Scalar>>& weight = std::nullopt) {
  if (spec.learnable != weight.has_value()) {
    throw ContractError(spec.learnable ? "learnable pooling needs a kernel parameter"
                                       : "mean pooling takes no kernel parameter");
  }
  spec.output_extents(x.extents);
  const ConvPlan plan = spec.plan(x.extents);
  return x.with_data(depthwise_conv(x.data, weight, plan), plan.out);
}

/// Output extents of compressing `in` by `factor`: ceil on every axis.
inline Triple compressed_extents(Triple in, Triple factor) {
  Triple out;
  for (int a = 0; a < 3; ++a) out[a] = (in[a] + factor[a] - 1) / factor[a];
  return out;
}

/// Window geometry of the compression module: kernel = stride = factor,
/// zero padding only at the end of an axis that is not divisible.
inline ConvPlan compression_plan(Triple in, Triple factor) {
  for (int a = 0; a < 3; ++a) {
    if (factor[a] < 1) throw ConfigError("compression factor " + to_string(factor) + " has a component < 1");
  }
  const Triple out = compressed_extents(in, factor);
  Triple pad_after;
  for (int a = 0; a < 3; ++a) pad_after[a] = out[a] * factor[a] - in[a];
  return ConvPlan(in, factor, factor, Triple{0, 0, 0}, pad_after);
}

/// Learnable memory compression (f_K / f_V): non-overlapping depthwise
/// pooling that keeps the channel width.
template <typename Scalar>
TokenTensor<Scalar> compress(const TokenTensor<Scalar>& kv, const Tensor<Scalar>& weight, Triple factor) {
  const ConvPlan plan = compression_plan(kv.extents, factor);
  return kv.with_data(depthwise_conv(kv.data, std::optional<Tensor<Scalar>>(weight), plan), plan.out);
}

}  // namespace memvit
