#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "memvit/numerics/tensor.hpp"

namespace memvit {

/// (t, h, w) triple of integers: extents, kernels, strides or paddings.
struct Triple {
  Index t = 1;
  Index h = 1;
  Index w = 1;

  Index volume() const { return t * h * w; }
  Index operator[](int axis) const { return axis == 0 ? t : (axis == 1 ? h : w); }
  Index& operator[](int axis) { return axis == 0 ? t : (axis == 1 ? h : w); }
  friend bool operator==(const Triple&, const Triple&) = default;
};

inline std::string to_string(const Triple& x) {
  return std::to_string(x.t) + "x" + std::to_string(x.h) + "x" + std::to_string(x.w);
}

/// Output extent of a strided window along one axis.
inline Index window_output_extent(Index in, Index kernel, Index stride, Index pad_before, Index pad_after) {
  return (in + pad_before + pad_after - kernel) / stride + 1;
}

/// Precomputed gather map for a 3-D depthwise window operator over a
/// token-major [T*H*W, C] matrix. taps[o * kvol + k] is the input row under
/// kernel tap k for output row o, or -1 where the tap lands in padding.
struct ConvPlan {
  Triple in;
  Triple out;
  Triple kernel;
  Triple stride;
  Triple pad_before;
  Triple pad_after;
  std::vector<Index> taps;
  std::vector<Index> valid_count;  // per output row

  ConvPlan(Triple in_, Triple kernel_, Triple stride_, Triple pad_before_, Triple pad_after_)
      : in(in_), kernel(kernel_), stride(stride_), pad_before(pad_before_), pad_after(pad_after_) {
    for (int a = 0; a < 3; ++a) {
      if (kernel[a] < 1 || stride[a] < 1 || pad_before[a] < 0 || pad_after[a] < 0) {
        throw ConfigError("window kernel/stride must be >= 1 and padding >= 0, got kernel " +
                          to_string(kernel) + " stride " + to_string(stride));
      }
      const Index e = in[a] + pad_before[a] + pad_after[a] - kernel[a];
      if (in[a] < 1 || e < 0) {
        throw ConfigError("window " + to_string(kernel) + " does not fit input extents " + to_string(in));
      }
      out[a] = e / stride[a] + 1;
    }
    const Index kvol = kernel.volume();
    taps.assign(static_cast<std::size_t>(out.volume() * kvol), -1);
    valid_count.assign(static_cast<std::size_t>(out.volume()), 0);
    Index o = 0;
    for (Index ot = 0; ot < out.t; ++ot)
      for (Index oh = 0; oh < out.h; ++oh)
        for (Index ow = 0; ow < out.w; ++ow, ++o) {
          Index k = 0;
          for (Index kt = 0; kt < kernel.t; ++kt)
            for (Index kh = 0; kh < kernel.h; ++kh)
              for (Index kw = 0; kw < kernel.w; ++kw, ++k) {
                const Index it = ot * stride.t - pad_before.t + kt;
                const Index ih = oh * stride.h - pad_before.h + kh;
                const Index iw = ow * stride.w - pad_before.w + kw;
                if (it < 0 || ih < 0 || iw < 0 || it >= in.t || ih >= in.h || iw >= in.w) continue;
                taps[static_cast<std::size_t>(o * kvol + k)] = (it * in.h + ih) * in.w + iw;
                ++valid_count[static_cast<std::size_t>(o)];
              }
        }
  }

  Index kernel_volume() const { return kernel.volume(); }
};

/// Per-channel strided convolution. `weight` is [kernel_volume, C]; when
/// absent the operator is a mean over the in-bounds window taps. Cost is
/// counted as every kernel tap (padding included) per output element.
template <typename Scalar>
Tensor<Scalar> depthwise_conv(const Tensor<Scalar>& x, const std::optional<Tensor<Scalar>>& weight,
                              const ConvPlan& plan) {
  const Index kvol = plan.kernel_volume();
  const Index channels = x.cols();
  if (x.rows() != plan.in.volume()) {
    throw DimensionError("depthwise_conv: input has " + std::to_string(x.rows()) + " rows, extents " +
                         to_string(plan.in) + " need " + std::to_string(plan.in.volume()));
  }
  if (weight && (weight->rows() != kvol || weight->cols() != channels)) {
    throw DimensionError("depthwise_conv: weight " + shape_string(weight->rows(), weight->cols()) +
                         ", expected " + shape_string(kvol, channels));
  }
  const Index n_out = plan.out.volume();
  if (weight) {
    count_macs(static_cast<std::int64_t>(n_out) * kvol * channels);
  } else {
    count_elementwise(static_cast<std::int64_t>(n_out) * kvol * channels);
  }

  Matrix<Scalar> out = Matrix<Scalar>::Zero(n_out, channels);
  const auto& xv = x.value();
  for (Index o = 0; o < n_out; ++o) {
    for (Index k = 0; k < kvol; ++k) {
      const Index src = plan.taps[static_cast<std::size_t>(o * kvol + k)];
      if (src < 0) continue;
      if (weight) {
        out.row(o) += xv.row(src).cwiseProduct(weight->value().row(k));
      } else {
        out.row(o) += xv.row(src);
      }
    }
    if (!weight) {
      const Index n = plan.valid_count[static_cast<std::size_t>(o)];
      if (n > 0) out.row(o) /= static_cast<Scalar>(n);
    }
  }

  std::vector<Tensor<Scalar>> parents{x};
  if (weight) parents.push_back(*weight);
  // The plan outlives the graph only by convention, so the closure keeps its
  // own copy of the gather map.
  return Tensor<Scalar>::from_op(
      std::move(out), std::move(parents),
      [taps = plan.taps, valid = plan.valid_count, kvol, has_weight = weight.has_value()](Node<Scalar>& self) {
        auto& px = *self.parents[0];
        Node<Scalar>* pw = has_weight ? self.parents[1].get() : nullptr;
        const Index n_out = self.grad.rows();
        Matrix<Scalar>* gx = px.requires_grad ? &px.grad_buffer() : nullptr;
        Matrix<Scalar>* gw = (pw && pw->requires_grad) ? &pw->grad_buffer() : nullptr;
        for (Index o = 0; o < n_out; ++o) {
          const Scalar mean_scale =
              has_weight ? Scalar(1) : Scalar(1) / static_cast<Scalar>(std::max<Index>(valid[o], 1));
          for (Index k = 0; k < kvol; ++k) {
            const Index src = taps[static_cast<std::size_t>(o * kvol + k)];
            if (src < 0) continue;
            if (gx) {
              if (has_weight) {
                gx->row(src) += self.grad.row(o).cwiseProduct(pw->value.row(k));
              } else {
                gx->row(src) += self.grad.row(o) * mean_scale;
              }
            }
            if (gw) gw->row(k) += self.grad.row(o).cwiseProduct(px.value.row(src));
          }
        }
      });
}

}  // namespace memvit
