#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "memvit/attention/attend.hpp"
#include "memvit/attention/pool.hpp"
#include "memvit/attention/rel_pos.hpp"
#include "memvit/attention/token_tensor.hpp"
#include "memvit/memory/memory_bank.hpp"
#include "memvit/numerics/init.hpp"
#include "memvit/numerics/ops.hpp"

namespace memvit {

struct AttentionLayerConfig {
  Index d_in = 0;
  Index d_out = 0;
  Index heads = 1;
  Triple input_extents;
  PoolSpec pool_q;   // identity spec: queries are the input tokens
  PoolSpec pool_kv;  // shared geometry of the K and V pooling
  bool memory_enabled = false;
  Index memory_len = 0;
  Triple compression_factor{4, 2, 2};
  bool causal = false;
  bool rel_pos_enabled = true;
  double rel_pos_init_std = 0.02;

  bool uses_memory() const { return memory_enabled && memory_len > 0; }
  bool compresses() const { return uses_memory() && compression_factor.volume() > 1; }
  Triple query_extents() const { return pool_q.is_identity() ? input_extents : pool_q.output_extents(input_extents); }
  Triple kv_extents() const { return pool_kv.is_identity() ? input_extents : pool_kv.output_extents(input_extents); }
  /// Positions of pooled tokens are measured on the input token grid.
  Triple query_scale() const { return pool_q.is_identity() ? Triple{1, 1, 1} : pool_q.stride; }
  Triple kv_scale() const { return pool_kv.is_identity() ? Triple{1, 1, 1} : pool_kv.stride; }
  /// Relative-position table half-extents: temporal distance spans the
  /// current clip plus M cached clips.
  Triple rel_pos_max() const {
    const Index steps = uses_memory() ? memory_len : 0;
    return {(steps + 1) * input_extents.t, input_extents.h, input_extents.w};
  }

  void validate() const {
    if (d_in < 1 || d_out < 1 || heads < 1) throw ConfigError("attention widths and heads must be positive");
    if (d_out % heads != 0) {
      throw ConfigError("d_out " + std::to_string(d_out) + " not divisible by " + std::to_string(heads) + " heads");
    }
    if (memory_len < 0) throw ConfigError("memory length must be non-negative");
    for (int a = 0; a < 3; ++a) {
      if (compression_factor[a] < 1) throw ConfigError("compression factor component < 1");
    }
    query_extents();
    kv_extents();
  }
};

/// Per-forward options for one attention layer.
template <typename Scalar>
struct AttentionContext {
  Index dropped_oldest = 0;                               // memory-drop augmentation
  std::vector<Matrix<Scalar>>* probabilities = nullptr;  // per-head softmax, if wanted
};

template <typename Scalar>
struct AttentionOutput {
  TokenTensor<Scalar> tokens;
  Index attended_keys = 0;
  Index memory_keys = 0;
  Index compressions = 0;  // f_K/f_V applications inside the graph this step
};

/// Pooled-before-linear projections of one clip.
template <typename Scalar>
struct PooledQkv {
  TokenTensor<Scalar> q_bar, k_bar, v_bar;  // after pooling, before W_Q/W_K/W_V
  Tensor<Scalar> q, k, v;                   // after the linear layers
};

/// Pooling attention layer with optional per-layer key/value memory and
/// pipelined memory compression.
template <typename Scalar>
class MemoryAttention {
 public:
  MemoryAttention(AttentionLayerConfig cfg, int layer_id, const std::string& prefix, Initializer& init)
      : cfg_(std::move(cfg)), layer_id_(layer_id) {
    cfg_.validate();
    const Index din = cfg_.d_in;
    const Index dout = cfg_.d_out;
    if (!cfg_.pool_q.is_identity() && cfg_.pool_q.learnable) {
      pool_q_ = Parameter<Scalar>(prefix + ".pool_q",
                                  Initializer::constant<Scalar>(cfg_.pool_q.kernel.volume(), din,
                                                                1.0 / static_cast<double>(cfg_.pool_q.kernel.volume())));
    }
    if (!cfg_.pool_kv.is_identity() && cfg_.pool_kv.learnable) {
      const Index kv = cfg_.pool_kv.kernel.volume();
      pool_k_ = Parameter<Scalar>(prefix + ".pool_k", Initializer::constant<Scalar>(kv, din, 1.0 / static_cast<double>(kv)));
      pool_v_ = Parameter<Scalar>(prefix + ".pool_v", Initializer::constant<Scalar>(kv, din, 1.0 / static_cast<double>(kv)));
    }
    w_q_ = Parameter<Scalar>(prefix + ".w_q", init.truncated_normal<Scalar>(din, dout));
    b_q_ = Parameter<Scalar>(prefix + ".b_q", Matrix<Scalar>::Zero(1, dout));
    w_k_ = Parameter<Scalar>(prefix + ".w_k", init.truncated_normal<Scalar>(din, dout));
    b_k_ = Parameter<Scalar>(prefix + ".b_k", Matrix<Scalar>::Zero(1, dout));
    w_v_ = Parameter<Scalar>(prefix + ".w_v", init.truncated_normal<Scalar>(din, dout));
    b_v_ = Parameter<Scalar>(prefix + ".b_v", Matrix<Scalar>::Zero(1, dout));
    w_o_ = Parameter<Scalar>(prefix + ".w_o", init.truncated_normal<Scalar>(dout, dout));
    b_o_ = Parameter<Scalar>(prefix + ".b_o", Matrix<Scalar>::Zero(1, dout));
    if (cfg_.compresses()) {
      const Index cv = cfg_.compression_factor.volume();
      f_k_ = Parameter<Scalar>(prefix + ".compress_k", Initializer::constant<Scalar>(cv, din, 1.0 / static_cast<double>(cv)));
      f_v_ = Parameter<Scalar>(prefix + ".compress_v", Initializer::constant<Scalar>(cv, din, 1.0 / static_cast<double>(cv)));
    }
    if (cfg_.rel_pos_enabled) {
      const Index dh = dout / cfg_.heads;
      const Triple m = cfg_.rel_pos_max();
      const double sd = cfg_.rel_pos_init_std;
      rel_t_ = Parameter<Scalar>(prefix + ".rel_pos_t", init.truncated_normal<Scalar>(2 * m.t - 1, dh, sd));
      rel_h_ = Parameter<Scalar>(prefix + ".rel_pos_h", init.truncated_normal<Scalar>(2 * m.h - 1, dh, sd));
      rel_w_ = Parameter<Scalar>(prefix + ".rel_pos_w", init.truncated_normal<Scalar>(2 * m.w - 1, dh, sd));
    }
  }

  const AttentionLayerConfig& config() const { return cfg_; }
  int layer_id() const { return layer_id_; }

  void collect_parameters(std::vector<Parameter<Scalar>*>& out) {
    for (auto* p : {&pool_q_, &pool_k_, &pool_v_}) {
      if (*p) out.push_back(&**p);
    }
    for (auto* p : {&w_q_, &b_q_, &w_k_, &b_k_, &w_v_, &b_v_, &w_o_, &b_o_}) out.push_back(p);
    for (auto* p : {&f_k_, &f_v_, &rel_t_, &rel_h_, &rel_w_}) {
      if (*p) out.push_back(&**p);
    }
  }

  /// Compression module parameters (empty when the layer does not compress).
  std::vector<Parameter<Scalar>*> compression_parameters() {
    std::vector<Parameter<Scalar>*> out;
    if (f_k_) out.push_back(&*f_k_);
    if (f_v_) out.push_back(&*f_v_);
    return out;
  }

  /// Pool first, then project.
  PooledQkv<Scalar> pooled_qkv(const TokenTensor<Scalar>& x) const {
    PooledQkv<Scalar> r = pooled(x);
    r.q = linear(r.q_bar.data, w_q_.tensor, b_q_.tensor);
    r.k = linear(r.k_bar.data, w_k_.tensor, b_k_.tensor);
    r.v = linear(r.v_bar.data, w_v_.tensor, b_v_.tensor);
    return r;
  }

  /// One streaming step. With memory, keys/values are
  ///   [older compressed slots, f(newest cached slot), current]
  /// oldest first; afterwards the newest slot is replaced by its compressed
  /// form and the current pre-linear K̄/V̄ are cached uncompressed.
  AttentionOutput<Scalar> forward(const TokenTensor<Scalar>& x, MemoryBank<Scalar>* bank,
                                  const AttentionContext<Scalar>& ctx = {}) {
    const bool memory = cfg_.uses_memory();
    if (memory && bank == nullptr) throw ContractError("layer " + std::to_string(layer_id_) + " needs a memory bank");
    if (bank != nullptr) {
      if (!memory) throw ContractError("layer " + std::to_string(layer_id_) + " has no memory but got a bank");
      if (bank->layer_id() != layer_id_) {
        throw ContractError("bank for layer " + std::to_string(bank->layer_id()) + " passed to layer " +
                            std::to_string(layer_id_));
      }
      if (bank->max_len() != cfg_.memory_len) throw ContractError("bank capacity differs from layer memory length");
    }

    PooledQkv<Scalar> cur = pooled(x);
    cur.q = linear(cur.q_bar.data, w_q_.tensor, b_q_.tensor);
    const Triple in = cfg_.input_extents;
    const Triple qs = cfg_.query_scale();
    const Triple ks = cfg_.kv_scale();

    // Gather the memory segments, oldest first.
    struct Segment {
      Tensor<Scalar> k_bar, v_bar;
      Triple extents;
      Triple scale;
      Index distance;  // clips before the current one
      bool masked;
    };
    std::vector<Segment> segments;
    std::optional<TokenTensor<Scalar>> fresh_k, fresh_v;
    Index compressions = 0;
    if (memory && !bank->empty()) {
      const auto& slots = bank->slots();
      const Index n = static_cast<Index>(slots.size());
      for (Index i = 0; i < n; ++i) {
        const auto& s = slots[static_cast<std::size_t>(i)];
        Segment seg;
        seg.distance = n - i;
        seg.masked = s.video_id != x.video_id || i < ctx.dropped_oldest;
        TokenTensor<Scalar> sk = detail::detached(s.key);
        TokenTensor<Scalar> sv = detail::detached(s.value);
        if (!s.compressed) {
          if (cfg_.compresses()) {
            sk = compress(sk, f_k_->tensor, cfg_.compression_factor);
            sv = compress(sv, f_v_->tensor, cfg_.compression_factor);
            ++compressions;
          }
          fresh_k = sk;
          fresh_v = sv;
        }
        seg.k_bar = sk.data;
        seg.v_bar = sv.data;
        seg.extents = sk.extents;
        seg.scale = ks;
        if (s.compressed || cfg_.compresses()) {
          for (int a = 0; a < 3; ++a) seg.scale[a] *= cfg_.compression_factor[a];
        }
        segments.push_back(std::move(seg));
      }
    }

    Tensor<Scalar> k_all, v_all;
    Index memory_keys = 0;
    if (segments.empty()) {
      k_all = linear(cur.k_bar.data, w_k_.tensor, b_k_.tensor);
      v_all = linear(cur.v_bar.data, w_v_.tensor, b_v_.tensor);
    } else {
      std::vector<Tensor<Scalar>> ks_parts, vs_parts;
      for (const auto& s : segments) {
        ks_parts.push_back(s.k_bar);
        vs_parts.push_back(s.v_bar);
        memory_keys += s.k_bar.rows();
      }
      ks_parts.push_back(cur.k_bar.data);
      vs_parts.push_back(cur.v_bar.data);
      k_all = linear(concat_rows(ks_parts), w_k_.tensor, b_k_.tensor);
      v_all = linear(concat_rows(vs_parts), w_v_.tensor, b_v_.tensor);
    }
    const Index nq = cur.q.rows();
    const Index nk = k_all.rows();

    // Key positions on this layer's input grid; memory time runs negative.
    std::vector<Triple> key_pos;
    std::vector<char> key_masked;
    key_pos.reserve(static_cast<std::size_t>(nk));
    key_masked.reserve(static_cast<std::size_t>(nk));
    for (const auto& s : segments) {
      for (Index r = 0; r < s.extents.volume(); ++r) {
        const Triple p{r / (s.extents.h * s.extents.w), (r / s.extents.w) % s.extents.h, r % s.extents.w};
        key_pos.push_back({p.t * s.scale.t - s.distance * in.t, p.h * s.scale.h, p.w * s.scale.w});
        key_masked.push_back(s.masked ? 1 : 0);
      }
    }
    for (Index r = 0; r < cur.k_bar.tokens(); ++r) {
      const Triple p = cur.k_bar.position(r);
      key_pos.push_back({p.t * ks.t, p.h * ks.h, p.w * ks.w});
      key_masked.push_back(0);
    }
    std::vector<Triple> query_pos(static_cast<std::size_t>(nq));
    for (Index r = 0; r < nq; ++r) {
      const Triple p = cur.q_bar.position(r);
      query_pos[static_cast<std::size_t>(r)] = {p.t * qs.t, p.h * qs.h, p.w * qs.w};
    }

    std::optional<Matrix<Scalar>> mask;
    const bool any_masked = std::find(key_masked.begin(), key_masked.end(), 1) != key_masked.end();
    if (cfg_.causal || any_masked) {
      mask = Matrix<Scalar>::Zero(nq, nk);
      for (Index i = 0; i < nq; ++i) {
        for (Index j = 0; j < nk; ++j) {
          const bool future = cfg_.causal && key_pos[static_cast<std::size_t>(j)].t > query_pos[static_cast<std::size_t>(i)].t;
          if (future || key_masked[static_cast<std::size_t>(j)]) (*mask)(i, j) = static_cast<Scalar>(kMaskedLogit);
        }
      }
    }

    std::vector<Tensor<Scalar>> biases;
    const Index dh = cfg_.d_out / cfg_.heads;
    if (cfg_.rel_pos_enabled) {
      const RelPosTable<Scalar> table{cfg_.rel_pos_max(), rel_t_->tensor, rel_h_->tensor, rel_w_->tensor};
      for (Index h = 0; h < cfg_.heads; ++h) {
        Tensor<Scalar> qh = cfg_.heads == 1 ? cur.q : slice_cols(cur.q, h * dh, dh);
        biases.push_back(rel_pos_bias<Scalar>(qh, query_pos, key_pos, table));
      }
    }

    Tensor<Scalar> z = attend<Scalar>(cur.q, k_all, v_all, cfg_.heads, biases, mask, ctx.probabilities);
    z = linear(z, w_o_.tensor, b_o_.tensor);

    if (memory) {
      bank_update(*bank, cur.k_bar, cur.v_bar, fresh_k, fresh_v, cfg_.compresses() ? cfg_.compression_factor : Triple{1, 1, 1});
    }

    AttentionOutput<Scalar> out;
    out.tokens = cur.q_bar.with_data(z, cur.q_bar.extents);
    out.attended_keys = nk;
    out.memory_keys = memory_keys;
    out.compressions = compressions;
    return out;
  }

 private:
  PooledQkv<Scalar> pooled(const TokenTensor<Scalar>& x) const {
    if (x.channels() != cfg_.d_in) {
      throw DimensionError("pooled_qkv: input width " + std::to_string(x.channels()) + ", layer expects " +
                           std::to_string(cfg_.d_in));
    }
    if (x.extents != cfg_.input_extents) {
      throw DimensionError("pooled_qkv: input extents " + to_string(x.extents) + ", layer expects " +
                           to_string(cfg_.input_extents));
    }
    PooledQkv<Scalar> r;
    r.q_bar = cfg_.pool_q.is_identity() ? x : pool(x, cfg_.pool_q, weight(pool_q_));
    r.k_bar = cfg_.pool_kv.is_identity() ? x : pool(x, cfg_.pool_kv, weight(pool_k_));
    r.v_bar = cfg_.pool_kv.is_identity() ? x : pool(x, cfg_.pool_kv, weight(pool_v_));
    return r;
  }

  static std::optional<Tensor<Scalar>> weight(const std::optional<Parameter<Scalar>>& p) {
    if (!p) return std::nullopt;
    return p->tensor;
  }

  AttentionLayerConfig cfg_;
  int layer_id_;
  std::optional<Parameter<Scalar>> pool_q_, pool_k_, pool_v_;
  Parameter<Scalar> w_q_, b_q_, w_k_, b_k_, w_v_, b_v_, w_o_, b_o_;
  std::optional<Parameter<Scalar>> f_k_, f_v_;
  std::optional<Parameter<Scalar>> rel_t_, rel_h_, rel_w_;
};

}  // namespace memvit
