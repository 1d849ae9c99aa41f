#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <string>

#include "memvit/attention/pool.hpp"
#include "memvit/attention/token_tensor.hpp"

namespace memvit {

/// One cached step of pre-linear keys/values (pooled, before W_K / W_V).
template <typename Scalar>
struct MemorySlot {
  TokenTensor<Scalar> key;
  TokenTensor<Scalar> value;
  bool compressed = false;
  std::int64_t clip_index = 0;
  std::int64_t video_id = 0;
};

/// Bounded FIFO of memory slots for one memory-augmented layer, oldest
/// first. Only the newest slot may be uncompressed.
template <typename Scalar>
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(int layer_id, Index max_len) : layer_id_(layer_id), max_len_(max_len) {
    if (max_len < 0) throw ConfigError("memory length must be non-negative");
  }

  int layer_id() const { return layer_id_; }
  Index max_len() const { return max_len_; }
  Index size() const { return static_cast<Index>(slots_.size()); }
  bool empty() const { return slots_.empty(); }

  const std::deque<MemorySlot<Scalar>>& slots() const { return slots_; }
  std::deque<MemorySlot<Scalar>>& mutable_slots() { return slots_; }

  void clear() { slots_.clear(); }

  /// Throws ContractError naming the first broken invariant.
  void validate() const {
    if (size() > max_len_) {
      throw ContractError("bank " + std::to_string(layer_id_) + " holds " + std::to_string(size()) +
                          " slots, limit " + std::to_string(max_len_));
    }
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      const auto& s = slots_[i];
      if (s.key.extents != s.value.extents || s.key.channels() != s.value.channels()) {
        throw ContractError("bank slot " + std::to_string(i) + ": key/value extents differ");
      }
      if (s.key.data.requires_grad() || s.value.data.requires_grad() || !s.key.data.is_leaf() ||
          !s.value.data.is_leaf()) {
        throw ContractError("bank slot " + std::to_string(i) + " carries gradient history");
      }
      if (!s.compressed && i + 1 != slots_.size()) {
        throw ContractError("bank slot " + std::to_string(i) + " is uncompressed but not the newest");
      }
      if (i > 0 && s.clip_index <= slots_[i - 1].clip_index) {
        throw ContractError("bank clip indices not strictly increasing at slot " + std::to_string(i));
      }
    }
  }

 private:
  int layer_id_ = 0;
  Index max_len_ = 0;
  std::deque<MemorySlot<Scalar>> slots_;
};

namespace detail {
template <typename Scalar>
TokenTensor<Scalar> detached(const TokenTensor<Scalar>& x) {
  return x.with_data(stop_gradient(x.data), x.extents);
}
}  // namespace detail

/// Pipelined cache update: the newest existing slot is replaced by its
/// freshly compressed form, the current pre-linear keys/values are appended
/// uncompressed, and the oldest slot is evicted past max_len. Everything
/// stored is detached.
template <typename Scalar>
void bank_update(MemoryBank<Scalar>& bank, const TokenTensor<Scalar>& new_k, const TokenTensor<Scalar>& new_v,
                 const std::optional<TokenTensor<Scalar>>& compressed_k,
                 const std::optional<TokenTensor<Scalar>>& compressed_v, Triple factor) {
  if (bank.max_len() == 0) return;
  if (new_k.extents != new_v.extents) throw DimensionError("bank_update: key/value extents differ");
  auto& slots = bank.mutable_slots();
  if (!slots.empty()) {
    auto& newest = slots.back();
    if (new_k.clip_index <= newest.clip_index) {
      throw ContractError("bank_update: clip index " + std::to_string(new_k.clip_index) +
                          " does not follow cached clip " + std::to_string(newest.clip_index));
    }
    if (!newest.compressed) {
      if (!compressed_k || !compressed_v) {
        throw ContractError("bank_update: newest slot is uncompressed and no compressed form was given");
      }
      const Triple expected = compressed_extents(newest.key.extents, factor);
      if (compressed_k->extents != expected || compressed_v->extents != expected) {
        throw DimensionError("bank_update: compressed slot extents " + to_string(compressed_k->extents) +
                             " / " + to_string(compressed_v->extents) + ", expected " + to_string(expected));
      }
      newest.key = detail::detached(*compressed_k);
      newest.key.clip_index = newest.clip_index;
      newest.key.video_id = newest.video_id;
      newest.value = detail::detached(*compressed_v);
      newest.value.clip_index = newest.clip_index;
      newest.value.video_id = newest.video_id;
      newest.compressed = true;
    }
  }
  slots.push_back(MemorySlot<Scalar>{detail::detached(new_k), detail::detached(new_v), false, new_k.clip_index,
                                     new_k.video_id});
  while (bank.size() > bank.max_len()) slots.pop_front();
}

/// Zeroes every slot cached from a different video. Slots keep their shapes
/// and their original video id, which also makes attention ignore them.
template <typename Scalar>
void boundary_reset(MemoryBank<Scalar>& bank, std::int64_t new_video_id) {
  for (auto& s : bank.mutable_slots()) {
    if (s.video_id == new_video_id) continue;
    s.key.data = Tensor<Scalar>::zeros(s.key.data.rows(), s.key.data.cols());
    s.value.data = Tensor<Scalar>::zeros(s.value.data.rows(), s.value.data.cols());
  }
}

/// Number of oldest memory steps hidden from one training forward.
struct MemoryDrop {
  Index dropped_oldest = 0;
};

/// Draws m uniformly from [0, M-1]. The bank is not modified; the caller
/// masks the m oldest slots for this forward only.
template <typename Scalar, typename Rng>
MemoryDrop memory_drop_augment(const MemoryBank<Scalar>& bank, Rng& rng, bool training) {
  if (!training) throw ContractError("memory drop augmentation is training-only");
  if (bank.max_len() <= 1) return {};
  std::uniform_int_distribution<Index> dist(0, bank.max_len() - 1);
  return {dist(rng)};
}

}  // namespace memvit
