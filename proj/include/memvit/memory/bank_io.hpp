#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "memvit/memory/memory_bank.hpp"

// Bank snapshot layout (all integers little-endian):
//
//   "MVBK"  u32 version  u32 layer_id  u32 slot_count
//   per slot:
//     u8 compressed  u64 clip_index  u64 video_id
//     u8 rank (=4)   u64 extents[4] = {t, h, w, channels}
//     key payload, then value payload, row-major
//
// Version 1 stores f32 payloads, version 2 f64. Each is bit-exact for banks
// of the matching scalar type.

namespace memvit {

namespace io {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    static_assert(std::is_integral_v<T>);
    using U = std::make_unsigned_t<T>;
    U u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<std::uint8_t>((u >> (8 * i)) & 0xFFu));
  }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }

  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return at_; }
  bool done() const { return at_ == bytes_.size(); }

  void expect_magic(const char (&magic)[5]) {
    need(4, "magic");
    if (std::memcmp(bytes_.data() + at_, magic, 4) != 0) {
      throw ParseError(std::string("bad magic, expected \"") + magic + "\"", at_);
    }
    at_ += 4;
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<U>(bytes_[at_ + i]) << (8 * i));
    at_ += sizeof(T);
    return static_cast<T>(u);
  }
  float f32(const char* what) { return std::bit_cast<float>(le<std::uint32_t>(what)); }
  double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + at_), n);
    at_ += n;
    return s;
  }
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - at_ < n) throw ParseError(std::string("truncated input reading ") + what, at_);
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t at_ = 0;
};

}  // namespace io

inline constexpr std::uint32_t kBankVersionF32 = 1;
inline constexpr std::uint32_t kBankVersionF64 = 2;

template <typename Scalar>
std::vector<std::uint8_t> bank_serialize(const MemoryBank<Scalar>& bank) {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  io::ByteWriter w;
  w.raw("MVBK", 4);
  w.le<std::uint32_t>(std::is_same_v<Scalar, float> ? kBankVersionF32 : kBankVersionF64);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(bank.layer_id()));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(bank.size()));
  for (const auto& s : bank.slots()) {
    w.le<std::uint8_t>(s.compressed ? 1 : 0);
    w.le<std::uint64_t>(static_cast<std::uint64_t>(s.clip_index));
    w.le<std::uint64_t>(static_cast<std::uint64_t>(s.video_id));
    w.le<std::uint8_t>(4);
    w.le<std::uint64_t>(static_cast<std::uint64_t>(s.key.extents.t));
    w.le<std::uint64_t>(static_cast<std::uint64_t>(s.key.extents.h));
    w.le<std::uint64_t>(static_cast<std::uint64_t>(s.key.extents.w));
    w.le<std::uint64_t>(static_cast<std::uint64_t>(s.key.channels()));
    for (const auto* part : {&s.key, &s.value}) {
      const auto& m = part->data.value();
      for (Index i = 0; i < m.size(); ++i) {
        if constexpr (std::is_same_v<Scalar, float>) {
          w.f32(m.data()[i]);
        } else {
          w.f64(m.data()[i]);
        }
      }
    }
  }
  return w.take();
}

/// Decodes a snapshot into a bank with capacity `max_len` (the snapshot
/// records contents, not capacity). Nothing is returned on error.
template <typename Scalar>
MemoryBank<Scalar> bank_deserialize(std::span<const std::uint8_t> bytes, Index max_len) {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  io::ByteReader r(bytes);
  r.expect_magic("MVBK");
  const std::size_t version_at = r.offset();
  const auto version = r.le<std::uint32_t>("version");
  const std::uint32_t expected = std::is_same_v<Scalar, float> ? kBankVersionF32 : kBankVersionF64;
  if (version != expected) {
    throw ParseError("unsupported bank version " + std::to_string(version) + " for this scalar type", version_at);
  }
  const auto layer_id = r.le<std::uint32_t>("layer_id");
  const std::size_t count_at = r.offset();
  const auto count = r.le<std::uint32_t>("slot_count");
  if (static_cast<Index>(count) > max_len) {
    throw ParseError("snapshot holds " + std::to_string(count) + " slots, capacity is " + std::to_string(max_len),
                     count_at);
  }
  MemoryBank<Scalar> bank(static_cast<int>(layer_id), max_len);
  for (std::uint32_t k = 0; k < count; ++k) {
    MemorySlot<Scalar> s;
    const std::size_t flag_at = r.offset();
    const auto flag = r.le<std::uint8_t>("compressed flag");
    if (flag > 1) throw ParseError("compressed flag must be 0 or 1", flag_at);
    s.compressed = flag == 1;
    s.clip_index = static_cast<std::int64_t>(r.le<std::uint64_t>("clip_index"));
    s.video_id = static_cast<std::int64_t>(r.le<std::uint64_t>("video_id"));
    const std::size_t rank_at = r.offset();
    if (r.le<std::uint8_t>("rank") != 4) throw ParseError("slot rank must be 4", rank_at);
    std::uint64_t ext[4];
    std::uint64_t elements = 1;
    for (auto& e : ext) {
      const std::size_t at = r.offset();
      e = r.le<std::uint64_t>("extent");
      // Any extent product larger than the input cannot be backed by payload.
      if (e == 0 || e > bytes.size() || elements > bytes.size() / e) {
        throw ParseError("slot extent out of range", at);
      }
      elements *= e;
    }
    const Triple extents{static_cast<Index>(ext[0]), static_cast<Index>(ext[1]), static_cast<Index>(ext[2])};
    const Index channels = static_cast<Index>(ext[3]);
    const std::size_t elems = static_cast<std::size_t>(extents.volume() * channels);
    r.need(2 * elems * sizeof(Scalar), "slot payload");
    for (auto* part : {&s.key, &s.value}) {
      Matrix<Scalar> m(extents.volume(), channels);
      for (std::size_t i = 0; i < elems; ++i) {
        if constexpr (std::is_same_v<Scalar, float>) {
          m.data()[i] = r.f32("payload");
        } else {
          m.data()[i] = r.f64("payload");
        }
      }
      *part = TokenTensor<Scalar>(Tensor<Scalar>(std::move(m)), extents, s.clip_index, s.video_id);
    }
    bank.mutable_slots().push_back(std::move(s));
  }
  if (!r.done()) throw ParseError("trailing bytes after last slot", r.offset());
  try {
    bank.validate();
  } catch (const ContractError& e) {
    throw ParseError(std::string("decoded bank is inconsistent: ") + e.what(), r.offset());
  }
  return bank;
}

}  // namespace memvit
