#pragma once

#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "memvit/memory/bank_io.hpp"
#include "memvit/model/model.hpp"

// Checkpoint layout (little-endian):
//
//   "MVCK"  u32 version (=1)  u32 parameter_count
//   per parameter:
//     u32 name_length  name bytes
//     u8 rank (=2)     u64 rows  u64 cols
//     f32 payload, row-major

namespace memvit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
std::vector<std::uint8_t> checkpoint_serialize(const Model<Scalar>& model) {
  io::ByteWriter w;
  w.raw("MVCK", 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto* p : model.parameters()) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(p->name.size()));
    w.raw(p->name.data(), p->name.size());
    w.le<std::uint8_t>(2);
    const auto& m = p->tensor.value();
    w.le<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
    w.le<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
    for (Index i = 0; i < m.size(); ++i) w.f32(static_cast<float>(m.data()[i]));
  }
  return w.take();
}

/// Loads parameters by name. Every parameter of the model must be present
/// with the same shape; mismatches are reported as a shape diff.
template <typename Scalar>
void checkpoint_load(Model<Scalar>& model, std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("MVCK");
  const std::size_t version_at = r.offset();
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const auto count = r.le<std::uint32_t>("parameter_count");
  std::vector<std::pair<Parameter<Scalar>*, Matrix<Scalar>>> staged;
  std::string diff;
  std::vector<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = r.le<std::uint32_t>("name length");
    const std::string name = r.str(len, "name");
    const std::size_t rank_at = r.offset();
    if (r.le<std::uint8_t>("rank") != 2) throw ParseError("parameter rank must be 2", rank_at);
    const auto rows = r.le<std::uint64_t>("rows");
    const auto cols = r.le<std::uint64_t>("cols");
    if (rows == 0 || cols == 0 || rows > bytes.size() || cols > bytes.size() / rows) {
      throw ParseError("parameter " + name + " has an impossible shape", rank_at);
    }
    r.need(rows * cols * 4, "parameter payload");
    Matrix<Scalar> m(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(r.f32("payload"));
    seen.push_back(name);
    Parameter<Scalar>* p = model.find(name);
    if (p == nullptr) {
      diff += "  unexpected " + name + " " + shape_string(m.rows(), m.cols()) + "\n";
    } else if (p->tensor.rows() != m.rows() || p->tensor.cols() != m.cols()) {
      diff += "  " + name + ": checkpoint " + shape_string(m.rows(), m.cols()) + ", model " +
              shape_string(p->tensor.rows(), p->tensor.cols()) + "\n";
    } else {
      staged.emplace_back(p, std::move(m));
    }
  }
  if (!r.done()) throw ParseError("trailing bytes after last parameter", r.offset());
  for (const auto* p : model.parameters()) {
    if (std::find(seen.begin(), seen.end(), p->name) == seen.end()) {
      diff += "  missing " + p->name + " " + shape_string(p->tensor.rows(), p->tensor.cols()) + "\n";
    }
  }
  if (!diff.empty()) throw ConfigError("checkpoint does not match the model spec:\n" + diff);
  for (auto& [p, m] : staged) p->tensor.mutable_value() = std::move(m);
}

template <typename Scalar>
void save_checkpoint(const Model<Scalar>& model, const std::string& path) {
  const auto bytes = checkpoint_serialize(model);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write checkpoint " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

template <typename Scalar>
void load_checkpoint(Model<Scalar>& model, const std::string& path) {
  const auto bytes = read_file_bytes(path);
  checkpoint_load(model, bytes);
}

}  // namespace memvit
