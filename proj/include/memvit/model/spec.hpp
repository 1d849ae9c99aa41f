#pragma once

#include <string>
#include <vector>

#include "memvit/attention/memvit_attention.hpp"

namespace memvit {

struct StageSpec {
  Index depth = 1;
  Index channels = 96;
  Index heads = 1;
  Triple q_stride{1, 1, 1};   // applied by the first layer of the stage
  Triple kv_stride{1, 1, 1};  // K/V pooling stride for every layer of the stage
  double mlp_ratio = 4.0;
};

/// Which attention layers get a memory bank.
struct AugPolicy {
  enum class Kind { All, Uniform, Early, Middle, Late, Explicit };
  Kind kind = Kind::Uniform;
  int percent = 50;          // Uniform only
  std::vector<int> layers;   // Explicit only

  /// "all", "uniform-50%", "early", "middle", "late" or "explicit".
  std::string name() const;
  static AugPolicy parse(const std::string& text);
};

struct ModelSpec {
  std::string name = "model";
  Index frames = 16;  // T
  Index height = 224;
  Index width = 224;
  Index sampling_stride = 4;
  Triple cube_kernel{3, 7, 7};
  Triple cube_stride{2, 4, 4};
  Triple cube_padding{1, 3, 3};
  Triple pool_kernel{3, 3, 3};
  std::vector<StageSpec> stages;
  Index memory_len = 0;  // M
  Triple compression_factor{4, 2, 2};
  AugPolicy aug_policy;
  bool causal = false;
  bool rel_pos = true;
  double rel_pos_init_std = 0.02;
  Index num_classes = 400;

  static constexpr Index kInputChannels = 3;

  Index total_depth() const;
  Triple embed_extents() const;
  /// Resolved memory-augmented layer indices, ascending. Throws ConfigError
  /// for a policy that selects nothing or an out-of-range explicit index.
  std::vector<int> aug_layers() const;
  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Resolved geometry of one transformer block.
struct LayerGeometry {
  int index = 0;
  int stage = 0;
  AttentionLayerConfig attn;
  Index mlp_hidden = 0;
  PoolSpec skip_pool;      // mean pool matching pool_q; identity when no q stride
  bool skip_proj = false;  // d_in != d_out
  Triple output_extents;
};

std::vector<LayerGeometry> layer_geometry(const ModelSpec& spec);

/// Same architecture with causal pooling, causal attention masks and a
/// causally padded cube embedding.
ModelSpec make_causal(ModelSpec spec);

std::string spec_to_json(const ModelSpec& spec);
/// Parse errors carry the JSON path of the offending field.
ModelSpec spec_from_json(const std::string& text);
ModelSpec load_spec(const std::string& path);

namespace presets {
ModelSpec mvit16();    // MViT-16, 16x4, no memory
ModelSpec memvit16();  // M=2, 4x2x2 compression, uniform 50%
ModelSpec memvit24();  // 32x3 input, deeper third stage
/// Two stages, depths 1+1, widths 8 then 16, T=4, 16x16 frames.
ModelSpec toy();
}  // namespace presets

}  // namespace memvit
