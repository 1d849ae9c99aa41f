#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "memvit/model/spec.hpp"

namespace memvit {

enum class CostMode { BaselineScalingT, Memvit, MemvitNoCompress };

std::string to_string(CostMode mode);
CostMode parse_cost_mode(const std::string& text);

/// Per-layer closed-form tallies. `macs` and `elementwise` use the same
/// convention as the runtime op counter.
struct LayerCost {
  int layer = 0;
  std::int64_t macs = 0;
  std::int64_t elementwise = 0;
  std::int64_t params = 0;
  Index attended_keys = 0;
  std::int64_t cache_bytes = 0;
  std::int64_t activation_bytes = 0;
};

struct CostReport {
  CostMode mode = CostMode::Memvit;
  std::int64_t macs = 0;
  std::int64_t elementwise = 0;
  std::int64_t flops = 0;  // macs + elementwise
  std::int64_t params = 0;
  std::int64_t activation_bytes = 0;
  std::int64_t cache_bytes = 0;
  double clip_seconds = 0.0;
  double temporal_support_s = 0.0;
  Index temporal_support_clips = 1;
  Index receptive_field_clips = 1;
  std::vector<LayerCost> layers;
};

inline constexpr double kDefaultFps = 30.0;

/// Spec as evaluated under `mode`: baseline drops memory, no-compress keeps
/// memory with a 1x1x1 factor.
ModelSpec spec_for_mode(ModelSpec spec, CostMode mode);

/// Closed-form cost of one steady-state forward step. `memory_slots` is the
/// number of cached steps each memory layer holds before the step (default
/// M, the warm pipeline); the newest of them is compressed during the step.
CostReport count_costs(const ModelSpec& spec, double fps, CostMode mode, Index memory_slots = -1);

/// Exact parameter count of the model built from `spec`.
std::int64_t count_params(const ModelSpec& spec);

/// MACs of producing Q, K and V for one layer's current clip, pooling then
/// projecting (`pool_first`) or projecting then pooling at the output width.
std::int64_t qkv_macs(const AttentionLayerConfig& attn, bool pool_first);

/// (1 + M * L_aug) clips.
Index receptive_field_clips(const ModelSpec& spec);
/// Per-layer analytic reach: 1 + M * (memory layers at or below the layer).
std::vector<Index> receptive_field_by_layer(const ModelSpec& spec);

/// Seconds of video seen by one output: reach * T * sampling_stride / fps.
double temporal_support(const ModelSpec& spec, double fps);

/// One row of the bench CSV.
std::string cost_csv_header();
std::string cost_csv_row(const ModelSpec& spec, const CostReport& r);

}  // namespace memvit
