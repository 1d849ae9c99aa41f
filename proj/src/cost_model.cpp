#include "memvit/analysis/cost_model.hpp"

#include <algorithm>
#include <cstdio>

namespace memvit {

std::string to_string(CostMode mode) {
  switch (mode) {
    case CostMode::BaselineScalingT:
      return "baseline-scaling-T";
    case CostMode::Memvit:
      return "memvit";
    case CostMode::MemvitNoCompress:
      return "memvit-no-compress";
  }
  return "?";
}

CostMode parse_cost_mode(const std::string& text) {
  if (text == "baseline-scaling-T" || text == "baseline") return CostMode::BaselineScalingT;
  if (text == "memvit") return CostMode::Memvit;
  if (text == "memvit-no-compress" || text == "no-compress") return CostMode::MemvitNoCompress;
  throw ConfigError("unknown cost mode \"" + text + "\" (baseline-scaling-T, memvit, memvit-no-compress)");
}

ModelSpec spec_for_mode(ModelSpec spec, CostMode mode) {
  if (mode == CostMode::BaselineScalingT) spec.memory_len = 0;
  if (mode == CostMode::MemvitNoCompress) spec.compression_factor = {1, 1, 1};
  return spec;
}

namespace {

constexpr std::int64_t kCacheScalarBytes = 4;

std::int64_t i64(Index v) { return static_cast<std::int64_t>(v); }

}  // namespace

CostReport count_costs(const ModelSpec& spec_in, double fps, CostMode mode, Index memory_slots) {
  const ModelSpec spec = spec_for_mode(spec_in, mode);
  spec.validate();
  const auto geometry = layer_geometry(spec);
  CostReport r;
  r.mode = mode;

  const Triple embed = spec.embed_extents();
  const Index d0 = spec.stages.front().channels;
  const Index patch = spec.cube_kernel.volume() * ModelSpec::kInputChannels;
  r.macs += i64(embed.volume()) * patch * d0;
  r.params += i64(patch) * d0 + d0;
  r.activation_bytes += i64(embed.volume()) * d0 * kCacheScalarBytes;

  for (const auto& g : geometry) {
    const auto& a = g.attn;
    LayerCost c;
    c.layer = g.index;
    const Index din = a.d_in;
    const Index dout = a.d_out;
    const Index n_in = a.input_extents.volume();
    const Triple qe = a.query_extents();
    const Triple ke = a.kv_extents();
    const Index nq = qe.volume();
    const Index nk = ke.volume();

    c.elementwise += i64(n_in) * din;  // norm1
    c.params += 2 * i64(din);
    if (!a.pool_q.is_identity()) {
      c.macs += i64(nq) * a.pool_q.kernel.volume() * din;
      c.params += i64(a.pool_q.kernel.volume()) * din;
    }
    if (!a.pool_kv.is_identity()) {
      c.macs += 2 * i64(nk) * a.pool_kv.kernel.volume() * din;
      c.params += 2 * i64(a.pool_kv.kernel.volume()) * din;
    }

    Index slots = 0;
    Triple slot_extents = ke;
    if (a.uses_memory()) {
      slots = memory_slots < 0 ? a.memory_len : std::min(memory_slots, a.memory_len);
      if (a.compresses()) {
        slot_extents = compressed_extents(ke, a.compression_factor);
        const Index cv = a.compression_factor.volume();
        c.params += 2 * i64(cv) * din;
        if (slots > 0) c.macs += 2 * i64(slot_extents.volume()) * cv * din;
      }
      // Bank contents after the step: newest step uncompressed, the rest compressed.
      const Index held = std::min(slots + 1, a.memory_len);
      c.cache_bytes = 2 * i64(din) * kCacheScalarBytes * (i64(held - 1) * slot_extents.volume() + ke.volume());
    }
    const Index nk_total = nk + slots * slot_extents.volume();
    c.attended_keys = nk_total;

    c.macs += i64(nq) * din * dout + 2 * i64(nk_total) * din * dout;  // q, k, v
    c.params += 3 * (i64(din) * dout + dout);
    if (a.rel_pos_enabled) {
      const Index coords = ke.t + slots * slot_extents.t + ke.h + ke.w;
      c.macs += i64(nq) * coords * dout;
      const Triple m = a.rel_pos_max();
      c.params += i64(2 * m.t - 1 + 2 * m.h - 1 + 2 * m.w - 1) * (dout / a.heads);
    }
    c.macs += 2 * i64(nq) * nk_total * dout;             // scores, weighted sum
    c.elementwise += i64(a.heads) * nq * nk_total;       // softmax
    c.macs += i64(nq) * dout * dout;                     // output projection
    c.params += i64(dout) * dout + dout;
    if (!g.skip_pool.is_identity()) c.elementwise += i64(nq) * g.skip_pool.kernel.volume() * din;
    if (g.skip_proj) {
      c.macs += i64(nq) * din * dout;
      c.params += i64(din) * dout + dout;
    }
    c.elementwise += i64(nq) * dout;  // norm2
    c.params += 2 * i64(dout);
    c.macs += 2 * i64(nq) * dout * g.mlp_hidden;
    c.elementwise += i64(nq) * g.mlp_hidden;  // gelu
    c.params += 2 * i64(dout) * g.mlp_hidden + g.mlp_hidden + dout;

    c.activation_bytes = kCacheScalarBytes * (i64(nq) * (3 * dout + g.mlp_hidden) + 2 * i64(nk_total) * dout +
                                              i64(a.heads) * nq * nk_total);
    r.macs += c.macs;
    r.elementwise += c.elementwise;
    r.params += c.params;
    r.cache_bytes += c.cache_bytes;
    r.activation_bytes += c.activation_bytes;
    r.layers.push_back(c);
  }

  const Index df = spec.stages.back().channels;
  const Index nf = geometry.back().output_extents.volume();
  r.elementwise += 2 * i64(nf) * df;  // head norm, token mean
  r.macs += i64(df) * spec.num_classes;
  r.params += 2 * i64(df) + i64(df) * spec.num_classes + spec.num_classes;
  r.flops = r.macs + r.elementwise;

  r.receptive_field_clips = receptive_field_clips(spec);
  r.temporal_support_clips = r.receptive_field_clips;
  r.clip_seconds = static_cast<double>(spec.frames * spec.sampling_stride) / fps;
  r.temporal_support_s = temporal_support(spec, fps);
  return r;
}

std::int64_t qkv_macs(const AttentionLayerConfig& a, bool pool_first) {
  const std::int64_t n_in = a.input_extents.volume();
  const std::int64_t nq = a.query_extents().volume();
  const std::int64_t nk = a.kv_extents().volume();
  const std::int64_t width = pool_first ? a.d_in : a.d_out;
  std::int64_t pooling = 0;
  if (!a.pool_q.is_identity()) pooling += nq * a.pool_q.kernel.volume() * width;
  if (!a.pool_kv.is_identity()) pooling += 2 * nk * a.pool_kv.kernel.volume() * width;
  const std::int64_t projection = pool_first ? (nq + 2 * nk) * a.d_in * a.d_out : 3 * n_in * a.d_in * a.d_out;
  return pooling + projection;
}

std::int64_t count_params(const ModelSpec& spec) { return count_costs(spec, kDefaultFps, CostMode::Memvit).params; }

Index receptive_field_clips(const ModelSpec& spec) { return receptive_field_by_layer(spec).back(); }

std::vector<Index> receptive_field_by_layer(const ModelSpec& spec) {
  std::vector<Index> out;
  Index reach = 1;
  for (const auto& g : layer_geometry(spec)) {
    if (g.attn.uses_memory()) reach += g.attn.memory_len;
    out.push_back(reach);
  }
  return out;
}

double temporal_support(const ModelSpec& spec, double fps) {
  return static_cast<double>(receptive_field_clips(spec) * spec.frames * spec.sampling_stride) / fps;
}

std::string cost_csv_header() { return "mode,T,M,factor,aug_policy,flops,params,support_s,rf_clips,cache_bytes"; }

std::string cost_csv_row(const ModelSpec& spec_in, const CostReport& r) {
  const ModelSpec spec = spec_for_mode(spec_in, r.mode);
  char support[32];
  std::snprintf(support, sizeof support, "%.3f", r.temporal_support_s);
  return to_string(r.mode) + "," + std::to_string(spec.frames) + "," + std::to_string(spec.memory_len) + "," +
         to_string(spec.compression_factor) + "," + (spec.memory_len > 0 ? spec.aug_policy.name() : "none") + "," +
         std::to_string(r.flops) + "," + std::to_string(r.params) + "," + support + "," +
         std::to_string(r.receptive_field_clips) + "," + std::to_string(r.cache_bytes);
}

}  // namespace memvit
