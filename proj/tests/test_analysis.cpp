#include <cmath>

#include "doctest.h"
#include "memvit/analysis/cost_model.hpp"
#include "memvit/analysis/receptive_field.hpp"
#include "streams.hpp"

using namespace memvit;
using namespace memvit::testing;

namespace {

constexpr double kFps = kDefaultFps;

double gflops(const ModelSpec& s, CostMode mode) { return count_costs(s, kFps, mode).flops / 1e9; }

ModelSpec memvit16_with(Index m) {
  ModelSpec s = presets::memvit16();
  s.memory_len = m;
  return s;
}

// Runs `warm` clips, then counts the ops of one more forward.
OpCounts instrumented(const ModelSpec& s, Index warm) {
  Model<double> m(s, 1);
  auto banks = m.make_banks();
  for (Index t = 0; t < warm; ++t) m.forward_clip(random_clip(s, 10 + t, t), banks);
  ScopedOpCounter counter;
  m.forward_clip(random_clip(s, 99, warm), banks);
  return counter.counts();
}

}  // namespace

TEST_CASE("closed-form costs equal the instrumented forward pass") {
  std::vector<ModelSpec> specs;
  for (Index m : {0, 1, 2, 3}) {
    ModelSpec s = presets::toy();
    s.memory_len = m;
    specs.push_back(s);
  }
  ModelSpec causal = make_causal(presets::toy());
  causal.memory_len = 2;
  specs.push_back(causal);
  ModelSpec no_rel = presets::toy();
  no_rel.rel_pos = false;
  no_rel.memory_len = 2;
  specs.push_back(no_rel);
  ModelSpec deeper = presets::toy();
  deeper.frames = 8;
  deeper.height = deeper.width = 32;
  deeper.stages.push_back({2, 32, 4, {1, 2, 2}, {1, 1, 1}, 4.0});
  deeper.memory_len = 2;
  deeper.aug_policy = AugPolicy::parse("uniform-50%");
  specs.push_back(deeper);
  ModelSpec uncompressed = deeper;
  uncompressed.compression_factor = {1, 1, 1};
  specs.push_back(uncompressed);

  for (const auto& s : specs) {
    for (Index warm = 0; warm <= s.memory_len + 1; ++warm) {
      CAPTURE(s.name);
      CAPTURE(s.memory_len);
      CAPTURE(warm);
      const OpCounts got = instrumented(s, warm);
      const CostReport want = count_costs(s, kFps, CostMode::Memvit, warm);
      CHECK(got.macs == want.macs);
      CHECK(got.elementwise == want.elementwise);
    }
  }
}

TEST_CASE("baseline FLOPs and memory ratios") {
  const double base = gflops(presets::mvit16(), CostMode::BaselineScalingT);
  CHECK(std::abs(base / 57.4 - 1.0) <= 0.05);
  const double paper[] = {58.09, 58.71, 59.33, 59.95};
  for (Index m = 1; m <= 4; ++m) {
    const double ratio = gflops(memvit16_with(m), CostMode::Memvit) / base;
    CHECK(std::abs(ratio / (paper[m - 1] / 57.40) - 1.0) <= 0.01);
  }
  const double c4 = gflops(memvit16_with(4), CostMode::Memvit);
  const double u4 = gflops(memvit16_with(4), CostMode::MemvitNoCompress);
  CHECK(std::abs(u4 / base - 88.50 / 57.40) / (88.50 / 57.40) <= 0.05);
  CHECK((u4 - base) / (c4 - base) >= 10.0);
  CHECK(c4 / base - 1.0 <= 0.05);
}

TEST_CASE("support at 30 fps") {
  CHECK(temporal_support(presets::mvit16(), kFps) == doctest::Approx(64.0 / 30.0));
  CHECK(receptive_field_clips(presets::memvit16()) == 17);
  CHECK(temporal_support(presets::memvit16(), kFps) == doctest::Approx(36.27).epsilon(0.001));
  const ModelSpec m4 = memvit16_with(4);
  CHECK(receptive_field_clips(m4) == 33);
  CHECK(temporal_support(m4, kFps) == doctest::Approx(70.4).epsilon(0.001));
  const auto r = count_costs(m4, kFps, CostMode::Memvit);
  CHECK(r.temporal_support_clips == 33);
  CHECK(count_costs(m4, kFps, CostMode::BaselineScalingT).receptive_field_clips == 1);
}

TEST_CASE("parameter counts") {
  CHECK(std::abs(count_params(presets::mvit16()) / 34.5e6 - 1.0) <= 0.03);
  CHECK(std::abs(count_params(presets::memvit16()) / 35.4e6 - 1.0) <= 0.03);
  // Memory adds compression modules and longer temporal tables only.
  const auto p2 = count_params(memvit16_with(2));
  const auto p4 = count_params(memvit16_with(4));
  const auto delta_rel_t = [&] {
    std::int64_t d = 0;
    for (const auto& g : layer_geometry(memvit16_with(2))) {
      if (g.attn.uses_memory()) d += 2 * 2 * g.attn.input_extents.t * (g.attn.d_out / g.attn.heads);
    }
    return d;
  }();
  CHECK(p4 - p2 == delta_rel_t);
}

TEST_CASE("cost grows affinely in M") {
  std::vector<double> f;
  for (Index m = 0; m <= 6; ++m) f.push_back(static_cast<double>(count_costs(memvit16_with(m), kFps, CostMode::Memvit).flops));
  const double beta = f[2] - f[1];
  for (std::size_t m = 2; m < f.size(); ++m) CHECK(f[m] - f[m - 1] == beta);
  CHECK(f[1] - f[0] > beta);  // alpha: pipeline compression on top of the first slot
  // Per-step increment of the plotted series: (59.95 - 58.09) / 3 GFLOPs.
  CHECK(std::abs(beta / 1e9 / ((59.95 - 58.09) / 3.0) - 1.0) <= 0.15);
}

TEST_CASE("baseline scaling in T is superlinear") {
  double previous_per_frame = 0;
  std::vector<double> series;
  for (Index t : {16, 20, 24, 28, 32}) {
    ModelSpec s = presets::mvit16();
    s.frames = t;
    const double g = gflops(s, CostMode::BaselineScalingT);
    series.push_back(g);
    CHECK(g / static_cast<double>(t) > previous_per_frame);
    previous_per_frame = g / static_cast<double>(t);
  }
  const double paper[] = {57.40, 76.27, 96.95, 119.44, 143.75};
  for (std::size_t i = 0; i < series.size(); ++i) CHECK(std::abs(series[i] / series[0] / (paper[i] / paper[0]) - 1.0) <= 0.05);
  // Same 33-clip support costs far more by enlarging T than with memory.
  ModelSpec wide = presets::mvit16();
  wide.frames = 32;
  CHECK(gflops(wide, CostMode::BaselineScalingT) > gflops(memvit16_with(4), CostMode::Memvit));
}

TEST_CASE("pool-first projection is cheaper for any stride > 1") {
  for (const auto& g : layer_geometry(presets::mvit16())) {
    const bool strided = !g.attn.pool_q.is_identity() || g.attn.pool_kv.stride.volume() > 1;
    if (strided) {
      CHECK(qkv_macs(g.attn, true) < qkv_macs(g.attn, false));
    }
  }
  AttentionLayerConfig unit;
  unit.d_in = unit.d_out = 8;
  unit.input_extents = {2, 4, 4};
  CHECK(qkv_macs(unit, true) == qkv_macs(unit, false));
}

TEST_CASE("cache memory") {
  const auto c = count_costs(memvit16_with(2), kFps, CostMode::Memvit);
  const auto u = count_costs(memvit16_with(2), kFps, CostMode::MemvitNoCompress);
  const auto b = count_costs(memvit16_with(2), kFps, CostMode::BaselineScalingT);
  CHECK(b.cache_bytes == 0);
  CHECK(c.cache_bytes > 0);
  CHECK(c.cache_bytes < u.cache_bytes);
  // M=2 holds the newest step uncompressed and one compressed step.
  std::int64_t want = 0;
  std::int64_t want_raw = 0;
  for (const auto& g : layer_geometry(memvit16_with(2))) {
    if (!g.attn.uses_memory()) continue;
    const Triple ke = g.attn.kv_extents();
    const Index small = compressed_extents(ke, g.attn.compression_factor).volume();
    want += 2 * g.attn.d_in * 4 * (ke.volume() + small);
    want_raw += 2 * g.attn.d_in * 4 * 2 * ke.volume();
  }
  CHECK(c.cache_bytes == want);
  CHECK(u.cache_bytes == want_raw);
  ModelSpec longer = presets::mvit16();
  longer.frames = 32;
  CHECK(count_costs(longer, kFps, CostMode::BaselineScalingT).activation_bytes > b.activation_bytes);
}

TEST_CASE("cost CSV") {
  CHECK(cost_csv_header() == "mode,T,M,factor,aug_policy,flops,params,support_s,rf_clips,cache_bytes");
  const auto r = count_costs(presets::memvit16(), kFps, CostMode::Memvit);
  const std::string row = cost_csv_row(presets::memvit16(), r);
  CHECK(row.rfind("memvit,16,2,4x2x2,uniform-50%,", 0) == 0);
  CHECK(row == cost_csv_row(presets::memvit16(), count_costs(presets::memvit16(), kFps, CostMode::Memvit)));
  const auto rb = count_costs(presets::memvit16(), kFps, CostMode::BaselineScalingT);
  CHECK(cost_csv_row(presets::memvit16(), rb).rfind("baseline-scaling-T,16,0,4x2x2,none,", 0) == 0);
  CHECK(parse_cost_mode("no-compress") == CostMode::MemvitNoCompress);
  CHECK_THROWS_AS(parse_cost_mode("cheap"), ConfigError);
}

TEST_CASE("traced receptive field matches the analytic reach") {
  struct Case {
    Index m;
    std::string policy;
    Index aug;
  };
  for (const Case& c : {Case{0, "all", 0}, Case{1, "late", 1}, Case{1, "all", 2}, Case{2, "all", 2}}) {
    ModelSpec s = presets::toy();
    s.memory_len = c.m;
    s.aug_policy = AugPolicy::parse(c.policy);
    CHECK(receptive_field_clips(s) == 1 + c.m * c.aug);
    for (std::uint64_t seed : {1, 2, 3}) {
      Model<double> model(s, seed);
      const RfTrace r = trace_receptive_field(model, receptive_field_clips(s) + 2, seed);
      CAPTURE(c.m);
      CAPTURE(c.policy);
      CHECK(r.matches());
      CHECK(r.traced_output == 1 + c.m * c.aug);
    }
  }
}

TEST_CASE("a saturated probe is reported") {
  Model<double> model(presets::toy(), 1);
  const RfTrace r = trace_receptive_field(model, 2);
  CHECK(r.saturated);
  CHECK_FALSE(r.matches());
}
