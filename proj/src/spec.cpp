#include "memvit/model/spec.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace memvit {

using nlohmann::json;

std::string AugPolicy::name() const {
  switch (kind) {
    case Kind::All:
      return "all";
    case Kind::Uniform:
      return "uniform-" + std::to_string(percent) + "%";
    case Kind::Early:
      return "early";
    case Kind::Middle:
      return "middle";
    case Kind::Late:
      return "late";
    case Kind::Explicit:
      return "explicit";
  }
  return "?";
}

AugPolicy AugPolicy::parse(const std::string& text) {
  AugPolicy p;
  if (text == "all") {
    p.kind = Kind::All;
  } else if (text == "early") {
    p.kind = Kind::Early;
  } else if (text == "middle") {
    p.kind = Kind::Middle;
  } else if (text == "late") {
    p.kind = Kind::Late;
  } else if (text == "explicit") {
    p.kind = Kind::Explicit;
  } else if (text.rfind("uniform-", 0) == 0 && text.size() > 9 && text.back() == '%') {
    const std::string digits = text.substr(8, text.size() - 9);
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw ConfigError("bad augmentation policy \"" + text + "\"");
    }
    p.kind = Kind::Uniform;
    p.percent = std::stoi(digits);
    if (p.percent < 1 || p.percent > 100) throw ConfigError("uniform percentage must be in [1, 100]");
  } else {
    throw ConfigError("unknown augmentation policy \"" + text +
                      "\" (all, uniform-K%, early, middle, late, explicit)");
  }
  return p;
}

Index ModelSpec::total_depth() const {
  Index n = 0;
  for (const auto& s : stages) n += s.depth;
  return n;
}

namespace {

PoolSpec window(Triple kernel, Triple stride, bool learnable, bool causal) {
  PoolSpec p;
  p.kernel = kernel;
  p.stride = stride;
  for (int a = 0; a < 3; ++a) p.padding[a] = kernel[a] / 2;
  p.learnable = learnable;
  p.causal = causal;
  return p;
}

}  // namespace

Triple ModelSpec::embed_extents() const {
  PoolSpec cube;
  cube.kernel = cube_kernel;
  cube.stride = cube_stride;
  cube.padding = cube_padding;
  cube.causal = causal;
  return cube.output_extents({frames, height, width});
}

std::vector<int> ModelSpec::aug_layers() const {
  const int depth = static_cast<int>(total_depth());
  std::vector<int> out;
  auto stage_range = [&](std::size_t first, std::size_t last) {
    int start = 0;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      for (Index l = 0; l < stages[s].depth; ++l) {
        if (s >= first && s < last) out.push_back(start + static_cast<int>(l));
      }
      start += static_cast<int>(stages[s].depth);
    }
  };
  const std::size_t n_stages = stages.size();
  switch (aug_policy.kind) {
    case AugPolicy::Kind::All:
      for (int i = 0; i < depth; ++i) out.push_back(i);
      break;
    case AugPolicy::Kind::Uniform: {
      const int n = static_cast<int>(std::lround(depth * aug_policy.percent / 100.0));
      for (int i = 0; i < n; ++i) out.push_back(i * depth / n);
      break;
    }
    case AugPolicy::Kind::Early:
      if (n_stages >= 2) stage_range(0, n_stages - 2);
      break;
    case AugPolicy::Kind::Middle:
      if (n_stages >= 2) stage_range(n_stages - 2, n_stages - 1);
      break;
    case AugPolicy::Kind::Late:
      stage_range(n_stages - 1, n_stages);
      break;
    case AugPolicy::Kind::Explicit:
      out = aug_policy.layers;
      std::sort(out.begin(), out.end());
      if (std::adjacent_find(out.begin(), out.end()) != out.end()) {
        throw ConfigError("memory.aug_layers: duplicate layer index");
      }
      for (int i : out) {
        if (i < 0 || i >= depth) {
          throw ConfigError("memory.aug_layers: index " + std::to_string(i) + " outside [0, " +
                            std::to_string(depth) + ")");
        }
      }
      break;
  }
  if (out.empty()) {
    throw ConfigError("memory.aug_policy: \"" + aug_policy.name() + "\" selects no layer of a " +
                      std::to_string(n_stages) + "-stage model");
  }
  return out;
}

void ModelSpec::validate() const {
  auto positive = [](Index v, const std::string& field) {
    if (v < 1) throw ConfigError(field + ": must be >= 1, got " + std::to_string(v));
  };
  auto positive3 = [&](Triple v, const std::string& field) {
    for (int a = 0; a < 3; ++a) positive(v[a], field + "[" + std::to_string(a) + "]");
  };
  positive(frames, "input.frames");
  positive(height, "input.height");
  positive(width, "input.width");
  positive(sampling_stride, "input.sampling_stride");
  positive3(cube_kernel, "cube.kernel");
  positive3(cube_stride, "cube.stride");
  for (int a = 0; a < 3; ++a) {
    if (cube_padding[a] < 0) throw ConfigError("cube.padding[" + std::to_string(a) + "]: must be >= 0");
  }
  positive3(pool_kernel, "pool_kernel");
  if (stages.empty()) throw ConfigError("stages: at least one stage is required");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string at = "stages[" + std::to_string(s) + "]";
    positive(stages[s].depth, at + ".depth");
    positive(stages[s].channels, at + ".channels");
    positive(stages[s].heads, at + ".heads");
    positive3(stages[s].q_stride, at + ".q_stride");
    positive3(stages[s].kv_stride, at + ".kv_stride");
    if (stages[s].channels % stages[s].heads != 0) {
      throw ConfigError(at + ".channels: " + std::to_string(stages[s].channels) + " not divisible by " +
                        std::to_string(stages[s].heads) + " heads");
    }
    if (!(stages[s].mlp_ratio > 0.0)) throw ConfigError(at + ".mlp_ratio: must be positive");
  }
  if (memory_len < 0) throw ConfigError("memory.length: must be >= 0");
  positive3(compression_factor, "memory.compression_factor");
  positive(num_classes, "num_classes");
  if (!(rel_pos_init_std >= 0.0)) throw ConfigError("rel_pos_init_std: must be >= 0");
  if (memory_len > 0) aug_layers();
  layer_geometry(*this);
}

std::vector<LayerGeometry> layer_geometry(const ModelSpec& spec) {
  std::vector<LayerGeometry> out;
  const std::vector<int> aug = spec.memory_len > 0 ? spec.aug_layers() : std::vector<int>{};
  Triple extents = spec.embed_extents();
  Index dim = spec.stages.front().channels;
  int index = 0;
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const StageSpec& st = spec.stages[s];
    for (Index l = 0; l < st.depth; ++l, ++index) {
      LayerGeometry g;
      g.index = index;
      g.stage = static_cast<int>(s);
      const Triple q_stride = l == 0 ? st.q_stride : Triple{1, 1, 1};
      auto& a = g.attn;
      a.d_in = dim;
      a.d_out = st.channels;
      a.heads = st.heads;
      a.input_extents = extents;
      if (q_stride.volume() > 1) {
        a.pool_q = window(spec.pool_kernel, q_stride, true, spec.causal);
        g.skip_pool = window(spec.pool_kernel, q_stride, false, spec.causal);
      } else {
        g.skip_pool.learnable = false;
      }
      a.pool_kv = window(spec.pool_kernel, st.kv_stride, true, spec.causal);
      if (a.pool_kv.is_identity()) a.pool_kv = PoolSpec{};
      const bool augmented = std::binary_search(aug.begin(), aug.end(), index);
      a.memory_enabled = augmented;
      a.memory_len = augmented ? spec.memory_len : 0;
      a.compression_factor = spec.compression_factor;
      a.causal = spec.causal;
      a.rel_pos_enabled = spec.rel_pos;
      a.rel_pos_init_std = spec.rel_pos_init_std;
      try {
        a.validate();
      } catch (const ConfigError& e) {
        throw ConfigError("layer " + std::to_string(index) + " (stage " + std::to_string(s) + "): " + e.what());
      }
      g.mlp_hidden = static_cast<Index>(std::lround(st.mlp_ratio * static_cast<double>(st.channels)));
      g.skip_proj = dim != st.channels;
      g.output_extents = a.query_extents();
      extents = g.output_extents;
      dim = st.channels;
      out.push_back(g);
    }
  }
  return out;
}

ModelSpec make_causal(ModelSpec spec) {
  spec.causal = true;
  return spec;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace {

json triple_json(Triple t) { return json::array({t.t, t.h, t.w}); }

class Reader {
 public:
  explicit Reader(const json& root) : root_(root) {}

  const json& at(const json& obj, const std::string& key, const std::string& path) const {
    if (!obj.is_object()) throw ConfigError(path + ": expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) throw ConfigError(join(path, key) + ": missing field");
    return *it;
  }
  const json* maybe(const json& obj, const std::string& key) const {
    auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
  }
  Index integer(const json& v, const std::string& path) const {
    if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer");
    return v.get<Index>();
  }
  double number(const json& v, const std::string& path) const {
    if (!v.is_number()) throw ConfigError(path + ": expected a number");
    return v.get<double>();
  }
  bool boolean(const json& v, const std::string& path) const {
    if (!v.is_boolean()) throw ConfigError(path + ": expected true or false");
    return v.get<bool>();
  }
  std::string string(const json& v, const std::string& path) const {
    if (!v.is_string()) throw ConfigError(path + ": expected a string");
    return v.get<std::string>();
  }
  Triple triple(const json& v, const std::string& path) const {
    if (!v.is_array() || v.size() != 3) throw ConfigError(path + ": expected [t, h, w]");
    Triple t;
    for (int a = 0; a < 3; ++a) t[a] = integer(v[static_cast<std::size_t>(a)], path + "[" + std::to_string(a) + "]");
    return t;
  }
  static std::string join(const std::string& path, const std::string& key) { return path + "." + key; }

 private:
  const json& root_;
};

}  // namespace

std::string spec_to_json(const ModelSpec& spec) {
  json j;
  j["name"] = spec.name;
  j["input"] = {{"frames", spec.frames},
                {"height", spec.height},
                {"width", spec.width},
                {"sampling_stride", spec.sampling_stride}};
  j["cube"] = {{"kernel", triple_json(spec.cube_kernel)},
               {"stride", triple_json(spec.cube_stride)},
               {"padding", triple_json(spec.cube_padding)}};
  j["pool_kernel"] = triple_json(spec.pool_kernel);
  j["stages"] = json::array();
  for (const auto& s : spec.stages) {
    j["stages"].push_back({{"depth", s.depth},
                           {"channels", s.channels},
                           {"heads", s.heads},
                           {"q_stride", triple_json(s.q_stride)},
                           {"kv_stride", triple_json(s.kv_stride)},
                           {"mlp_ratio", s.mlp_ratio}});
  }
  json mem = {{"length", spec.memory_len},
              {"compression_factor", triple_json(spec.compression_factor)},
              {"aug_policy", spec.aug_policy.name()}};
  if (spec.aug_policy.kind == AugPolicy::Kind::Explicit) mem["aug_layers"] = spec.aug_policy.layers;
  j["memory"] = mem;
  j["causal"] = spec.causal;
  j["rel_pos"] = spec.rel_pos;
  j["rel_pos_init_std"] = spec.rel_pos_init_std;
  j["num_classes"] = spec.num_classes;
  return j.dump(2) + "\n";
}

ModelSpec spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("spec is not valid JSON: ") + e.what(), e.byte);
  }
  const Reader r(j);
  if (!j.is_object()) throw ConfigError("spec: expected an object");
  ModelSpec s;
  if (const auto* v = r.maybe(j, "name")) s.name = r.string(*v, "spec.name");
  const json& in = r.at(j, "input", "spec");
  s.frames = r.integer(r.at(in, "frames", "spec.input"), "spec.input.frames");
  s.height = r.integer(r.at(in, "height", "spec.input"), "spec.input.height");
  s.width = r.integer(r.at(in, "width", "spec.input"), "spec.input.width");
  if (const auto* v = r.maybe(in, "sampling_stride")) s.sampling_stride = r.integer(*v, "spec.input.sampling_stride");
  if (const auto* cube = r.maybe(j, "cube")) {
    if (const auto* v = r.maybe(*cube, "kernel")) s.cube_kernel = r.triple(*v, "spec.cube.kernel");
    if (const auto* v = r.maybe(*cube, "stride")) s.cube_stride = r.triple(*v, "spec.cube.stride");
    if (const auto* v = r.maybe(*cube, "padding")) s.cube_padding = r.triple(*v, "spec.cube.padding");
  }
  if (const auto* v = r.maybe(j, "pool_kernel")) s.pool_kernel = r.triple(*v, "spec.pool_kernel");
  const json& stages = r.at(j, "stages", "spec");
  if (!stages.is_array()) throw ConfigError("spec.stages: expected an array");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string at = "spec.stages[" + std::to_string(i) + "]";
    const json& st = stages[i];
    StageSpec g;
    g.depth = r.integer(r.at(st, "depth", at), at + ".depth");
    g.channels = r.integer(r.at(st, "channels", at), at + ".channels");
    if (const auto* v = r.maybe(st, "heads")) g.heads = r.integer(*v, at + ".heads");
    if (const auto* v = r.maybe(st, "q_stride")) g.q_stride = r.triple(*v, at + ".q_stride");
    if (const auto* v = r.maybe(st, "kv_stride")) g.kv_stride = r.triple(*v, at + ".kv_stride");
    if (const auto* v = r.maybe(st, "mlp_ratio")) g.mlp_ratio = r.number(*v, at + ".mlp_ratio");
    s.stages.push_back(g);
  }
  if (const auto* mem = r.maybe(j, "memory")) {
    if (const auto* v = r.maybe(*mem, "length")) s.memory_len = r.integer(*v, "spec.memory.length");
    if (const auto* v = r.maybe(*mem, "compression_factor")) {
      s.compression_factor = r.triple(*v, "spec.memory.compression_factor");
    }
    if (const auto* v = r.maybe(*mem, "aug_policy")) {
      try {
        s.aug_policy = AugPolicy::parse(r.string(*v, "spec.memory.aug_policy"));
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("spec.memory.aug_policy: ") + e.what());
      }
    }
    if (const auto* v = r.maybe(*mem, "aug_layers")) {
      if (!v->is_array()) throw ConfigError("spec.memory.aug_layers: expected an array");
      for (std::size_t i = 0; i < v->size(); ++i) {
        s.aug_policy.layers.push_back(
            static_cast<int>(r.integer((*v)[i], "spec.memory.aug_layers[" + std::to_string(i) + "]")));
      }
      if (s.aug_policy.kind != AugPolicy::Kind::Explicit) {
        throw ConfigError("spec.memory.aug_layers: only allowed with aug_policy \"explicit\"");
      }
    }
  }
  if (const auto* v = r.maybe(j, "causal")) s.causal = r.boolean(*v, "spec.causal");
  if (const auto* v = r.maybe(j, "rel_pos")) s.rel_pos = r.boolean(*v, "spec.rel_pos");
  if (const auto* v = r.maybe(j, "rel_pos_init_std")) s.rel_pos_init_std = r.number(*v, "spec.rel_pos_init_std");
  if (const auto* v = r.maybe(j, "num_classes")) s.num_classes = r.integer(*v, "spec.num_classes");
  try {
    s.validate();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    throw ConfigError(what.rfind("spec.", 0) == 0 ? what : "spec." + what);
  }
  return s;
}

ModelSpec load_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open spec file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return spec_from_json(ss.str());
}

namespace presets {

ModelSpec mvit16() {
  ModelSpec s;
  s.name = "MViT-16";
  s.frames = 16;
  s.sampling_stride = 4;
  s.stages = {
      {1, 96, 1, {1, 1, 1}, {1, 8, 8}, 4.0},
      {2, 192, 2, {1, 2, 2}, {1, 4, 4}, 4.0},
      {11, 384, 4, {1, 2, 2}, {1, 2, 2}, 4.0},
      {2, 768, 8, {1, 2, 2}, {1, 1, 1}, 4.0},
  };
  s.memory_len = 0;
  return s;
}

ModelSpec memvit16() {
  ModelSpec s = mvit16();
  s.name = "MeMViT-16";
  s.memory_len = 2;
  return s;
}

ModelSpec memvit24() {
  ModelSpec s = memvit16();
  s.name = "MeMViT-24";
  s.frames = 32;
  s.sampling_stride = 3;
  s.stages[0].depth = 2;
  s.stages[1].depth = 3;
  s.stages[2].depth = 16;
  s.stages[3].depth = 3;
  return s;
}

ModelSpec toy() {
  ModelSpec s;
  s.name = "toy";
  s.frames = 4;
  s.height = 16;
  s.width = 16;
  s.sampling_stride = 1;
  s.stages = {
      {1, 8, 1, {1, 1, 1}, {1, 2, 2}, 2.0},
      {1, 16, 2, {1, 2, 2}, {1, 1, 1}, 2.0},
  };
  s.memory_len = 1;
  s.aug_policy = AugPolicy::parse("all");
  s.num_classes = 4;
  return s;
}

}  // namespace presets

}  // namespace memvit
