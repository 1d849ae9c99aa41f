#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "memvit/analysis/cost_model.hpp"
#include "memvit/analysis/receptive_field.hpp"
#include "memvit/memory/bank_io.hpp"
#include "memvit/model/checkpoint.hpp"
#include "memvit/model/stream_grad_check.hpp"
#include "memvit/streaming/recall_experiment.hpp"

namespace fs = std::filesystem;
using namespace memvit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitAcceptance = 3;

ModelSpec resolve_spec(const std::string& arg, const ModelSpec& fallback) {
  if (arg.empty()) return fallback;
  if (arg == "mvit16") return presets::mvit16();
  if (arg == "memvit16") return presets::memvit16();
  if (arg == "memvit24") return presets::memvit24();
  if (arg == "toy") return presets::toy();
  return load_spec(arg);
}

// Writes to a file, or stdout for "-".
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path != "-") {
      file_.open(path);
      if (!file_) throw ConfigError("cannot write " + path);
    }
  }
  std::ostream& stream() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

 private:
  std::ofstream file_;
};

std::vector<Index> parse_list(const std::string& text, const std::string& what) {
  std::vector<Index> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<Index>(v));
    } catch (const std::exception&) {
      throw ConfigError(what + ": \"" + item + "\" is not an integer");
    }
  }
  return out;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// --------------------------------------------------------------------------
// bench-flops
// --------------------------------------------------------------------------

struct BenchArgs {
  std::string spec;
  std::string out = "-";
  std::vector<std::string> sweeps;
  std::string modes = "baseline-scaling-T,memvit,memvit-no-compress";
  double fps = kDefaultFps;
};

int cmd_bench_flops(const BenchArgs& a) {
  const ModelSpec spec = resolve_spec(a.spec, presets::memvit16());
  std::vector<CostMode> modes;
  {
    std::stringstream ss(a.modes);
    std::string m;
    while (std::getline(ss, m, ',')) {
      if (!m.empty()) modes.push_back(parse_cost_mode(m));
    }
  }
  std::vector<Index> m_values{0, 1, 2, 3, 4};
  std::vector<Index> t_values{16, 20, 24, 28, 32};
  if (!a.sweeps.empty()) {
    m_values.clear();
    t_values.clear();
    for (const auto& s : a.sweeps) {
      if (s.empty()) continue;
      if (s.size() < 2 || s[1] != '=' || (s[0] != 'M' && s[0] != 'T')) {
        throw ConfigError("--sweep expects M=v1,v2,... or T=v1,v2,..., got \"" + s + "\"");
      }
      auto values = parse_list(s.substr(2), "--sweep");
      (s[0] == 'M' ? m_values : t_values) = std::move(values);
    }
  }
  Output out(a.out);
  out.stream() << cost_csv_header() << "\n";
  std::int64_t baseline_flops = 0;
  for (CostMode mode : modes) {
    const bool baseline = mode == CostMode::BaselineScalingT;
    for (Index v : baseline ? t_values : m_values) {
      ModelSpec s = spec;
      if (baseline) {
        s.frames = v;
      } else {
        s.memory_len = v;
      }
      const CostReport r = count_costs(s, a.fps, mode);
      if (baseline && baseline_flops == 0) baseline_flops = r.flops;
      out.stream() << cost_csv_row(s, r) << "\n";
      std::cerr << to_string(mode) << (baseline ? " T=" : " M=") << v << ": " << fmt("%.2f", r.flops / 1e9)
                << " GFLOPs";
      if (baseline_flops > 0) std::cerr << ", ratio " << fmt("%.4f", double(r.flops) / double(baseline_flops));
      std::cerr << ", support " << fmt("%.1f", r.temporal_support_s) << " s\n";
    }
  }
  return kExitOk;
}

// --------------------------------------------------------------------------
// train-synth
// --------------------------------------------------------------------------

struct TrainArgs {
  std::string spec;
  std::string out = "-";
  std::string checkpoint;
  std::uint64_t seed = 0;
  Index cue_offset = 2;
  Index classes = 4;
  Index steps = 0;
  std::string curriculum;
  Index eval_videos = 40;
  Index eval_clips = 50;
  bool memory_drop = false;
};

int cmd_train_synth(const TrainArgs& a) {
  RecallExperimentConfig cfg = recall_experiment_defaults();
  cfg.spec = resolve_spec(a.spec, cfg.spec);
  cfg.task.cue_offset = a.cue_offset;
  cfg.task.num_classes = a.classes;
  cfg.spec.num_classes = a.classes;
  if (a.steps > 0) cfg.steps = a.steps;
  if (!a.curriculum.empty()) cfg.curriculum = parse_list(a.curriculum, "--curriculum");
  if (a.cue_offset == 0 && a.curriculum.empty()) cfg.curriculum = {1, 2};
  cfg.eval_videos = a.eval_videos;
  cfg.eval_clips = a.eval_clips;
  cfg.memory_drop = a.memory_drop;
  cfg.seed = a.seed;
  cfg.task.validate();
  cfg.spec.validate();

  Output out(a.out);
  out.stream() << "variant,phase,step,curriculum_len,lr,loss,accuracy\n";
  bool diverged = false;
  for (const bool memory : {true, false}) {
    RecallExperimentConfig c = cfg;
    if (!memory) c.spec.memory_len = 0;
    const std::string variant = memory ? "memory" : "memoryless";
    Model<double> model(c.spec, a.seed);
    std::vector<Matrix<double>> last_good;
    auto keep = [&] {
      last_good.clear();
      for (auto* p : model.parameters()) last_good.push_back(p->tensor.value());
    };
    keep();
    const RecallMetrics m = run_recall_experiment(c, model, [&](const TrainLogEntry& e) {
      out.stream() << variant << ",train," << e.step << "," << e.curriculum_len << "," << fmt("%.9g", e.lr) << ","
                   << fmt("%.9g", e.loss) << "," << fmt("%.6f", e.accuracy) << "\n";
      if (std::isfinite(e.loss)) keep();
      if (e.step % 100 == 0) {
        std::cerr << variant << " step " << e.step << " len " << e.curriculum_len << " loss " << fmt("%.4f", e.loss)
                  << "\n";
      }
    });
    if (m.diverged) {
      auto params = model.parameters();
      for (std::size_t i = 0; i < params.size(); ++i) params[i]->tensor.mutable_value() = last_good[i];
      if (!a.checkpoint.empty()) save_checkpoint(model, a.checkpoint + "." + variant + ".last_good");
      std::cerr << variant << ": loss diverged, last good parameters kept\n";
      diverged = true;
      break;
    }
    out.stream() << variant << ",eval,," << "," << "," << "," << fmt("%.6f", m.eval.accuracy()) << "\n";
    std::cerr << variant << ": held-out accuracy " << fmt("%.4f", m.eval.accuracy()) << " over " << m.eval.labelled
              << " clips (chance " << fmt("%.4f", m.chance) << ")\n";
    if (!a.checkpoint.empty()) save_checkpoint(model, a.checkpoint + (memory ? "" : ".memoryless"));
  }
  return diverged ? kExitAcceptance : kExitOk;
}

// --------------------------------------------------------------------------
// stream-infer
// --------------------------------------------------------------------------

struct InferArgs {
  std::string spec;
  std::string checkpoint;
  std::string manifest;
  std::string out = "-";
  Index snapshot_every = 0;
  std::string snapshot_dir = "snapshots";
  std::string resume;
  bool probe = false;
  std::uint64_t seed = 0;
};

struct PredictionRow {
  Index global = 0;
  std::int64_t video = 0;
  Index clip = 0;
  bool boundary = false;
  Index label = 0;
  Index prediction = 0;
  RowVector<float> logits;
};

void write_snapshot(const std::string& dir, Index next_global, const std::vector<MemoryBank<float>>& banks) {
  fs::create_directories(dir);
  for (const auto& b : banks) {
    const auto bytes = bank_serialize(b);
    std::ofstream f(dir + "/bank_" + std::to_string(b.layer_id()) + ".mvbk", std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  std::ofstream state(dir + "/state.json");
  state << nlohmann::json{{"next_clip", next_global}, {"banks", banks.size()}}.dump(2) << "\n";
}

Index read_snapshot(const std::string& dir, std::vector<MemoryBank<float>>& banks) {
  std::ifstream state(dir + "/state.json");
  if (!state) throw ConfigError("snapshot " + dir + " has no state.json");
  nlohmann::json j;
  try {
    state >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("snapshot " + dir + "/state.json: " + e.what());
  }
  for (auto& b : banks) {
    const auto bytes = read_file_bytes(dir + "/bank_" + std::to_string(b.layer_id()) + ".mvbk");
    MemoryBank<float> loaded = bank_deserialize<float>(bytes, b.max_len());
    if (loaded.layer_id() != b.layer_id()) throw ConfigError("snapshot bank layer mismatch in " + dir);
    b = std::move(loaded);
  }
  return j.at("next_clip").get<Index>();
}

std::vector<PredictionRow> run_stream(Model<float>& model, const Corpus& corpus, Index start,
                                      std::vector<MemoryBank<float>>& banks, Index snapshot_every,
                                      const std::string& snapshot_dir) {
  std::vector<PredictionRow> rows;
  ClipStream stream(corpus);
  while (auto item = stream.next()) {
    if (const auto* skip = std::get_if<SkippedVideo>(&*item)) {
      std::cerr << "skipping video " << skip->video_id << ": " << skip->reason << "\n";
      continue;
    }
    const auto& e = std::get<ClipEvent>(*item);
    if (e.global_index < start) continue;
    auto out = model.forward_clip(to_tokens<float>(e), banks);
    PredictionRow r;
    r.global = e.global_index;
    r.video = e.video_id;
    r.clip = e.clip_index;
    r.boundary = e.is_boundary;
    r.label = e.label;
    r.logits = out.logits.value().row(0);
    r.logits.maxCoeff(&r.prediction);
    rows.push_back(r);
    if (snapshot_every > 0 && (e.global_index + 1) % snapshot_every == 0) {
      write_snapshot(snapshot_dir + "/clip_" + std::to_string(e.global_index + 1), e.global_index + 1, banks);
    }
  }
  return rows;
}

int cmd_stream_infer(const InferArgs& a) {
  const ModelSpec spec = resolve_spec(a.spec, presets::toy());
  if (a.manifest.empty()) throw ConfigError("--manifest is required");
  const Corpus corpus = load_corpus(a.manifest);
  if (corpus.clip != Triple{spec.frames, spec.height, spec.width}) {
    throw ConfigError("manifest clip " + to_string(corpus.clip) + " does not match spec input " +
                      to_string(Triple{spec.frames, spec.height, spec.width}));
  }
  Model<float> model(spec, a.seed);
  if (!a.checkpoint.empty()) load_checkpoint(model, a.checkpoint);

  auto banks = model.make_banks();
  Index start = 0;
  if (!a.resume.empty()) start = read_snapshot(a.resume, banks);
  const auto rows = run_stream(model, corpus, start, banks, a.snapshot_every, a.snapshot_dir);

  Output out(a.out);
  out.stream() << "global_index,video_id,clip_index,is_boundary,label,prediction";
  for (Index c = 0; c < spec.num_classes; ++c) out.stream() << ",logit_" << c;
  out.stream() << "\n";
  for (const auto& r : rows) {
    out.stream() << r.global << "," << r.video << "," << r.clip << "," << (r.boundary ? 1 : 0) << "," << r.label << ","
                 << r.prediction;
    for (Index c = 0; c < r.logits.size(); ++c) out.stream() << "," << fmt("%.9g", r.logits(c));
    out.stream() << "\n";
  }

  if (a.probe) {
    // Replace every frame of the first video and compare all later videos.
    if (corpus.videos.size() < 2) throw ConfigError("--probe needs at least two videos");
    Corpus perturbed = corpus;
    auto& v = perturbed.videos.front();
    v.seed ^= 0xA5A5A5A5A5A5A5A5ULL;
    v = make_video(v.video_id, v.frames, v.seed, v.task, perturbed.clip.t);
    auto fresh = model.make_banks();
    const auto moved = run_stream(model, perturbed, 0, fresh, 0, "");
    auto base_banks = model.make_banks();
    const auto base = run_stream(model, corpus, 0, base_banks, 0, "");
    Index compared = 0;
    for (std::size_t i = 0; i < base.size(); ++i) {
      if (base[i].video == corpus.videos.front().video_id) continue;
      ++compared;
      if (base[i].logits != moved[i].logits) {
        std::cerr << "probe: clip " << base[i].global << " of video " << base[i].video
                  << " changed when another video was perturbed\n";
        return kExitAcceptance;
      }
    }
    std::cerr << "probe: " << compared << " clips of later videos unchanged under perturbation of video "
              << corpus.videos.front().video_id << "\n";
  }
  return kExitOk;
}

// --------------------------------------------------------------------------
// trace-rf
// --------------------------------------------------------------------------

struct TraceArgs {
  std::string spec;
  std::string out = "-";
  Index probe_clips = 0;
  std::uint64_t seed = 0;
  bool table = false;
};

int cmd_trace_rf(const TraceArgs& a) {
  const ModelSpec base = resolve_spec(a.spec, presets::toy());
  std::vector<ModelSpec> specs;
  if (a.table) {
    for (Index m = 1; m <= 4; ++m) {
      ModelSpec s = base;
      s.memory_len = m;
      specs.push_back(s);
    }
  } else {
    specs.push_back(base);
  }
  Output out(a.out);
  out.stream() << "name,M,L_aug,analytic_clips,traced_clips,increase,match\n";
  bool all = true;
  for (const auto& s : specs) {
    const Index l_aug = s.memory_len > 0 ? static_cast<Index>(s.aug_layers().size()) : 0;
    const Index analytic = receptive_field_clips(s);
    Model<double> model(s, a.seed);
    const Index probes = a.probe_clips > 0 ? a.probe_clips : analytic + 3;
    const RfTrace t = trace_receptive_field(model, probes, a.seed);
    all = all && t.matches();
    out.stream() << s.name << "," << s.memory_len << "," << l_aug << "," << analytic << "," << t.traced_output << ","
                 << analytic - 1 << "x," << (t.matches() ? "yes" : "no") << "\n";
    std::cerr << s.name << " M=" << s.memory_len << " L_aug=" << l_aug << ": analytic " << analytic << ", traced "
              << t.traced_output << (t.saturated ? " (probe too short)" : "") << "\n";
  }
  return all ? kExitOk : kExitAcceptance;
}

// --------------------------------------------------------------------------
// grad-check
// --------------------------------------------------------------------------

struct GradArgs {
  std::string spec;
  std::string out = "-";
  std::uint64_t seed = 0;
  Index clips = 3;
  double eps = 1e-5;
  double tol = 1e-4;
};

int cmd_grad_check(const GradArgs& a) {
  const ModelSpec spec = resolve_spec(a.spec, presets::toy());
  Model<double> model(spec, a.seed);
  std::mt19937_64 rng(a.seed + 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<Index> cls(0, spec.num_classes - 1);
  const Triple e{spec.frames, spec.height, spec.width};
  ClipSequence<double> seq;
  for (Index c = 0; c < a.clips; ++c) {
    Matrix<double> px(e.volume(), 3);
    for (Index i = 0; i < px.size(); ++i) px.data()[i] = u(rng);
    seq.clips.emplace_back(Tensor<double>(px), e, c, 0);
    seq.labels.push_back(cls(rng));
  }
  const GradCheckResult r = stream_grad_check(model, seq, a.eps);
  Output out(a.out);
  out.stream() << "parameters_checked,max_rel_error,worst\n"
               << r.checked << "," << fmt("%.3e", r.max_rel_error) << "," << r.worst << "\n";
  std::cerr << "max relative error " << fmt("%.3e", r.max_rel_error) << " at " << r.worst << " over " << r.checked
            << " elements\n";
  return r.max_rel_error <= a.tol ? kExitOk : kExitAcceptance;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* d = std::getenv("MEMVIT_DETERMINISTIC"); d != nullptr && std::string(d) == "0") {
    std::cerr << "note: reductions always use a fixed order; MEMVIT_DETERMINISTIC=0 has no effect\n";
  }
  CLI::App app{"Streaming memory-augmented video transformer engine"};
  app.require_subcommand(1);

  BenchArgs bench;
  auto* b = app.add_subcommand("bench-flops", "Analytic FLOPs/params/support CSV over a sweep");
  b->add_option("--spec", bench.spec, "Spec file or preset (mvit16, memvit16, memvit24, toy)");
  b->add_option("--out", bench.out, "CSV output path, - for stdout");
  b->add_option("--sweep", bench.sweeps, "M=v,... and/or T=v,...");
  b->add_option("--modes", bench.modes, "Comma-separated cost modes");
  b->add_option("--fps", bench.fps, "Frames per second for support in seconds");

  TrainArgs train;
  auto* t = app.add_subcommand("train-synth", "Train memory and memoryless twins on the clip-recall task");
  t->add_option("--spec", train.spec, "Spec file or preset");
  t->add_option("--seed", train.seed);
  t->add_option("--out", train.out, "Metrics CSV path");
  t->add_option("--checkpoint", train.checkpoint, "Checkpoint path for the trained models");
  t->add_option("--cue-offset", train.cue_offset, "Clips between cue and label");
  t->add_option("--classes", train.classes);
  t->add_option("--steps", train.steps);
  t->add_option("--curriculum", train.curriculum, "Comma-separated clip counts per phase");
  t->add_option("--eval-videos", train.eval_videos);
  t->add_option("--eval-clips", train.eval_clips);
  t->add_flag("--memory-drop", train.memory_drop, "Randomly hide the oldest memory steps during training");

  InferArgs infer;
  auto* s = app.add_subcommand("stream-infer", "Per-clip predictions over a corpus with bank snapshots");
  s->add_option("--spec", infer.spec, "Spec file or preset");
  s->add_option("--checkpoint", infer.checkpoint);
  s->add_option("--manifest", infer.manifest, "Corpus manifest")->required();
  s->add_option("--out", infer.out, "Predictions CSV path");
  s->add_option("--snapshot-every", infer.snapshot_every, "Write bank snapshots every N clips");
  s->add_option("--snapshot-dir", infer.snapshot_dir);
  s->add_option("--resume", infer.resume, "Snapshot directory to resume from");
  s->add_flag("--probe", infer.probe, "Check that no video influences another");
  s->add_option("--seed", infer.seed, "Initialization seed when no checkpoint is given");

  TraceArgs trace;
  auto* r = app.add_subcommand("trace-rf", "Analytic vs traced temporal receptive field");
  r->add_option("--spec", trace.spec, "Spec file or preset");
  r->add_option("--out", trace.out);
  r->add_option("--probe-clips", trace.probe_clips);
  r->add_option("--seed", trace.seed);
  r->add_flag("--table", trace.table, "Rows for M = 1..4");

  GradArgs grad;
  auto* g = app.add_subcommand("grad-check", "Central-difference check of a streamed sequence");
  g->add_option("--spec", grad.spec, "Spec file or preset");
  g->add_option("--out", grad.out);
  g->add_option("--seed", grad.seed);
  g->add_option("--clips", grad.clips);
  g->add_option("--eps", grad.eps);
  g->add_option("--tol", grad.tol);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*b) return cmd_bench_flops(bench);
    if (*t) return cmd_train_synth(train);
    if (*s) return cmd_stream_infer(infer);
    if (*r) return cmd_trace_rf(trace);
    if (*g) return cmd_grad_check(grad);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
