#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "memvit/model/train.hpp"
#include "memvit/streaming/corpus.hpp"

namespace memvit {

struct RecallExperimentConfig {
  ModelSpec spec;
  RecallTaskSpec task;
  Index steps = 600;
  Index batch = 8;
  std::vector<Index> curriculum{3, 4, 5, 6};  // clips per sequence, one phase each
  double lr = 1e-3;
  double weight_decay = 0.05;
  bool memory_drop = false;
  Index eval_videos = 40;
  Index eval_clips = 50;  // per video
  std::uint64_t seed = 0;
};

/// Toy model used for the recall task: two stages (16 then 32 channels, two
/// heads), M=2 on both layers, temporal reach 5 clips. The wider rel-pos
/// init lets the temporal bias pick out one cached clip early in training.
inline ModelSpec recall_spec() {
  ModelSpec s = presets::toy();
  s.name = "recall-toy";
  s.stages[0].channels = 16;
  s.stages[0].heads = 2;
  s.stages[1].channels = 32;
  s.stages[1].heads = 2;
  s.memory_len = 2;
  s.rel_pos_init_std = 0.3;
  return s;
}

inline RecallExperimentConfig recall_experiment_defaults() {
  RecallExperimentConfig c;
  c.spec = recall_spec();
  c.steps = 6000;
  c.weight_decay = 0.0;
  return c;
}

struct TrainLogEntry {
  Index step = 0;
  Index curriculum_len = 0;
  double lr = 0.0;
  double loss = 0.0;
  double accuracy = 0.0;  // on the step's labelled clips
};

struct StreamEval {
  Index labelled = 0;
  Index correct = 0;
  double accuracy() const { return labelled == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(labelled); }
};

struct RecallMetrics {
  std::vector<TrainLogEntry> log;
  StreamEval eval;
  double chance = 0.0;
  bool diverged = false;
};

/// Streams a corpus through the model with persistent banks and scores the
/// labelled clips.
template <typename Scalar>
StreamEval evaluate_stream(Model<Scalar>& model, const Corpus& corpus) {
  StreamEval r;
  auto banks = model.make_banks();
  ClipStream stream(corpus);
  while (auto item = stream.next()) {
    const auto* e = std::get_if<ClipEvent>(&*item);
    if (e == nullptr) continue;
    auto out = model.forward_clip(to_tokens<Scalar>(*e), banks);
    if (e->label < 0) continue;
    Index argmax = 0;
    out.logits.value().row(0).maxCoeff(&argmax);
    ++r.labelled;
    r.correct += argmax == e->label ? 1 : 0;
  }
  return r;
}

inline Corpus recall_corpus(const RecallTaskSpec& task, const ModelSpec& spec, Index videos, Index clips,
                            std::uint64_t seed, std::int64_t first_id = 0) {
  Corpus c;
  c.clip = {spec.frames, spec.height, spec.width};
  std::mt19937_64 rng(seed);
  for (Index i = 0; i < videos; ++i) c.videos.push_back(gen_recall_task(task, rng, first_id + i, clips, spec.frames));
  return c;
}

/// Trains a fresh model on short sequences from clip 0 (fresh banks per
/// sequence, growing curriculum, cosine learning rate) and evaluates it on
/// held-out long streams. `on_step` sees every log entry.
template <typename Scalar>
RecallMetrics run_recall_experiment(const RecallExperimentConfig& cfg, Model<Scalar>& model,
                                    const std::function<void(const TrainLogEntry&)>& on_step = {}) {
  if (cfg.curriculum.empty()) throw ConfigError("curriculum must list at least one length");
  RecallMetrics m;
  m.chance = 1.0 / static_cast<double>(cfg.task.num_classes);
  typename AdamW<Scalar>::Options ao;
  ao.lr = cfg.lr;
  ao.weight_decay = cfg.weight_decay;
  AdamW<Scalar> opt(model.parameters(), ao);
  std::mt19937_64 data_rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);
  std::mt19937_64 drop_rng(cfg.seed ^ 0x8CB92BA72F3D8DD7ULL);
  const Triple extents{cfg.spec.frames, cfg.spec.height, cfg.spec.width};
  const Index phases = static_cast<Index>(cfg.curriculum.size());
  std::int64_t next_id = 1'000'000;
  for (Index step = 0; step < cfg.steps; ++step) {
    const Index len = cfg.curriculum[static_cast<std::size_t>(std::min(phases - 1, step * phases / cfg.steps))];
    std::vector<std::vector<LabeledClip<Scalar>>> batch;
    for (Index b = 0; b < cfg.batch; ++b) {
      const VideoRecord v = gen_recall_task(cfg.task, data_rng, next_id++, len, cfg.spec.frames);
      std::vector<LabeledClip<Scalar>> seq;
      for (Index c = 0; c < len; ++c) {
        TokenTensor<Scalar> clip(Tensor<Scalar>(render_clip(v, c, extents).cast<Scalar>()), extents, c, v.video_id);
        seq.push_back({clip, v.labels[static_cast<std::size_t>(c)]});
      }
      batch.push_back(std::move(seq));
    }
    TrainLogEntry e;
    e.step = step;
    e.curriculum_len = len;
    e.lr = cosine_lr(cfg.lr, step, cfg.steps);
    const TrainStepResult r = train_step(model, batch, opt, len, e.lr, cfg.memory_drop ? &drop_rng : nullptr);
    e.loss = r.loss;
    e.accuracy = r.labelled == 0 ? 0.0 : static_cast<double>(r.correct) / static_cast<double>(r.labelled);
    m.log.push_back(e);
    if (on_step) on_step(e);
    if (!std::isfinite(e.loss)) {
      m.diverged = true;
      return m;
    }
  }
  const Corpus held_out = recall_corpus(cfg.task, cfg.spec, cfg.eval_videos, cfg.eval_clips, cfg.seed + 7919);
  m.eval = evaluate_stream(model, held_out);
  return m;
}

}  // namespace memvit
