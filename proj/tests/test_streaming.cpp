#include <sstream>

#include "doctest.h"
#include "memvit/streaming/recall_experiment.hpp"
#include "support.hpp"

using namespace memvit;
using memvit::testing::bit_identical;

namespace {

Corpus corpus_of(std::vector<Index> frames, Triple clip = {4, 8, 8}) {
  Corpus c;
  c.clip = clip;
  RecallTaskSpec task;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    c.videos.push_back(make_video(static_cast<std::int64_t>(i + 1), frames[i], 100 + i, task, clip.t));
  }
  return c;
}

std::vector<ClipEvent> events(const Corpus& c) {
  std::vector<ClipEvent> out;
  for (auto& item : stream_clips(c)) {
    if (auto* e = std::get_if<ClipEvent>(&item)) out.push_back(*e);
  }
  return out;
}

}  // namespace

TEST_CASE("one ten-clip video") {
  const auto ev = events(corpus_of({40}));
  REQUIRE(ev.size() == 10);
  for (std::size_t i = 0; i < ev.size(); ++i) {
    CHECK(ev[i].is_boundary == (i == 0));
    CHECK(ev[i].clip_index == static_cast<Index>(i));
    CHECK(ev[i].global_index == static_cast<Index>(i));
  }
}

TEST_CASE("boundaries sit at each video's first clip") {
  const auto ev = events(corpus_of({12, 8}));
  REQUIRE(ev.size() == 5);
  std::vector<Index> boundaries;
  for (const auto& e : ev) {
    if (e.is_boundary) boundaries.push_back(e.global_index);
  }
  CHECK(boundaries == std::vector<Index>{0, 3});
  CHECK(ev[3].video_id == 2);
  CHECK(ev[3].clip_index == 0);
}

TEST_CASE("event count is the sum of ceil(frames / clip span)") {
  const std::vector<Index> frames{1, 4, 5, 17, 33, 8};
  Index want = 0;
  for (Index f : frames) want += (f + 3) / 4;
  CHECK(static_cast<Index>(events(corpus_of(frames)).size()) == want);
}

TEST_CASE("partial final clip repeats the last frame") {
  const Corpus c = corpus_of({6});
  const auto ev = events(c);
  REQUIRE(ev.size() == 2);
  const Index plane = 8 * 8;
  const auto& px = ev[1].pixels;
  // Frames 4 and 5 are real; slots 2 and 3 repeat frame 5.
  CHECK(bit_identical(px.middleRows(2 * plane, plane), px.middleRows(plane, plane)));
  CHECK(bit_identical(px.middleRows(3 * plane, plane), px.middleRows(plane, plane)));
  CHECK_FALSE(bit_identical(px.middleRows(0, plane), px.middleRows(plane, plane)));
}

TEST_CASE("streaming is deterministic") {
  const auto a = events(corpus_of({16, 12}));
  const auto b = events(corpus_of({16, 12}));
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(bit_identical(a[i].pixels, b[i].pixels));
}

TEST_CASE("pixels stay in [0, 1]") {
  for (const auto& e : events(corpus_of({16}))) {
    CHECK(e.pixels.minCoeff() >= 0.0);
    CHECK(e.pixels.maxCoeff() <= 1.0);
  }
}

TEST_CASE("empty videos are skipped with a warning event") {
  const Corpus c = corpus_of({8, 0, 4});
  const auto items = stream_clips(c);
  REQUIRE(items.size() == 4);
  const auto* skipped = std::get_if<SkippedVideo>(&items[2]);
  REQUIRE(skipped != nullptr);
  CHECK(skipped->video_id == 2);
  const auto* next = std::get_if<ClipEvent>(&items[3]);
  REQUIRE(next != nullptr);
  CHECK(next->is_boundary);
  CHECK(next->global_index == 2);
  CHECK_THROWS_AS(stream_clips(Corpus{}), ConfigError);
}

TEST_CASE("labels regenerate from the seed") {
  RecallTaskSpec task;
  task.cue_offset = 2;
  std::mt19937_64 rng(9);
  const VideoRecord v = gen_recall_task(task, rng, 5, 12, 4);
  REQUIRE(v.cues.size() == 12);
  std::mt19937_64 oracle(v.seed);
  std::uniform_int_distribution<Index> cls(0, task.num_classes - 1);
  for (std::size_t c = 0; c < 12; ++c) CHECK(v.cues[c] == cls(oracle));
  for (std::size_t c = 0; c < 12; ++c) CHECK(v.labels[c] == (c < 2 ? task.blank_symbol : v.cues[c - 2]));
  const VideoRecord again = make_video(v.video_id, v.frames, v.seed, task, 4);
  CHECK(again.labels == v.labels);
}

TEST_CASE("cue renders as colour and quadrant") {
  RecallTaskSpec task;
  task.noise = 0.0;
  const Triple e{1, 8, 8};
  VideoRecord v = make_video(1, 4, 3, task, 1);
  for (Index c = 0; c < 4; ++c) {
    const auto px = render_clip(v, c, e);
    const Index cue = v.cues[static_cast<std::size_t>(c)];
    const Index qy = cue / 2, qx = cue % 2;
    // The cue's quadrant is brighter than the opposite one.
    const Index in = (qy * 4) * 8 + qx * 4;
    const Index out = ((1 - qy) * 4) * 8 + (1 - qx) * 4;
    CHECK(px.row(in).sum() > px.row(out).sum());
  }
  // Distinct cues render differently.
  std::vector<Matrix<double>> by_cue(4);
  VideoRecord many = make_video(2, 64, 4, task, 1);
  for (Index c = 0; c < 64; ++c) by_cue[static_cast<std::size_t>(many.cues[static_cast<std::size_t>(c)])] = render_clip(many, c, e);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b) CHECK_FALSE(bit_identical(by_cue[a], by_cue[b]));
}

TEST_CASE("shuffled labels sit at chance") {
  RecallTaskSpec task;
  task.shuffle_labels = true;
  std::mt19937_64 rng(10);
  Index match = 0, total = 0;
  for (int i = 0; i < 50; ++i) {
    const VideoRecord v = gen_recall_task(task, rng, i, 100, 4);
    for (std::size_t c = 2; c < 100; ++c) {
      match += v.labels[c] == v.cues[c - 2] ? 1 : 0;
      ++total;
    }
  }
  CHECK(std::abs(static_cast<double>(match) / static_cast<double>(total) - 0.25) < 0.02);
}

TEST_CASE("task validation") {
  RecallTaskSpec t;
  t.cue_offset = -1;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.blank_symbol = 1;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.num_classes = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("manifest round trip and errors") {
  const Corpus c = corpus_of({16, 0, 9});
  const Corpus back = corpus_from_json(corpus_to_json(c));
  CHECK(back.clip == c.clip);
  REQUIRE(back.videos.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.videos[i].cues == c.videos[i].cues);
    CHECK(back.videos[i].labels == c.videos[i].labels);
  }
  CHECK(corpus_to_json(back) == corpus_to_json(c));
  try {
    corpus_from_json("{\"clip\": {\"frames\": 4, \"height\": 8, \"width\": 8}, \"videos\": [{\"video_id\": 1, "
                     "\"frames\": \"many\", \"seed\": 1}]}");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("manifest.videos[0].frames") != std::string::npos);
  }
  try {
    corpus_from_json("{\"clip\": ");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() > 0);
  }
}

TEST_CASE("label CSV") {
  const Corpus c = corpus_of({12});
  std::ostringstream out;
  write_label_csv(c, out);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "video_id,clip_index,cue,label");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 3);
  CHECK(out.str().find("1,0," + std::to_string(c.videos[0].cues[0]) + ",-1\n") != std::string::npos);
}

TEST_CASE("token conversion keeps stream order") {
  const auto ev = events(corpus_of({8, 8}));
  const auto t = to_tokens<double>(ev[2]);
  CHECK(t.clip_index == 2);
  CHECK(t.video_id == 2);
  CHECK(t.extents == Triple{4, 8, 8});
}

TEST_CASE("recall experiment follows the curriculum and is reproducible") {
  RecallExperimentConfig cfg;
  cfg.spec = presets::toy();
  cfg.steps = 8;
  cfg.batch = 1;
  cfg.curriculum = {2, 3, 4, 5};
  cfg.eval_videos = 2;
  cfg.eval_clips = 4;
  auto run = [&] {
    Model<double> m(cfg.spec, 1);
    return run_recall_experiment(cfg, m);
  };
  const auto a = run();
  std::vector<Index> lens;
  for (const auto& e : a.log) lens.push_back(e.curriculum_len);
  CHECK(lens == std::vector<Index>{2, 2, 3, 3, 4, 4, 5, 5});
  CHECK(a.eval.labelled == 2 * 2);
  CHECK(a.chance == 0.25);
  const auto b = run();
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].loss == b.log[i].loss);
  CHECK(a.eval.correct == b.eval.correct);
  cfg.curriculum.clear();
  Model<double> m(cfg.spec, 1);
  CHECK_THROWS_AS(run_recall_experiment(cfg, m), ConfigError);
}
