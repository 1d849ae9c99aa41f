#include "memvit/streaming/corpus.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace memvit {

using nlohmann::json;

void RecallTaskSpec::validate() const {
  if (num_classes < 1) throw ConfigError("task.num_classes: must be >= 1");
  if (cue_offset < 0) throw ConfigError("task.cue_offset: must be >= 0");
  if (blank_symbol >= 0 && blank_symbol < num_classes) throw ConfigError("task.blank_symbol collides with a class");
  if (noise < 0.0) throw ConfigError("task.noise: must be >= 0");
}

Index clip_count(const VideoRecord& v, Index clip_frames) { return (v.frames + clip_frames - 1) / clip_frames; }

VideoRecord make_video(std::int64_t video_id, Index frames, std::uint64_t seed, const RecallTaskSpec& task,
                       Index clip_frames) {
  task.validate();
  if (frames < 0) throw ConfigError("video " + std::to_string(video_id) + ": negative frame count");
  VideoRecord v;
  v.video_id = video_id;
  v.frames = frames;
  v.seed = seed;
  v.task = task;
  const Index n = clip_count(v, clip_frames);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> cls(0, task.num_classes - 1);
  for (Index c = 0; c < n; ++c) v.cues.push_back(cls(rng));
  for (Index c = 0; c < n; ++c) {
    v.labels.push_back(c >= task.cue_offset ? v.cues[static_cast<std::size_t>(c - task.cue_offset)]
                                            : task.blank_symbol);
  }
  if (task.shuffle_labels) {
    for (auto& l : v.labels) {
      if (l != task.blank_symbol) l = cls(rng);
    }
  }
  return v;
}

VideoRecord gen_recall_task(const RecallTaskSpec& task, std::mt19937_64& rng, std::int64_t video_id, Index clips,
                            Index clip_frames) {
  return make_video(video_id, clips * clip_frames, rng(), task, clip_frames);
}

namespace {

// Evenly spaced hues at full saturation.
std::array<double, 3> palette(Index cls, Index n) {
  const double h = 6.0 * static_cast<double>(cls) / static_cast<double>(n);
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  switch (static_cast<int>(h)) {
    case 0:
      return {1, x, 0};
    case 1:
      return {x, 1, 0};
    case 2:
      return {0, 1, x};
    case 3:
      return {0, x, 1};
    case 4:
      return {x, 0, 1};
    default:
      return {1, 0, x};
  }
}

}  // namespace

Matrix<double> render_clip(const VideoRecord& v, Index clip, Triple e) {
  const Index n_clips = clip_count(v, e.t);
  if (clip < 0 || clip >= n_clips) {
    throw ContractError("clip " + std::to_string(clip) + " outside video " + std::to_string(v.video_id));
  }
  const Index cue = v.cues[static_cast<std::size_t>(clip)];
  const auto colour = palette(cue, v.task.num_classes);
  // Quadrant block keyed by the cue, on top of the cue colour.
  const Index bh = e.h / 2;
  const Index bw = e.w / 2;
  const Index qy = (cue / 2) % 2;
  const Index qx = cue % 2;
  Matrix<double> px(e.volume(), 3);
  for (Index t = 0; t < e.t; ++t) {
    const Index frame = std::min(clip * e.t + t, v.frames - 1);
    std::mt19937_64 rng(v.seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(frame + 1)));
    std::uniform_real_distribution<double> noise(-v.task.noise, v.task.noise);
    for (Index y = 0; y < e.h; ++y) {
      for (Index x = 0; x < e.w; ++x) {
        const bool block = y / std::max<Index>(bh, 1) == qy && x / std::max<Index>(bw, 1) == qx;
        const Index row = (t * e.h + y) * e.w + x;
        for (int c = 0; c < 3; ++c) {
          const double base = 0.2 + 0.6 * colour[static_cast<std::size_t>(c)] + (block ? 0.2 : 0.0);
          px(row, c) = std::clamp(base + noise(rng), 0.0, 1.0);
        }
      }
    }
  }
  return px;
}

ClipStream::ClipStream(const Corpus& corpus) : corpus_(corpus) {}

std::optional<StreamItem> ClipStream::next() {
  while (video_ < corpus_.videos.size()) {
    const VideoRecord& v = corpus_.videos[video_];
    const Index n = clip_count(v, corpus_.clip.t);
    if (n == 0) {
      ++video_;
      clip_ = 0;
      return SkippedVideo{v.video_id, "video has no frames"};
    }
    if (clip_ < n) {
      ClipEvent e;
      e.pixels = render_clip(v, clip_, corpus_.clip);
      e.extents = corpus_.clip;
      e.video_id = v.video_id;
      e.clip_index = clip_;
      e.global_index = global_++;
      e.is_boundary = clip_ == 0;
      e.label = v.labels[static_cast<std::size_t>(clip_)];
      ++clip_;
      return e;
    }
    ++video_;
    clip_ = 0;
  }
  return std::nullopt;
}

std::vector<StreamItem> stream_clips(const Corpus& corpus) {
  if (corpus.videos.empty()) throw ConfigError("corpus has no videos");
  std::vector<StreamItem> out;
  ClipStream s(corpus);
  while (auto item = s.next()) out.push_back(std::move(*item));
  return out;
}

namespace {

RecallTaskSpec task_from_json(const json& j, const std::string& at) {
  RecallTaskSpec t;
  if (!j.is_object()) throw ConfigError(at + ": expected an object");
  auto get_int = [&](const char* key, Index& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_number_integer()) throw ConfigError(at + "." + key + ": expected an integer");
    out = j[key].get<Index>();
  };
  get_int("num_classes", t.num_classes);
  get_int("cue_offset", t.cue_offset);
  get_int("blank_symbol", t.blank_symbol);
  if (j.contains("noise")) {
    if (!j["noise"].is_number()) throw ConfigError(at + ".noise: expected a number");
    t.noise = j["noise"].get<double>();
  }
  if (j.contains("shuffle_labels")) {
    if (!j["shuffle_labels"].is_boolean()) throw ConfigError(at + ".shuffle_labels: expected true or false");
    t.shuffle_labels = j["shuffle_labels"].get<bool>();
  }
  try {
    t.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(at + ": " + e.what());
  }
  return t;
}

}  // namespace

Corpus corpus_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("manifest is not valid JSON: ") + e.what(), e.byte);
  }
  if (!j.is_object()) throw ConfigError("manifest: expected an object");
  Corpus c;
  if (!j.contains("clip")) throw ConfigError("manifest.clip: missing field");
  const json& clip = j["clip"];
  for (const auto& [key, axis] : {std::pair{"frames", 0}, std::pair{"height", 1}, std::pair{"width", 2}}) {
    if (!clip.contains(key) || !clip[key].is_number_integer() || clip[key].get<Index>() < 1) {
      throw ConfigError(std::string("manifest.clip.") + key + ": expected a positive integer");
    }
    c.clip[axis] = clip[key].get<Index>();
  }
  if (!j.contains("videos") || !j["videos"].is_array()) throw ConfigError("manifest.videos: expected an array");
  for (std::size_t i = 0; i < j["videos"].size(); ++i) {
    const json& v = j["videos"][i];
    const std::string at = "manifest.videos[" + std::to_string(i) + "]";
    for (const char* key : {"video_id", "frames", "seed"}) {
      if (!v.contains(key) || !v[key].is_number_integer()) throw ConfigError(at + "." + key + ": expected an integer");
    }
    const RecallTaskSpec task = v.contains("task") ? task_from_json(v["task"], at + ".task") : RecallTaskSpec{};
    if (v["frames"].get<std::int64_t>() < 0) throw ConfigError(at + ".frames: must be >= 0");
    c.videos.push_back(make_video(v["video_id"].get<std::int64_t>(), v["frames"].get<Index>(),
                                  v["seed"].get<std::uint64_t>(), task, c.clip.t));
  }
  return c;
}

std::string corpus_to_json(const Corpus& corpus) {
  json j;
  j["clip"] = {{"frames", corpus.clip.t}, {"height", corpus.clip.h}, {"width", corpus.clip.w}};
  j["videos"] = json::array();
  for (const auto& v : corpus.videos) {
    j["videos"].push_back({{"video_id", v.video_id},
                           {"frames", v.frames},
                           {"seed", v.seed},
                           {"task",
                            {{"num_classes", v.task.num_classes},
                             {"cue_offset", v.task.cue_offset},
                             {"blank_symbol", v.task.blank_symbol},
                             {"noise", v.task.noise},
                             {"shuffle_labels", v.task.shuffle_labels}}}});
  }
  return j.dump(2) + "\n";
}

Corpus load_corpus(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open manifest " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return corpus_from_json(ss.str());
}

void write_label_csv(const Corpus& corpus, std::ostream& out) {
  out << "video_id,clip_index,cue,label\n";
  for (const auto& v : corpus.videos) {
    for (std::size_t c = 0; c < v.cues.size(); ++c) {
      out << v.video_id << "," << c << "," << v.cues[c] << "," << v.labels[c] << "\n";
    }
  }
}

}  // namespace memvit
