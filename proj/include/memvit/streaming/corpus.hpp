#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "memvit/attention/token_tensor.hpp"

namespace memvit {

/// Clip-recall task: each clip shows a class cue; the label of clip t is the
/// cue shown at clip t - cue_offset (blank before that).
struct RecallTaskSpec {
  Index num_classes = 4;
  Index cue_offset = 2;
  Index blank_symbol = -1;
  double noise = 0.05;
  bool shuffle_labels = false;  // chance-level control

  void validate() const;
};

struct VideoRecord {
  std::int64_t video_id = 0;
  Index frames = 0;
  std::uint64_t seed = 0;
  RecallTaskSpec task;
  std::vector<Index> cues;    // per clip
  std::vector<Index> labels;  // per clip
};

struct Corpus {
  Triple clip{4, 16, 16};  // frames per clip (T), height, width
  std::vector<VideoRecord> videos;
};

/// Rebuilds cues and labels of a video from its seed.
VideoRecord make_video(std::int64_t video_id, Index frames, std::uint64_t seed, const RecallTaskSpec& task,
                       Index clip_frames);

/// Draws a fresh seed from `rng` and builds a `clips`-clip video.
VideoRecord gen_recall_task(const RecallTaskSpec& task, std::mt19937_64& rng, std::int64_t video_id, Index clips,
                            Index clip_frames);

Index clip_count(const VideoRecord& v, Index clip_frames);

/// Pixels [T*H*W, 3] in [0, 1] of one clip. A final partial clip repeats its
/// last frame.
Matrix<double> render_clip(const VideoRecord& v, Index clip, Triple clip_extents);

struct ClipEvent {
  Matrix<double> pixels;  // [T*H*W, 3]
  Triple extents;
  std::int64_t video_id = 0;
  Index clip_index = 0;    // within the video
  Index global_index = 0;  // position in the stream
  bool is_boundary = false;
  Index label = -1;
};

struct SkippedVideo {
  std::int64_t video_id = 0;
  std::string reason;
};

using StreamItem = std::variant<ClipEvent, SkippedVideo>;

/// Sequential reader over a corpus: videos in order, clips in order, never
/// crossing a video boundary.
class ClipStream {
 public:
  explicit ClipStream(const Corpus& corpus);
  std::optional<StreamItem> next();

 private:
  const Corpus& corpus_;
  std::size_t video_ = 0;
  Index clip_ = 0;
  Index global_ = 0;
};

std::vector<StreamItem> stream_clips(const Corpus& corpus);

template <typename Scalar>
TokenTensor<Scalar> to_tokens(const ClipEvent& e) {
  return TokenTensor<Scalar>(Tensor<Scalar>(e.pixels.cast<Scalar>()), e.extents, e.global_index, e.video_id);
}

Corpus corpus_from_json(const std::string& text);
std::string corpus_to_json(const Corpus& corpus);
Corpus load_corpus(const std::string& path);

/// video_id,clip_index,cue,label
void write_label_csv(const Corpus& corpus, std::ostream& out);

}  // namespace memvit
