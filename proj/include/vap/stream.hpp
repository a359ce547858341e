#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "vap/features.hpp"
#include "vap/model.hpp"

namespace vap {

struct StreamOutput {
  int frame = 0;
  PredictionFrame prediction;
};

/// Frame-synchronous inference over a live multi-channel stream. Frame t uses
/// the same context window as SessionPredictor: at each hop boundary the
/// key/value cache is rebuilt from the window's earlier frames, and in between
/// every new frame is one incremental step.
class StreamPredictor {
 public:
  explicit StreamPredictor(const VapModel& model, int hop_frames = 50);

  int speaker_count() const { return speakers_; }
  int frames_emitted() const { return next_frame_; }

  /// Appends interleaved 16-bit samples (any length that is a multiple of the
  /// channel count); returns a prediction for every frame completed.
  std::vector<StreamOutput> push(std::span<const std::int16_t> interleaved);

 private:
  void rebuild(int window_start);

  const VapModel& model_;
  int speakers_;
  int context_;
  int hop_;
  std::unique_ptr<LogMelExtractor> extractor_;
  StreamingFeatureExtractor stream_;
  Features history_;         // normalized frames [history_start_, next_frame_)
  int history_start_ = 0;
  int next_frame_ = 0;
  int window_start_ = -1;
  InferenceCache<float> cache_;
};

}  // namespace vap
