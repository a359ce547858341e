#pragma once

#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "vap/activity.hpp"
#include "vap/corpus.hpp"
#include "vap/model.hpp"
#include "vap/train.hpp"

namespace vap {

struct EventCriteria {
  int min_silence_frames = 5;  // 100 ms
  int min_next_frames = 50;    // 1 s alone after onset
  int lookback_frames = 30;    // 600 ms before onset
};

struct SilenceEvent {
  int silence_start_frame = 0;
  int onset_frame = 0;  // first frame after the silence; also the silence end
  double silence_start = 0.0;
  double silence_end = 0.0;
  double next_onset = 0.0;
  int last_speaker = 0;
  int next_speaker = 0;
  bool last_speaker_tie = false;  // several speakers were active right before the silence

  friend bool operator==(const SilenceEvent&, const SilenceEvent&) = default;
};

/// Maximal all-silent runs of at least min_silence_frames followed by exactly
/// one speaker who then talks alone for min_next_frames. The last speaker is
/// whoever was active in the frame before the silence (lowest index on ties).
/// Runs at the very start or end of the grid have no last or next speaker.
std::vector<SilenceEvent> find_events(const FrameGrid& grid, const EventCriteria& criteria = {});

struct AggregatedPrediction {
  int speaker = 0;
  std::vector<double> probabilities;  // mean p_future per speaker
  bool tie = false;
};

/// Mean of the per-frame vectors, then argmax (lowest index on ties).
AggregatedPrediction aggregate(std::span<const std::vector<double>> per_frame);

using FutureProbability = std::function<std::vector<double>(int frame)>;

/// Aggregates the lookback frames before the onset; nullopt when fewer than
/// lookback_frames precede it.
std::optional<AggregatedPrediction> predict_event(const FutureProbability& p_future, const SilenceEvent& event,
                                                  const EventCriteria& criteria = {});

inline int baseline_predict(const SilenceEvent& event) { return event.last_speaker; }

/// Start of the context window used for frame t: 0 while t < context, then
/// advancing in steps of `hop` so every window holds between context-hop+1
/// and context frames ending at t.
int context_start(int frame, int context, int hop);

/// Causal predictions over a whole session, computed window by window on
/// demand. Frame t comes from a fresh forward pass over frames
/// [context_start(t), ...), with positions counted from the window start.
class SessionPredictor {
 public:
  SessionPredictor(const VapModel& model, Features normalized_features, int hop_frames, Exec exec = Exec::parallel);

  int frame_count() const { return frames_; }
  const PredictionFrame& at(int frame);
  std::vector<PredictionFrame> all();
  int windows_computed() const { return static_cast<int>(cache_.size()); }

 private:
  const VapModel& model_;
  Features features_;
  int frames_;
  int hop_;
  Exec exec_;
  std::map<int, std::vector<PredictionFrame>> cache_;  // window start -> frames it owns
};

/// p_future computed from the true future activity (point-mass distributions).
FutureProbability oracle_future(const FrameGrid& grid, const ProjectionConfig& projection);

struct EventRecord {
  std::string session_id;
  SilenceEvent event;
  int predicted = 0;
  int baseline = 0;
  int oracle = 0;
  std::vector<double> aggregated;
  bool prediction_tie = false;
};

struct EvalReport {
  int event_count = 0;
  int skipped_events = 0;  // lookback crosses the session start
  int last_speaker_ties = 0;
  int prediction_ties = 0;
  std::optional<double> model_accuracy;
  std::optional<double> baseline_accuracy;
  std::optional<double> oracle_accuracy;
  double chance_accuracy = 0.0;
  LossValue test_loss;
  int test_windows = 0;
  int sessions = 0;
  std::vector<EventRecord> events;
};

struct EvalConfig {
  EventCriteria criteria;
  int hop_frames = 50;  // context recomputation hop
  double window_hop_seconds = kWindowSeconds;
  double vad_loss_weight = 1.0;
};

/// Next-speaker accuracy of the model, last-speaker baseline and the oracle on
/// the same events, plus mean test loss over the sessions' 20 s windows.
EvalReport evaluate(const VapModel& model, const std::vector<SessionRecord>& sessions, const EvalConfig& config = {},
                    Exec exec = Exec::parallel);

nlohmann::json report_json(const EvalReport& report, bool with_events = true);
std::string summary_table(const EvalReport& report);

/// Aligned per-frame CSV over [start, end) seconds: time, per-speaker frame RMS
/// amplitude, ground-truth activity, p_future and p_now.
void export_timeline(std::ostream& out, const SessionRecord& session, const std::vector<PredictionFrame>& predictions,
                     double start, double end);

}  // namespace vap
