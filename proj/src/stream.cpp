#include "vap/stream.hpp"

#include "vap/error.hpp"
#include "vap/eval.hpp"

namespace vap {

StreamPredictor::StreamPredictor(const VapModel& model, int hop_frames)
    : model_(model),
      speakers_(model.model_config().speaker_count),
      context_(model.model_config().context_frames),
      hop_(hop_frames),
      extractor_(std::make_unique<LogMelExtractor>(model.feature_config())),
      stream_(*extractor_, speakers_),
      history_(speakers_),
      cache_(model.net().make_cache(context_)) {
  context_start(0, context_, hop_);  // validates the hop
}

void StreamPredictor::rebuild(int window_start) {
  window_start_ = window_start;
  cache_.length = 0;
  const int prefix = next_frame_ - window_start;
  if (prefix <= 0) return;
  Features inputs;
  for (const auto& h : history_) inputs.push_back(h.middleRows(window_start - history_start_, prefix));
  model_.net().forward(inputs, cache_, Exec::serial);
}

std::vector<StreamOutput> StreamPredictor::push(std::span<const std::int16_t> interleaved) {
  const Features fresh = stream_.push_interleaved(interleaved);
  const int n = static_cast<int>(fresh.front().rows());
  std::vector<StreamOutput> out;
  out.reserve(n);
  const int mel = model_.feature_config().mel_bins;
  for (int k = 0; k < n; ++k) {
    const int t = next_frame_;
    Features step(speakers_);
    for (int c = 0; c < speakers_; ++c) step[c] = model_.normalizer().apply(fresh[c].middleRows(k, 1));

    const int start = context_start(t, context_, hop_);
    if (start != window_start_) rebuild(start);
    const ModelOutput<float> y = model_.net().forward(step, cache_, Exec::serial);
    out.push_back({t, model_.to_prediction(y, 0)});

    // Keep the frames any later window can still start from.
    for (int c = 0; c < speakers_; ++c) {
      auto& h = history_[c];
      h.conservativeResize(h.rows() + 1, mel);
      h.row(h.rows() - 1) = step[c].row(0);
    }
    ++next_frame_;
    if (history_[0].rows() > 2 * context_) {
      const int keep_from = next_frame_ - context_;
      const int drop = keep_from - history_start_;
      for (auto& h : history_) h = Matrix<float>(h.bottomRows(h.rows() - drop));
      history_start_ = keep_from;
    }
  }
  return out;
}

}  // namespace vap
