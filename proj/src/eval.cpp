#include "vap/eval.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "vap/error.hpp"

namespace vap {

std::vector<SilenceEvent> find_events(const FrameGrid& grid, const EventCriteria& criteria) {
  const int frames = grid.frame_count();
  const int speakers = grid.speaker_count();
  const double rate = grid.frame_rate();
  std::vector<SilenceEvent> events;
  int t = 0;
  while (t < frames) {
    if (grid.active_count(t) > 0) {
      ++t;
      continue;
    }
    const int run_start = t;
    while (t < frames && grid.active_count(t) == 0) ++t;
    const int onset = t;
    if (onset - run_start < criteria.min_silence_frames) continue;
    if (run_start == 0 || onset == frames) continue;
    if (grid.active_count(onset) != 1) continue;
    if (onset + criteria.min_next_frames > frames) continue;
    int next = 0;
    while (!grid.active(next, onset)) ++next;
    bool alone = true;
    for (int f = onset; f < onset + criteria.min_next_frames && alone; ++f)
      alone = grid.active(next, f) && grid.active_count(f) == 1;
    if (!alone) continue;

    SilenceEvent e;
    e.silence_start_frame = run_start;
    e.onset_frame = onset;
    e.silence_start = run_start / rate;
    e.silence_end = onset / rate;
    e.next_onset = onset / rate;
    e.next_speaker = next;
    e.last_speaker = -1;
    for (int s = 0; s < speakers; ++s)
      if (grid.active(s, run_start - 1)) {
        if (e.last_speaker < 0) e.last_speaker = s;
        else e.last_speaker_tie = true;
      }
    events.push_back(e);
  }
  return events;
}

AggregatedPrediction aggregate(std::span<const std::vector<double>> per_frame) {
  if (per_frame.empty()) throw ConfigError("nothing to aggregate");
  const std::size_t speakers = per_frame.front().size();
  AggregatedPrediction out;
  out.probabilities.assign(speakers, 0.0);
  for (const auto& p : per_frame) {
    if (p.size() != speakers) throw ConfigError("per-frame probability vectors differ in length");
    for (std::size_t s = 0; s < speakers; ++s) out.probabilities[s] += p[s];
  }
  for (double& p : out.probabilities) p /= static_cast<double>(per_frame.size());
  for (std::size_t s = 1; s < speakers; ++s)
    if (out.probabilities[s] > out.probabilities[out.speaker]) out.speaker = static_cast<int>(s);
  for (std::size_t s = 0; s < speakers; ++s)
    if (static_cast<int>(s) != out.speaker && out.probabilities[s] == out.probabilities[out.speaker]) out.tie = true;
  return out;
}

std::optional<AggregatedPrediction> predict_event(const FutureProbability& p_future, const SilenceEvent& event,
                                                  const EventCriteria& criteria) {
  const int first = event.onset_frame - criteria.lookback_frames;
  if (first < 0) return std::nullopt;
  std::vector<std::vector<double>> frames;
  for (int t = first; t < event.onset_frame; ++t) frames.push_back(p_future(t));
  return aggregate(frames);
}

int context_start(int frame, int context, int hop) {
  if (context <= 0 || hop <= 0 || hop > context) throw ConfigError("context hop must lie in [1, context]");
  if (frame < context) return 0;
  return hop * ((frame + 1 - context + hop - 1) / hop);
}

SessionPredictor::SessionPredictor(const VapModel& model, Features normalized_features, int hop_frames, Exec exec)
    : model_(model),
      features_(std::move(normalized_features)),
      frames_(features_.empty() ? 0 : static_cast<int>(features_.front().rows())),
      hop_(hop_frames),
      exec_(exec) {
  if (static_cast<int>(features_.size()) != model.model_config().speaker_count)
    throw ConfigError("session channel count differs from the model's speaker count");
  context_start(0, model.model_config().context_frames, hop_);
}

const PredictionFrame& SessionPredictor::at(int frame) {
  if (frame < 0 || frame >= frames_) throw RangeError("frame " + std::to_string(frame) + " outside the session");
  const int context = model_.model_config().context_frames;
  const int start = context_start(frame, context, hop_);
  const int owned_first = start == 0 ? 0 : start + context - hop_;
  auto it = cache_.find(start);
  if (it == cache_.end()) {
    const int end = std::min(start + context, frames_);
    Features window;
    for (const auto& ch : features_) window.push_back(ch.middleRows(start, end - start));
    const ModelOutput<float> out = model_.net().forward(window, exec_);
    std::vector<PredictionFrame> owned;
    for (int t = owned_first; t < end; ++t) owned.push_back(model_.to_prediction(out, t - start));
    it = cache_.emplace(start, std::move(owned)).first;
  }
  return it->second[frame - owned_first];
}

std::vector<PredictionFrame> SessionPredictor::all() {
  std::vector<PredictionFrame> out;
  out.reserve(frames_);
  for (int t = 0; t < frames_; ++t) out.push_back(at(t));
  return out;
}

FutureProbability oracle_future(const FrameGrid& grid, const ProjectionConfig& projection) {
  auto codec = std::make_shared<ProjectionCodec>(projection);
  return [codec, &grid, projection](int frame) {
    const StateIndex state = discretize_future(grid, frame, projection);
    std::vector<double> p(codec->speaker_count());
    for (int s = 0; s < codec->speaker_count(); ++s) p[s] = codec->speaker_weight(state, s);
    return p;
  };
}

namespace {

struct SessionOutcome {
  std::vector<EventRecord> events;
  int skipped = 0;
  std::vector<LossValue> window_losses;
};

SessionOutcome evaluate_session(const VapModel& model, const SessionRecord& session, const EvalConfig& config,
                                Exec exec) {
  SessionOutcome result;
  const LogMelExtractor extractor(model.feature_config());
  Features features = model.normalize(extract_features(session.audio, extractor, exec));
  const FrameGrid grid = rasterize(session.track, model.projection().frame_rate);

  auto examples = session_examples(session, features, model.projection(), config.window_hop_seconds);
  for (const auto& ex : examples) {
    const Example* p = &ex;
    result.window_losses.push_back(
        evaluate_loss(model.net(), std::span<const Example>(p, 1), config.vad_loss_weight, exec));
  }
  examples.clear();

  SessionPredictor predictor(model, std::move(features), config.hop_frames, exec);
  const FutureProbability model_future = [&predictor](int t) { return predictor.at(t).p_future; };
  const FutureProbability truth = oracle_future(grid, model.projection());
  for (const SilenceEvent& event : find_events(grid, config.criteria)) {
    if (event.onset_frame > predictor.frame_count()) {
      ++result.skipped;
      continue;
    }
    const auto predicted = predict_event(model_future, event, config.criteria);
    if (!predicted) {
      ++result.skipped;
      continue;
    }
    EventRecord rec;
    rec.session_id = session.session_id;
    rec.event = event;
    rec.predicted = predicted->speaker;
    rec.aggregated = predicted->probabilities;
    rec.prediction_tie = predicted->tie;
    rec.baseline = baseline_predict(event);
    rec.oracle = predict_event(truth, event, config.criteria)->speaker;
    result.events.push_back(std::move(rec));
  }
  return result;
}

}  // namespace

EvalReport evaluate(const VapModel& model, const std::vector<SessionRecord>& sessions, const EvalConfig& config,
                    Exec exec) {
  if (sessions.empty()) throw ConfigError("evaluation needs at least one session");
  const int n = static_cast<int>(sessions.size());
  std::vector<SessionOutcome> outcomes(n);
  std::vector<std::string> failures(n);
  const bool parallel = exec == Exec::parallel;
#pragma omp parallel for schedule(dynamic, 1) if (parallel)
  for (int i = 0; i < n; ++i) {
    try {
      outcomes[i] = evaluate_session(model, sessions[i], config, Exec::serial);
    } catch (const std::exception& e) {
      failures[i] = sessions[i].session_id + ": " + e.what();
    }
  }
  for (const auto& f : failures)
    if (!f.empty()) throw Error(f);

  EvalReport report;
  report.sessions = n;
  report.chance_accuracy = 1.0 / model.model_config().speaker_count;
  int model_hits = 0, baseline_hits = 0, oracle_hits = 0;
  for (auto& o : outcomes) {
    report.skipped_events += o.skipped;
    for (const auto& l : o.window_losses) {
      report.test_loss.total += l.total;
      report.test_loss.vap += l.vap;
      report.test_loss.vad += l.vad;
      ++report.test_windows;
    }
    for (auto& rec : o.events) {
      model_hits += rec.predicted == rec.event.next_speaker;
      baseline_hits += rec.baseline == rec.event.next_speaker;
      oracle_hits += rec.oracle == rec.event.next_speaker;
      report.last_speaker_ties += rec.event.last_speaker_tie;
      report.prediction_ties += rec.prediction_tie;
      report.events.push_back(std::move(rec));
    }
  }
  if (report.test_windows > 0) {
    report.test_loss.total /= report.test_windows;
    report.test_loss.vap /= report.test_windows;
    report.test_loss.vad /= report.test_windows;
  }
  report.event_count = static_cast<int>(report.events.size());
  if (report.event_count > 0) {
    const double count = report.event_count;
    report.model_accuracy = model_hits / count;
    report.baseline_accuracy = baseline_hits / count;
    report.oracle_accuracy = oracle_hits / count;
  }
  return report;
}

nlohmann::json report_json(const EvalReport& report, bool with_events) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j = {{"sessions", report.sessions},
                      {"event_count", report.event_count},
                      {"accuracy_defined", report.event_count > 0},
                      {"model_accuracy", opt(report.model_accuracy)},
                      {"baseline_accuracy", opt(report.baseline_accuracy)},
                      {"oracle_accuracy", opt(report.oracle_accuracy)},
                      {"chance_accuracy", report.chance_accuracy},
                      {"skipped_events", report.skipped_events},
                      {"last_speaker_ties", report.last_speaker_ties},
                      {"prediction_ties", report.prediction_ties},
                      {"test_windows", report.test_windows},
                      {"test_loss",
                       {{"total", report.test_loss.total}, {"vap", report.test_loss.vap}, {"vad", report.test_loss.vad}}}};
  if (with_events) {
    nlohmann::json events = nlohmann::json::array();
    for (const auto& r : report.events)
      events.push_back({{"session_id", r.session_id},
                        {"silence_start", r.event.silence_start},
                        {"silence_end", r.event.silence_end},
                        {"next_onset", r.event.next_onset},
                        {"last_speaker", r.event.last_speaker},
                        {"last_speaker_tie", r.event.last_speaker_tie},
                        {"next_speaker", r.event.next_speaker},
                        {"predicted", r.predicted},
                        {"prediction_tie", r.prediction_tie},
                        {"baseline", r.baseline},
                        {"oracle", r.oracle},
                        {"aggregated", r.aggregated}});
    j["events"] = events;
  }
  return j;
}

std::string summary_table(const EvalReport& report) {
  std::ostringstream out;
  auto pct = [](const std::optional<double>& v) {
    std::ostringstream s;
    if (v) s << std::fixed << std::setprecision(2) << 100.0 * *v << "%";
    else s << "n/a";
    return s.str();
  };
  out << "Next-speaker prediction (" << report.event_count << " events, " << report.sessions << " sessions, "
      << report.skipped_events << " skipped)\n";
  out << std::left << std::setw(26) << "  Last-speaker baseline" << pct(report.baseline_accuracy) << "\n";
  out << std::left << std::setw(26) << "  Model" << pct(report.model_accuracy) << "\n";
  out << std::left << std::setw(26) << "  Ground-truth oracle" << pct(report.oracle_accuracy) << "\n";
  out << std::left << std::setw(26) << "  Chance" << pct(report.chance_accuracy) << "\n";
  out << "Ties: last speaker " << report.last_speaker_ties << ", prediction " << report.prediction_ties << "\n";
  out << std::fixed << std::setprecision(4) << "Test loss over " << report.test_windows
      << " windows: total " << report.test_loss.total << " (vap " << report.test_loss.vap << ", vad "
      << report.test_loss.vad << ")\n";
  return out.str();
}

void export_timeline(std::ostream& out, const SessionRecord& session, const std::vector<PredictionFrame>& predictions,
                     double start, double end) {
  const double rate = kDefaultFrameRate;
  const double duration = session.track.duration();
  if (!(start >= 0.0) || !(end > start) || end > duration + 1e-9)
    throw RangeError("timeline range must lie inside [0, " + std::to_string(duration) + "] s");
  const int first = static_cast<int>(std::lround(start * rate));
  const int last = static_cast<int>(std::lround(end * rate));
  if (static_cast<int>(predictions.size()) < last) throw RangeError("predictions do not cover the requested range");
  const FrameGrid grid = rasterize(session.track, rate);
  const int speakers = session.speaker_count();
  const std::size_t per_frame = static_cast<std::size_t>(std::lround(session.sample_rate / rate));

  out << "time";
  for (const char* col : {"amp", "gt", "p_future", "p_now"})
    for (int s = 0; s < speakers; ++s) out << "," << col << s;
  out << "\n" << std::fixed << std::setprecision(6);
  for (int f = first; f < last; ++f) {
    out << f / rate;
    for (int s = 0; s < speakers; ++s) {
      double sq = 0.0;
      const auto& ch = session.audio[s];
      const std::size_t a = f * per_frame;
      const std::size_t b = std::min(ch.size(), a + per_frame);
      for (std::size_t i = a; i < b; ++i) sq += static_cast<double>(ch[i]) * ch[i];
      out << "," << (b > a ? std::sqrt(sq / static_cast<double>(b - a)) / 32768.0 : 0.0);
    }
    for (int s = 0; s < speakers; ++s) out << "," << (f < grid.frame_count() && grid.active(s, f) ? 1 : 0);
    for (int s = 0; s < speakers; ++s) out << "," << predictions[f].p_future[s];
    for (int s = 0; s < speakers; ++s) out << "," << predictions[f].p_now[s];
    out << "\n";
  }
}

}  // namespace vap
