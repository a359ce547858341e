#pragma once

#include <cstdint>
#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "vap/corpus.hpp"

namespace vap {

struct SpeakerSignature {
  double center_hz = 1000.0;
  double bandwidth_hz = 300.0;
};

/// Low-amplitude broadband burst the next speaker emits before taking the floor.
struct PreOnsetCue {
  double lead = 0.35;             // seconds before onset
  double amplitude_ratio = 0.25;  // relative to speech amplitude
};

/// Turn-taking process and acoustic rendering of one synthetic session.
///
/// After every main turn the process picks one transition: pause (long gap,
/// any speaker next), hold (same speaker after a gap) or switch (another
/// speaker, overlapping the end of the turn with `overlap_probability`).
/// Backchannels are short listener segments laid over main turns.
struct SynthesisParams {
  std::uint64_t seed = 0;
  int speaker_count = 3;
  double session_duration = 300.0;
  double mean_turn = 3.0;
  double min_turn = 1.0;
  double mean_gap = 0.6;
  double pause_probability = 0.1;
  double pause_gap_scale = 4.0;
  double hold_probability = 0.3;
  double overlap_probability = 0.3;
  double mean_overlap = 0.25;  // overlaps are uniform on [0.1, 2*mean_overlap - 0.1]
  double backchannel_rate = 6.0;  // events per minute of main speech
  double backchannel_min = 0.2;
  double backchannel_max = 0.5;
  /// Attentive listening: index of the primary speaker, -1 for symmetric turn-taking.
  int primary_speaker = -1;
  double listener_turn_scale = 0.5;
  double listener_return_probability = 0.85;
  std::vector<SpeakerSignature> speaker_signatures{{400.0, 200.0}, {1200.0, 300.0}, {2800.0, 500.0}};
  double turn_final_fade = 0.4;
  double fade_floor = 0.3;  // amplitude reached at the end of a yielding turn
  PreOnsetCue pre_onset_cue;
  double speech_amplitude = 0.3;
  double floor_amplitude = 0.002;

  /// Throws ConfigError for infeasible or out-of-range parameters.
  void validate() const;
};

/// Sessions arranged as groups (triads) of a given category.
struct CorpusSynthesisConfig {
  std::uint64_t seed = 7;
  int spontaneous_groups = 14;
  int attentive_groups = 6;
  int sessions_per_group = 3;
  SynthesisParams spontaneous = default_spontaneous();
  SynthesisParams attentive = default_attentive();

  static SynthesisParams default_spontaneous();
  static SynthesisParams default_attentive();
  int session_count() const { return (spontaneous_groups + attentive_groups) * sessions_per_group; }
};

void to_json(nlohmann::json& j, const SynthesisParams& p);
void from_json(const nlohmann::json& j, SynthesisParams& p);
void to_json(nlohmann::json& j, const CorpusSynthesisConfig& c);
void from_json(const nlohmann::json& j, CorpusSynthesisConfig& c);

/// Deterministic in `params` (including the seed).
SessionRecord synthesize_session(const SynthesisParams& params, std::string session_id = "synth",
                                 std::string group_id = "g0", Category category = Category::spontaneous);

/// Parameters of session `index` in the corpus (seed and primary speaker filled in).
SynthesisParams corpus_session_params(const CorpusSynthesisConfig& config, int index, Category* category,
                                      std::string* session_id, std::string* group_id);

/// Generates every session of the corpus in order, handing each to `sink`.
void synthesize_corpus(const CorpusSynthesisConfig& config, const std::function<void(SessionRecord&&)>& sink);

}  // namespace vap
