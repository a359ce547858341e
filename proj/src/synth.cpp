#include "vap/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "vap/error.hpp"

namespace vap {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// RBJ band-pass biquad (0 dB peak gain).
class BandPass {
 public:
  BandPass(double center, double bandwidth, double sample_rate) {
    const double w0 = 2.0 * std::numbers::pi * center / sample_rate;
    const double q = center / bandwidth;
    const double alpha = std::sin(w0) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    b0_ = alpha / a0;
    b2_ = -alpha / a0;
    a1_ = -2.0 * std::cos(w0) / a0;
    a2_ = (1.0 - alpha) / a0;
  }

  double operator()(double x) {
    const double y = b0_ * x + b2_ * x2_ - a1_ * y1_ - a2_ * y2_;
    x2_ = x1_;
    x1_ = x;
    y2_ = y1_;
    y1_ = y;
    return y;
  }

 private:
  double b0_, b2_, a1_, a2_;
  double x1_ = 0, x2_ = 0, y1_ = 0, y2_ = 0;
};

struct Turn {
  int speaker;
  double start;
  double end;
  bool yields;  // followed by a different speaker
};

struct Cue {
  int speaker;
  double onset;
};

double exponential(std::mt19937_64& rng, double mean) {
  return std::exponential_distribution<double>(1.0 / mean)(rng);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

int other_speaker(std::mt19937_64& rng, int current, int speakers) {
  const int k = uniform_int(rng, 0, speakers - 2);
  return k >= current ? k + 1 : k;
}

}  // namespace

void SynthesisParams::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw ConfigError(std::string("synthesis parameter ") + name + " must be positive");
  };
  auto probability = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string("synthesis parameter ") + name + " must lie in [0,1]");
  };
  if (speaker_count < 2) throw ConfigError("synthesis needs at least two speakers");
  positive(session_duration, "session_duration");
  positive(mean_turn, "mean_turn");
  positive(min_turn, "min_turn");
  positive(mean_gap, "mean_gap");
  positive(pause_gap_scale, "pause_gap_scale");
  positive(mean_overlap, "mean_overlap");
  positive(backchannel_min, "backchannel_min");
  positive(turn_final_fade, "turn_final_fade");
  positive(speech_amplitude, "speech_amplitude");
  positive(listener_turn_scale, "listener_turn_scale");
  positive(pre_onset_cue.lead, "pre_onset_cue.lead");
  probability(pause_probability, "pause_probability");
  probability(hold_probability, "hold_probability");
  probability(overlap_probability, "overlap_probability");
  probability(listener_return_probability, "listener_return_probability");
  probability(fade_floor, "fade_floor");
  probability(pre_onset_cue.amplitude_ratio, "pre_onset_cue.amplitude_ratio");
  if (backchannel_rate < 0.0) throw ConfigError("backchannel_rate must be non-negative");
  if (floor_amplitude < 0.0) throw ConfigError("floor_amplitude must be non-negative");
  if (backchannel_max < backchannel_min) throw ConfigError("backchannel_max must be >= backchannel_min");
  if (mean_turn < min_turn) throw ConfigError("mean_turn must be at least min_turn");
  if (mean_overlap < 0.1 || 2.0 * mean_overlap - 0.1 > 0.5 * min_turn)
    throw ConfigError("mean_overlap must lie in [0.1, (min_turn/2 + 0.1)/2]");
  if (mean_gap < pre_onset_cue.lead)
    throw ConfigError("mean_gap (" + std::to_string(mean_gap) + " s) is shorter than the pre-onset cue lead (" +
                      std::to_string(pre_onset_cue.lead) + " s)");
  if (primary_speaker >= speaker_count) throw ConfigError("primary_speaker out of range");
  if (static_cast<int>(speaker_signatures.size()) != speaker_count)
    throw ConfigError("need one spectral signature per speaker");
  for (std::size_t i = 0; i < speaker_signatures.size(); ++i) {
    const auto& a = speaker_signatures[i];
    positive(a.center_hz, "signature center");
    positive(a.bandwidth_hz, "signature bandwidth");
    if (a.center_hz - a.bandwidth_hz / 2 <= 0.0 || a.center_hz + a.bandwidth_hz / 2 >= kSampleRate / 2.0)
      throw ConfigError("speaker signature band must lie inside (0, 8000) Hz");
    for (std::size_t k = 0; k < i; ++k) {
      const auto& b = speaker_signatures[k];
      if (std::abs(a.center_hz - b.center_hz) < (a.bandwidth_hz + b.bandwidth_hz) / 2)
        throw ConfigError("speaker signature bands must be pairwise disjoint");
    }
  }
}

SynthesisParams CorpusSynthesisConfig::default_spontaneous() { return SynthesisParams{}; }

SynthesisParams CorpusSynthesisConfig::default_attentive() {
  SynthesisParams p;
  p.mean_turn = 4.0;
  p.hold_probability = 0.55;
  p.overlap_probability = 0.15;
  p.backchannel_rate = 10.0;
  p.primary_speaker = 0;
  return p;
}

SessionRecord synthesize_session(const SynthesisParams& params, std::string session_id, std::string group_id,
                                 Category category) {
  params.validate();
  const int speakers = params.speaker_count;
  const double duration = params.session_duration;
  std::mt19937_64 rng(params.seed);

  auto turn_length = [&](int speaker) {
    const bool listener = params.primary_speaker >= 0 && speaker != params.primary_speaker;
    const double scale = listener ? params.listener_turn_scale : 1.0;
    const double min_turn = params.min_turn;
    const double mean = std::max(min_turn, params.mean_turn * scale);
    return mean > min_turn ? min_turn + exponential(rng, mean - min_turn) : min_turn;
  };

  // Turn structure.
  std::vector<Turn> turns;
  std::vector<Cue> cues;
  int current = uniform_int(rng, 0, speakers - 1);
  double t = exponential(rng, params.mean_gap);
  cues.push_back({current, t});
  while (t < duration) {
    const double length = turn_length(current);
    Turn turn{current, t, t + length, false};

    int next = current;
    double next_start = turn.end;
    const double u = uniform(rng, 0.0, 1.0);
    if (u < params.pause_probability) {
      next = uniform_int(rng, 0, speakers - 1);
      next_start = turn.end + exponential(rng, params.mean_gap * params.pause_gap_scale);
    } else {
      const bool is_listener = params.primary_speaker >= 0 && current != params.primary_speaker;
      const bool hold = uniform(rng, 0.0, 1.0) < params.hold_probability;
      if (!hold) {
        if (is_listener && uniform(rng, 0.0, 1.0) < params.listener_return_probability)
          next = params.primary_speaker;
        else
          next = other_speaker(rng, current, speakers);
      }
      if (next != current && uniform(rng, 0.0, 1.0) < params.overlap_probability) {
        next_start = turn.end - uniform(rng, 0.1, 2.0 * params.mean_overlap - 0.1);
      } else {
        next_start = turn.end + exponential(rng, params.mean_gap);
      }
    }
    turn.yields = next != current;
    turns.push_back(turn);
    if (next_start < duration) cues.push_back({next, next_start});
    current = next;
    t = next_start;
  }

  // Backchannels over main turns, by listeners.
  std::vector<Turn> backchannels;
  for (const auto& turn : turns) {
    const double expected = params.backchannel_rate / 60.0 * (turn.end - turn.start);
    const int n = expected > 0 ? std::poisson_distribution<int>(expected)(rng) : 0;
    for (int i = 0; i < n; ++i) {
      const double len = uniform(rng, params.backchannel_min, params.backchannel_max);
      const int who = other_speaker(rng, turn.speaker, speakers);
      const double lo = turn.start + 0.3;
      const double hi = turn.end - 0.3 - len;
      if (hi <= lo) continue;
      const double start = uniform(rng, lo, hi);
      backchannels.push_back({who, start, start + len, false});
    }
  }

  // Annotation: main turns and backchannels, clipped to the session.
  std::vector<Segment> segments;
  for (const auto* list : {&turns, &backchannels})
    for (const auto& s : *list) {
      const double end = std::min(s.end, duration);
      if (end - s.start >= 0.05) segments.push_back({s.speaker, s.start, end});
    }

  // Audio rendering.
  const double fs = kSampleRate;
  const std::size_t n_samples = static_cast<std::size_t>(std::llround(duration * fs));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<double>> gain(speakers, std::vector<double>(n_samples, 0.0));
  std::vector<std::vector<double>> cue_gain(speakers, std::vector<double>(n_samples, 0.0));

  const double ramp = 0.01;
  auto add_segment = [&](const Turn& s, bool fade) {
    const std::size_t a = static_cast<std::size_t>(std::max(0.0, s.start) * fs);
    const std::size_t b = std::min(n_samples, static_cast<std::size_t>(s.end * fs));
    const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double rate = uniform(rng, 3.0, 5.0);
    for (std::size_t i = a; i < b; ++i) {
      const double time = i / fs;
      double g = 0.75 + 0.25 * std::sin(2.0 * std::numbers::pi * rate * time + phase);
      g *= std::min({1.0, (time - s.start) / ramp, (s.end - time) / ramp});
      if (fade && time > s.end - params.turn_final_fade) {
        const double x = (time - (s.end - params.turn_final_fade)) / params.turn_final_fade;
        g *= 1.0 - (1.0 - params.fade_floor) * x;
      }
      gain[s.speaker][i] = std::max(gain[s.speaker][i], g);
    }
  };
  for (const auto& turn : turns) add_segment(turn, turn.yields);
  for (const auto& bc : backchannels) add_segment(bc, false);
  for (const auto& cue : cues) {
    const double start = std::max(0.0, cue.onset - params.pre_onset_cue.lead);
    const std::size_t a = static_cast<std::size_t>(start * fs);
    const std::size_t b = std::min(n_samples, static_cast<std::size_t>(cue.onset * fs));
    for (std::size_t i = a; i < b; ++i) {
      const double time = i / fs;
      const double g = std::min({1.0, (time - start) / ramp, (cue.onset - time) / ramp});
      cue_gain[cue.speaker][i] = std::max(cue_gain[cue.speaker][i], std::max(0.0, g));
    }
  }

  SessionRecord record;
  record.session_id = std::move(session_id);
  record.group_id = std::move(group_id);
  record.category = category;
  record.sample_rate = kSampleRate;
  record.audio.assign(speakers, std::vector<std::int16_t>(n_samples));
  for (int s = 0; s < speakers; ++s) {
    const auto& sig = params.speaker_signatures[s];
    BandPass first(sig.center_hz, sig.bandwidth_hz, fs);
    BandPass second(sig.center_hz, sig.bandwidth_hz, fs);
    std::vector<double> band(n_samples);
    double energy = 0.0;
    for (std::size_t i = 0; i < n_samples; ++i) {
      band[i] = second(first(gauss(rng)));
      energy += band[i] * band[i];
    }
    const double norm = energy > 0.0 ? std::sqrt(n_samples / energy) : 0.0;
    const double speaker_level = params.speech_amplitude * (0.85 + 0.1 * s);
    for (std::size_t i = 0; i < n_samples; ++i) {
      double x = params.floor_amplitude * gauss(rng);
      x += speaker_level * gain[s][i] * band[i] * norm;
      if (cue_gain[s][i] > 0.0)
        x += params.pre_onset_cue.amplitude_ratio * params.speech_amplitude * cue_gain[s][i] * gauss(rng);
      const double q = std::clamp(std::round(x * 32767.0), -32768.0, 32767.0);
      record.audio[s][i] = static_cast<std::int16_t>(q);
    }
  }
  record.track = ActivityTrack(speakers, static_cast<double>(n_samples) / fs, std::move(segments));
  return record;
}

SynthesisParams corpus_session_params(const CorpusSynthesisConfig& config, int index, Category* category,
                                      std::string* session_id, std::string* group_id) {
  const int group = index / config.sessions_per_group;
  const int within = index % config.sessions_per_group;
  const bool spontaneous = group < config.spontaneous_groups;
  SynthesisParams params = spontaneous ? config.spontaneous : config.attentive;
  params.seed = splitmix64(config.seed ^ splitmix64(static_cast<std::uint64_t>(index) + 1));
  if (!spontaneous) params.primary_speaker = within % params.speaker_count;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%02d", spontaneous ? "sp" : "att", group);
  if (group_id) *group_id = buf;
  std::snprintf(buf, sizeof buf, "%s%02d_s%d", spontaneous ? "sp" : "att", group, within);
  if (session_id) *session_id = buf;
  if (category) *category = spontaneous ? Category::spontaneous : Category::attentive_listening;
  return params;
}

void synthesize_corpus(const CorpusSynthesisConfig& config, const std::function<void(SessionRecord&&)>& sink) {
  if (config.sessions_per_group <= 0 || config.spontaneous_groups < 0 || config.attentive_groups < 0)
    throw ConfigError("corpus group counts must be non-negative and sessions_per_group positive");
  for (int i = 0; i < config.session_count(); ++i) {
    Category category;
    std::string session_id, group_id;
    const SynthesisParams params = corpus_session_params(config, i, &category, &session_id, &group_id);
    sink(synthesize_session(params, session_id, group_id, category));
  }
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const SynthesisParams& p) {
  nlohmann::json sigs = nlohmann::json::array();
  for (const auto& s : p.speaker_signatures) sigs.push_back({{"center_hz", s.center_hz}, {"bandwidth_hz", s.bandwidth_hz}});
  j = {{"seed", p.seed},
       {"speaker_count", p.speaker_count},
       {"session_duration", p.session_duration},
       {"mean_turn", p.mean_turn},
       {"min_turn", p.min_turn},
       {"mean_gap", p.mean_gap},
       {"pause_probability", p.pause_probability},
       {"pause_gap_scale", p.pause_gap_scale},
       {"hold_probability", p.hold_probability},
       {"overlap_probability", p.overlap_probability},
       {"mean_overlap", p.mean_overlap},
       {"backchannel_rate", p.backchannel_rate},
       {"backchannel_min", p.backchannel_min},
       {"backchannel_max", p.backchannel_max},
       {"primary_speaker", p.primary_speaker},
       {"listener_turn_scale", p.listener_turn_scale},
       {"listener_return_probability", p.listener_return_probability},
       {"speaker_signatures", sigs},
       {"turn_final_fade", p.turn_final_fade},
       {"fade_floor", p.fade_floor},
       {"pre_onset_cue", {{"lead", p.pre_onset_cue.lead}, {"amplitude_ratio", p.pre_onset_cue.amplitude_ratio}}},
       {"speech_amplitude", p.speech_amplitude},
       {"floor_amplitude", p.floor_amplitude}};
}

void from_json(const nlohmann::json& j, SynthesisParams& p) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("seed", p.seed);
  get("speaker_count", p.speaker_count);
  get("session_duration", p.session_duration);
  get("mean_turn", p.mean_turn);
  get("min_turn", p.min_turn);
  get("mean_gap", p.mean_gap);
  get("pause_probability", p.pause_probability);
  get("pause_gap_scale", p.pause_gap_scale);
  get("hold_probability", p.hold_probability);
  get("overlap_probability", p.overlap_probability);
  get("mean_overlap", p.mean_overlap);
  get("backchannel_rate", p.backchannel_rate);
  get("backchannel_min", p.backchannel_min);
  get("backchannel_max", p.backchannel_max);
  get("primary_speaker", p.primary_speaker);
  get("listener_turn_scale", p.listener_turn_scale);
  get("listener_return_probability", p.listener_return_probability);
  get("turn_final_fade", p.turn_final_fade);
  get("fade_floor", p.fade_floor);
  get("speech_amplitude", p.speech_amplitude);
  get("floor_amplitude", p.floor_amplitude);
  if (j.contains("speaker_signatures")) {
    p.speaker_signatures.clear();
    for (const auto& s : j.at("speaker_signatures"))
      p.speaker_signatures.push_back({s.at("center_hz").get<double>(), s.at("bandwidth_hz").get<double>()});
  }
  if (j.contains("pre_onset_cue")) {
    const auto& c = j.at("pre_onset_cue");
    if (c.contains("lead")) c.at("lead").get_to(p.pre_onset_cue.lead);
    if (c.contains("amplitude_ratio")) c.at("amplitude_ratio").get_to(p.pre_onset_cue.amplitude_ratio);
  }
}

void to_json(nlohmann::json& j, const CorpusSynthesisConfig& c) {
  j = {{"seed", c.seed},
       {"spontaneous_groups", c.spontaneous_groups},
       {"attentive_groups", c.attentive_groups},
       {"sessions_per_group", c.sessions_per_group},
       {"spontaneous", c.spontaneous},
       {"attentive", c.attentive}};
}

void from_json(const nlohmann::json& j, CorpusSynthesisConfig& c) {
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("spontaneous_groups")) j.at("spontaneous_groups").get_to(c.spontaneous_groups);
  if (j.contains("attentive_groups")) j.at("attentive_groups").get_to(c.attentive_groups);
  if (j.contains("sessions_per_group")) j.at("sessions_per_group").get_to(c.sessions_per_group);
  if (j.contains("spontaneous")) c.spontaneous = j.at("spontaneous").get<SynthesisParams>();
  if (j.contains("attentive")) c.attentive = j.at("attentive").get<SynthesisParams>();
}

}  // namespace vap
