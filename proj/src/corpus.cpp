#include "vap/corpus.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <set>
#include <sstream>

#include "vap/error.hpp"

namespace vap {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Category c) {
  return c == Category::spontaneous ? "spontaneous" : "attentive_listening";
}

Category category_from_string(const std::string& s) {
  if (s == "spontaneous" || s == "SP") return Category::spontaneous;
  if (s == "attentive_listening" || s == "ATT") return Category::attentive_listening;
  throw ParseError("unknown session category '" + s + "'");
}

const ManifestEntry& Manifest::find(const std::string& session_id) const {
  for (const auto& e : sessions)
    if (e.session_id == session_id) return e;
  throw RangeError("session '" + session_id + "' not in manifest");
}

// ---------------------------------------------------------------------------
// Annotations

ActivityTrack parse_annotations(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  int speakers = -1;
  double duration = -1.0;
  std::vector<Segment> segments;

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream header(line.substr(1));
      std::string field;
      while (header >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = field.substr(0, eq);
        const std::string value = field.substr(eq + 1);
        try {
          if (key == "speakers") speakers = std::stoi(value);
          if (key == "duration") duration = std::stod(value);
        } catch (const std::exception&) {
          throw ParseError("line " + std::to_string(line_no) + ": bad header value '" + field + "'");
        }
      }
      continue;
    }
    std::istringstream row(line);
    Segment s;
    std::string extra;
    if (!(row >> s.speaker >> s.start >> s.end) || (row >> extra))
      throw ParseError("line " + std::to_string(line_no) + ": expected 'speaker<TAB>start<TAB>end'");
    if (!(s.end > s.start))
      throw ParseError("line " + std::to_string(line_no) + ": segment (speaker " + std::to_string(s.speaker) +
                       ", " + std::to_string(s.start) + " -> " + std::to_string(s.end) +
                       ") ends before it starts");
    segments.push_back(s);
  }
  if (speakers <= 0) throw ParseError("annotation header is missing '#speakers=<n>'");
  if (duration < 0.0) throw ParseError("annotation header is missing 'duration=<seconds>'");
  return ActivityTrack(speakers, duration, std::move(segments));
}

std::string format_annotations(const ActivityTrack& track) {
  std::string out;
  char buf[96];
  std::snprintf(buf, sizeof buf, "#speakers=%d duration=%.3f\n", track.speaker_count(), track.duration());
  out += buf;
  auto segments = track.segments();
  std::stable_sort(segments.begin(), segments.end(),
                   [](const Segment& a, const Segment& b) { return a.start < b.start; });
  for (const auto& s : segments) {
    std::snprintf(buf, sizeof buf, "%d\t%.3f\t%.3f\n", s.speaker, s.start, s.end);
    out += buf;
  }
  return out;
}

ActivityTrack read_annotations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open annotation file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_annotations(ss.str());
  } catch (const Error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_annotations(const fs::path& path, const ActivityTrack& track) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write annotation file " + path.string());
  out << format_annotations(track);
}

// ---------------------------------------------------------------------------
// Sessions

SessionRecord load_session(const std::vector<fs::path>& audio_paths, const fs::path& annotation_path) {
  if (audio_paths.empty()) throw ConfigError("no audio files given");
  const ActivityTrack annotated = read_annotations(annotation_path);

  SessionRecord record;
  record.session_id = annotation_path.stem().string();
  for (const auto& path : audio_paths) {
    PcmAudio wav = read_wav(path);
    if (wav.sample_rate != kSampleRate)
      throw ParseError(path.string() + ": sample rate " + std::to_string(wav.sample_rate) + " Hz, expected " +
                       std::to_string(kSampleRate));
    for (auto& ch : wav.channels) record.audio.push_back(std::move(ch));
  }
  if (record.speaker_count() != annotated.speaker_count())
    throw ParseError("audio has " + std::to_string(record.speaker_count()) + " channels but annotation declares " +
                     std::to_string(annotated.speaker_count()) + " speakers");
  for (const auto& ch : record.audio)
    if (ch.size() != record.audio.front().size()) throw ParseError("audio channels differ in length");

  const double audio_duration = static_cast<double>(record.sample_count()) / kSampleRate;
  if (std::abs(audio_duration - annotated.duration()) > 1.0 / kDefaultFrameRate + 1e-9)
    throw ParseError("annotation duration " + std::to_string(annotated.duration()) + " s differs from audio duration " +
                     std::to_string(audio_duration) + " s by more than one frame");
  record.track = ActivityTrack(annotated.speaker_count(), audio_duration, annotated.segments());
  return record;
}

ManifestEntry save_session(const SessionRecord& session, const fs::path& dir) {
  fs::create_directories(dir);
  ManifestEntry entry;
  entry.session_id = session.session_id;
  entry.group_id = session.group_id;
  entry.category = session.category;
  entry.audio = {session.session_id + ".wav"};
  entry.annotation = session.session_id + ".tsv";

  PcmAudio wav;
  wav.sample_rate = session.sample_rate;
  wav.channels = session.audio;
  write_wav(dir / entry.audio.front(), wav);
  write_annotations(dir / entry.annotation, session.track);
  return entry;
}

void to_json(json& j, const DatasetSplit& s) {
  j = json{{"train", s.train}, {"validation", s.validation}, {"test", s.test}, {"fractions", s.fractions},
           {"seed", s.seed}};
}

void from_json(const json& j, DatasetSplit& s) {
  j.at("train").get_to(s.train);
  j.at("validation").get_to(s.validation);
  j.at("test").get_to(s.test);
  j.at("fractions").get_to(s.fractions);
  j.at("seed").get_to(s.seed);
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open manifest " + path.string());
  Manifest manifest;
  manifest.base_dir = path.parent_path();
  try {
    const json doc = json::parse(in);
    for (const auto& row : doc.at("sessions")) {
      ManifestEntry e;
      e.session_id = row.at("session_id").get<std::string>();
      e.group_id = row.at("group_id").get<std::string>();
      e.category = category_from_string(row.at("category").get<std::string>());
      for (const auto& a : row.at("audio")) e.audio.emplace_back(a.get<std::string>());
      e.annotation = row.at("annotation").get<std::string>();
      manifest.sessions.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return manifest;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  json rows = json::array();
  for (const auto& e : manifest.sessions) {
    json audio = json::array();
    for (const auto& a : e.audio) audio.push_back(a.generic_string());
    rows.push_back({{"session_id", e.session_id},
                    {"group_id", e.group_id},
                    {"category", to_string(e.category)},
                    {"audio", audio},
                    {"annotation", e.annotation.generic_string()}});
  }
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest " + path.string());
  out << json{{"sessions", rows}}.dump(2) << "\n";
}

SessionRecord load_manifest_session(const Manifest& manifest, const ManifestEntry& entry) {
  std::vector<fs::path> audio;
  for (const auto& a : entry.audio) audio.push_back(manifest.base_dir / a);
  SessionRecord record = load_session(audio, manifest.base_dir / entry.annotation);
  record.session_id = entry.session_id;
  record.group_id = entry.group_id;
  record.category = entry.category;
  return record;
}

// ---------------------------------------------------------------------------
// Windowing

int window_count(double duration, double hop_seconds, const ProjectionConfig& config) {
  if (!(hop_seconds > 0.0)) throw ConfigError("window hop must be positive");
  const double span = kWindowSeconds + config.horizon();
  if (duration + 1e-9 < span) return 0;
  return static_cast<int>(std::floor((duration - span) / hop_seconds + 1e-9)) + 1;
}

std::vector<TrainingWindow> make_windows(const SessionRecord& session, const ProjectionConfig& config,
                                         double hop_seconds) {
  config.validate();
  const double rate = config.frame_rate;
  const long hop_frames = std::lround(hop_seconds * rate);
  if (hop_frames <= 0 || std::abs(hop_frames / rate - hop_seconds) > 1e-9)
    throw ConfigError("window hop must be a positive whole number of frames");

  const int count = window_count(session.track.duration(), hop_seconds, config);
  if (count == 0) {
    spdlog::warn("session {} is {:.2f} s long, shorter than one window plus horizon; skipped", session.session_id,
                 session.track.duration());
    return {};
  }

  const FrameGrid grid = rasterize(session.track, rate);
  const int samples_per_frame = static_cast<int>(std::lround(session.sample_rate / rate));
  std::vector<TrainingWindow> windows;
  windows.reserve(count);
  for (int k = 0; k < count; ++k) {
    const int first = static_cast<int>(k * hop_frames);
    TrainingWindow w;
    w.session_id = session.session_id;
    w.start_time = first / rate;
    const std::size_t offset = static_cast<std::size_t>(first) * samples_per_frame;
    for (const auto& ch : session.audio) {
      std::vector<std::int16_t> part(kWindowSamples, 0);
      const std::size_t available = ch.size() > offset ? std::min<std::size_t>(kWindowSamples, ch.size() - offset) : 0;
      std::copy_n(ch.begin() + static_cast<std::ptrdiff_t>(offset), available, part.begin());
      w.audio.push_back(std::move(part));
    }
    w.labels = label_window(grid, first, first + kWindowFrames - 1, config);
    w.vad_targets = grid.slice(first, kWindowFrames);
    windows.push_back(std::move(w));
  }
  return windows;
}

// ---------------------------------------------------------------------------
// Splitting

DatasetSplit split_sessions(const std::vector<std::pair<std::string, std::string>>& session_groups,
                            std::vector<double> fractions, std::uint64_t seed) {
  if (fractions.size() != 3) throw ConfigError("split needs exactly three fractions");
  for (double f : fractions)
    if (!(f > 0.0)) throw ConfigError("split fractions must be positive");

  std::map<std::string, std::vector<std::string>> groups;
  for (const auto& [session, group] : session_groups) groups[group].push_back(session);
  if (groups.size() < 3)
    throw ConfigError("need at least 3 distinct groups to populate train/validation/test, got " +
                      std::to_string(groups.size()));

  std::vector<std::string> order;
  for (const auto& [g, _] : groups) order.push_back(g);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const double total_fraction = fractions[0] + fractions[1] + fractions[2];
  const double n = static_cast<double>(session_groups.size());
  std::vector<double> cumulative{0.0};
  for (const auto& g : order) cumulative.push_back(cumulative.back() + static_cast<double>(groups[g].size()));

  // Cut points k1 < k2 place cumulative session counts nearest the targets while
  // keeping every split non-empty.
  const int g = static_cast<int>(order.size());
  auto nearest = [&](double target, int lo, int hi) {
    int best = lo;
    for (int k = lo; k <= hi; ++k)
      if (std::abs(cumulative[k] - target) < std::abs(cumulative[best] - target)) best = k;
    return best;
  };
  const int k1 = nearest(n * fractions[0] / total_fraction, 1, g - 2);
  const int k2 = nearest(n * (fractions[0] + fractions[1]) / total_fraction, k1 + 1, g - 1);

  DatasetSplit split;
  split.fractions = fractions;
  split.seed = seed;
  for (int k = 0; k < g; ++k) {
    auto& target = k < k1 ? split.train : (k < k2 ? split.validation : split.test);
    for (const auto& s : groups[order[k]]) target.push_back(s);
  }
  return split;
}

DatasetSplit split_sessions(const std::vector<SessionRecord>& records, std::vector<double> fractions,
                            std::uint64_t seed) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& r : records) pairs.emplace_back(r.session_id, r.group_id);
  return split_sessions(pairs, std::move(fractions), seed);
}

}  // namespace vap
