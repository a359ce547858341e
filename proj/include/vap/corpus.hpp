#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "vap/activity.hpp"
#include "vap/projection.hpp"
#include "vap/wav.hpp"

namespace vap {

inline constexpr int kSampleRate = 16000;
inline constexpr double kWindowSeconds = 20.0;
inline constexpr int kWindowSamples = 320000;
inline constexpr int kWindowFrames = 1000;

enum class Category { spontaneous, attentive_listening };

std::string to_string(Category c);
Category category_from_string(const std::string& s);

/// One recorded (or synthesized) conversation.
struct SessionRecord {
  std::string session_id;
  std::string group_id;
  Category category = Category::spontaneous;
  int sample_rate = kSampleRate;
  std::vector<std::vector<std::int16_t>> audio;  // one vector per speaker channel
  ActivityTrack track;

  int speaker_count() const { return static_cast<int>(audio.size()); }
  std::size_t sample_count() const { return audio.empty() ? 0 : audio.front().size(); }
};

/// Unit of training: 20 s of audio, labels computed from activity through 20.6 s.
struct TrainingWindow {
  std::vector<std::vector<std::int16_t>> audio;  // S x 320000
  std::vector<StateIndex> labels;                // 1000
  FrameGrid vad_targets;                         // S x 1000
  std::string session_id;
  double start_time = 0.0;
};

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
  std::vector<double> fractions{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const DatasetSplit& s);
void from_json(const nlohmann::json& j, DatasetSplit& s);

/// Manifest row; paths are resolved relative to the manifest's directory.
struct ManifestEntry {
  std::string session_id;
  std::string group_id;
  Category category = Category::spontaneous;
  std::vector<std::filesystem::path> audio;  // one multi-channel file or one file per speaker
  std::filesystem::path annotation;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestEntry> sessions;

  const ManifestEntry& find(const std::string& session_id) const;
};

// Annotation text format:
//   #speakers=3 duration=<seconds>
//   speaker_index<TAB>start_seconds<TAB>end_seconds
// with times printed to 3 decimal places.
ActivityTrack parse_annotations(const std::string& text);
std::string format_annotations(const ActivityTrack& track);
ActivityTrack read_annotations(const std::filesystem::path& path);
void write_annotations(const std::filesystem::path& path, const ActivityTrack& track);

/// Loads one 3-channel WAV or one mono WAV per speaker plus its annotation file.
/// The track duration is taken from the audio.
SessionRecord load_session(const std::vector<std::filesystem::path>& audio_paths,
                           const std::filesystem::path& annotation_path);

/// Writes <dir>/<id>.wav (multi-channel) and <dir>/<id>.tsv; returns the manifest entry.
ManifestEntry save_session(const SessionRecord& session, const std::filesystem::path& dir);

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
SessionRecord load_manifest_session(const Manifest& manifest, const ManifestEntry& entry);

/// Number of windows make_windows produces for a session of `duration` seconds.
int window_count(double duration, double hop_seconds, const ProjectionConfig& config);

/// Windows starting at 0, hop, 2*hop, ... with the last start <= duration - 20.6 s.
/// Sessions shorter than one window plus horizon yield no windows (with a warning).
std::vector<TrainingWindow> make_windows(const SessionRecord& session, const ProjectionConfig& config,
                                         double hop_seconds = kWindowSeconds);

/// Group-disjoint seeded split of sessions.
DatasetSplit split_sessions(const std::vector<SessionRecord>& records, std::vector<double> fractions,
                            std::uint64_t seed);

/// Same split computed from (session_id, group_id) pairs only.
DatasetSplit split_sessions(const std::vector<std::pair<std::string, std::string>>& session_groups,
                            std::vector<double> fractions, std::uint64_t seed);

}  // namespace vap
