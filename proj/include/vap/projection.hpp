#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vap/activity.hpp"

namespace vap {

/// Integer code of one joint future-activity state.
using StateIndex = std::uint32_t;

/// Bit layout of StateIndex: bit (s * B + b) holds speaker s, bin b (bin 0 is
/// nearest in time). Bump when the layout changes; checkpoints record it.
inline constexpr int kStateLayoutVersion = 1;

/// Largest supported S * B; beyond this the label space is unusable.
inline constexpr int kMaxStateBits = 24;

struct ProjectionConfig {
  int speaker_count = 3;
  std::vector<double> bin_durations{0.2, 0.4};
  double frame_rate = kDefaultFrameRate;

  int bin_count() const { return static_cast<int>(bin_durations.size()); }
  int state_bits() const { return speaker_count * bin_count(); }
  double horizon() const;
  /// Frames per bin; each bin must cover a whole number of frames.
  std::vector<int> bin_frames() const;
  int horizon_frames() const;
  /// Duration-proportional bin weights, summing to 1.
  std::vector<double> bin_weights() const;

  /// Throws ConfigError on any invariant violation.
  void validate() const;

  friend bool operator==(const ProjectionConfig&, const ProjectionConfig&) = default;
};

/// Per-bin activity for every speaker, speaker-major: at(s, b).
struct BinMatrix {
  int speakers = 0;
  int bins = 0;
  std::vector<std::uint8_t> cells;

  BinMatrix() = default;
  BinMatrix(int speakers_, int bins_) : speakers(speakers_), bins(bins_), cells(speakers_ * bins_, 0) {}

  bool at(int s, int b) const { return cells[s * bins + b] != 0; }
  void set(int s, int b, bool v) { cells[s * bins + b] = v ? 1 : 0; }

  friend bool operator==(const BinMatrix&, const BinMatrix&) = default;
};

/// 2^(S*B); rejects S*B > kMaxStateBits.
std::uint64_t state_count(const ProjectionConfig& config);

StateIndex encode_state(const BinMatrix& bins, const ProjectionConfig& config);
BinMatrix decode_state(StateIndex index, const ProjectionConfig& config);

inline bool state_bit(StateIndex state, int speaker, int bin, int bins_per_speaker) {
  return ((state >> (speaker * bins_per_speaker + bin)) & 1U) != 0;
}

/// Relabels speakers: speaker s of `state` becomes speaker perm[s].
StateIndex permute_state(StateIndex state, std::span<const int> perm, const ProjectionConfig& config);

/// Strict-majority binning of the frames following `at_frame` (inclusive).
StateIndex discretize_future(const FrameGrid& grid, int at_frame, const ProjectionConfig& config);

/// discretize_future for every frame in [first_frame, last_frame].
std::vector<StateIndex> label_window(const FrameGrid& grid, int first_frame, int last_frame,
                                     const ProjectionConfig& config);

/// Precomputed tables for turning a state distribution into per-speaker
/// expected future activity.
class ProjectionCodec {
 public:
  explicit ProjectionCodec(ProjectionConfig config);

  const ProjectionConfig& config() const { return config_; }
  int speaker_count() const { return config_.speaker_count; }
  int state_count() const { return states_; }

  /// p_s = sum_state dist[state] * sum_b w_b * bit(state, s, b).
  template <typename T>
  std::vector<double> speaker_future_probability(std::span<const T> dist) const;

  /// Weighted activity of speaker s in `state` (the inner sum above).
  double speaker_weight(StateIndex state, int speaker) const {
    return weight_[static_cast<std::size_t>(speaker) * states_ + state];
  }

 private:
  ProjectionConfig config_;
  int states_ = 0;
  std::vector<double> weight_;  // [speaker][state]
};

std::vector<double> speaker_future_probability(std::span<const double> dist,
                                               const ProjectionConfig& config);

}  // namespace vap
