#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace vap {

inline constexpr double kDefaultFrameRate = 50.0;

/// One annotated speech segment, half-open [start, end) in seconds.
struct Segment {
  int speaker = 0;
  double start = 0.0;
  double end = 0.0;

  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Per-session voice activity for every speaker.
///
/// Construction normalizes the segment list: segments are validated, sorted by
/// (speaker, start) and overlapping or touching segments of one speaker are
/// merged. Segments ending at most one frame past `duration` are clipped.
class ActivityTrack {
 public:
  ActivityTrack() = default;
  ActivityTrack(int speaker_count, double duration, std::vector<Segment> segments);

  int speaker_count() const { return speaker_count_; }
  double duration() const { return duration_; }
  const std::vector<Segment>& segments() const { return segments_; }
  std::vector<Segment> segments_of(int speaker) const;

  friend bool operator==(const ActivityTrack&, const ActivityTrack&) = default;

 private:
  int speaker_count_ = 0;
  double duration_ = 0.0;
  std::vector<Segment> segments_;
};

/// Binary speakers x frames activity matrix.
class FrameGrid {
 public:
  FrameGrid() = default;
  FrameGrid(int speaker_count, int frame_count, double frame_rate = kDefaultFrameRate);

  int speaker_count() const { return speakers_; }
  int frame_count() const { return frames_; }
  double frame_rate() const { return frame_rate_; }

  bool active(int speaker, int frame) const {
    return cells_[static_cast<std::size_t>(speaker) * frames_ + frame] != 0;
  }
  void set(int speaker, int frame, bool value) {
    cells_[static_cast<std::size_t>(speaker) * frames_ + frame] = value ? 1 : 0;
  }
  std::span<const std::uint8_t> row(int speaker) const {
    return {cells_.data() + static_cast<std::size_t>(speaker) * frames_,
            static_cast<std::size_t>(frames_)};
  }
  int active_count(int frame) const;

  /// Grid restricted to frames [first, first + count).
  FrameGrid slice(int first, int count) const;

  friend bool operator==(const FrameGrid&, const FrameGrid&) = default;

 private:
  int speakers_ = 0;
  int frames_ = 0;
  double frame_rate_ = kDefaultFrameRate;
  std::vector<std::uint8_t> cells_;
};

/// Fraction of frames with exactly k active speakers, k = 0..S.
struct OccupancyStats {
  std::vector<double> fractions;

  double silence() const { return fractions.at(0); }
  double single() const { return fractions.at(1); }
  double double_() const { return fractions.at(2); }
  double triple() const { return fractions.at(3); }
};

/// Frame count for a duration: ceil(duration * frame_rate), robust to
/// representation error in the product.
int frame_count_for(double duration, double frame_rate);

/// Frame f of speaker s is active iff its center (f + 0.5) / frame_rate lies in
/// one of s's half-open segments.
FrameGrid rasterize(const ActivityTrack& track, double frame_rate = kDefaultFrameRate);

/// Maximal runs of active frames become segments.
ActivityTrack segment_extract(const FrameGrid& grid);

OccupancyStats occupancy_stats(const FrameGrid& grid);

}  // namespace vap
