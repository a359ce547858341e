#include "vap/activity.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "vap/error.hpp"

namespace vap {

namespace {

constexpr double kTimeEpsilon = 1e-9;

std::string describe(const Segment& s) {
  std::ostringstream out;
  out << "segment(speaker=" << s.speaker << ", start=" << s.start << ", end=" << s.end << ")";
  return out.str();
}

}  // namespace

ActivityTrack::ActivityTrack(int speaker_count, double duration, std::vector<Segment> segments)
    : speaker_count_(speaker_count), duration_(duration) {
  if (speaker_count <= 0) throw ConfigError("speaker count must be positive");
  if (!(duration >= 0.0) || !std::isfinite(duration)) throw ConfigError("duration must be finite and non-negative");
  const double slack = 1.0 / kDefaultFrameRate;

  for (auto& s : segments) {
    if (s.speaker < 0 || s.speaker >= speaker_count)
      throw RangeError(describe(s) + ": speaker index out of range");
    if (!std::isfinite(s.start) || !std::isfinite(s.end))
      throw ParseError(describe(s) + ": non-finite time");
    if (!(s.end > s.start)) throw ParseError(describe(s) + ": end must be greater than start");
    if (s.start < 0.0) throw RangeError(describe(s) + ": negative start");
    if (s.end > duration + slack + kTimeEpsilon)
      throw RangeError(describe(s) + ": ends after session duration " + std::to_string(duration));
    s.end = std::min(s.end, duration);
    if (!(s.end > s.start)) throw RangeError(describe(s) + ": starts at or after session end");
  }

  std::sort(segments.begin(), segments.end(), [](const Segment& a, const Segment& b) {
    return a.speaker != b.speaker ? a.speaker < b.speaker : a.start < b.start;
  });
  for (const auto& s : segments) {
    if (!segments_.empty() && segments_.back().speaker == s.speaker &&
        s.start <= segments_.back().end) {
      segments_.back().end = std::max(segments_.back().end, s.end);
    } else {
      segments_.push_back(s);
    }
  }
}

std::vector<Segment> ActivityTrack::segments_of(int speaker) const {
  std::vector<Segment> out;
  for (const auto& s : segments_)
    if (s.speaker == speaker) out.push_back(s);
  return out;
}

FrameGrid::FrameGrid(int speaker_count, int frame_count, double frame_rate)
    : speakers_(speaker_count), frames_(frame_count), frame_rate_(frame_rate) {
  if (speaker_count <= 0) throw ConfigError("speaker count must be positive");
  if (frame_count < 0) throw ConfigError("frame count must be non-negative");
  if (!(frame_rate > 0.0)) throw ConfigError("frame rate must be positive");
  cells_.assign(static_cast<std::size_t>(speaker_count) * frame_count, 0);
}

int FrameGrid::active_count(int frame) const {
  int n = 0;
  for (int s = 0; s < speakers_; ++s) n += active(s, frame) ? 1 : 0;
  return n;
}

FrameGrid FrameGrid::slice(int first, int count) const {
  if (first < 0 || count < 0 || first + count > frames_)
    throw RangeError("grid slice outside [0, " + std::to_string(frames_) + ")");
  FrameGrid out(speakers_, count, frame_rate_);
  for (int s = 0; s < speakers_; ++s)
    for (int f = 0; f < count; ++f) out.set(s, f, active(s, first + f));
  return out;
}

int frame_count_for(double duration, double frame_rate) {
  return static_cast<int>(std::ceil(duration * frame_rate - kTimeEpsilon));
}

FrameGrid rasterize(const ActivityTrack& track, double frame_rate) {
  if (!(frame_rate > 0.0)) throw ConfigError("frame rate must be positive");
  const int frames = frame_count_for(track.duration(), frame_rate);
  FrameGrid grid(track.speaker_count(), frames, frame_rate);
  auto center = [frame_rate](int f) { return (f + 0.5) / frame_rate; };

  for (const auto& seg : track.segments()) {
    // Estimate the first/last frame, then settle them with the exact center test.
    int first = std::max(0, static_cast<int>(std::floor(seg.start * frame_rate - 0.5)) - 1);
    while (first < frames && center(first) < seg.start) ++first;
    int last = std::max(first, static_cast<int>(std::floor(seg.end * frame_rate - 0.5)) - 1);
    while (last < frames && center(last) < seg.end) ++last;
    for (int f = first; f < last; ++f) grid.set(seg.speaker, f, true);
  }
  return grid;
}

ActivityTrack segment_extract(const FrameGrid& grid) {
  std::vector<Segment> segments;
  const double rate = grid.frame_rate();
  for (int s = 0; s < grid.speaker_count(); ++s) {
    int f = 0;
    while (f < grid.frame_count()) {
      if (!grid.active(s, f)) {
        ++f;
        continue;
      }
      int end = f;
      while (end < grid.frame_count() && grid.active(s, end)) ++end;
      segments.push_back({s, f / rate, end / rate});
      f = end;
    }
  }
  return ActivityTrack(grid.speaker_count(), grid.frame_count() / rate, std::move(segments));
}

OccupancyStats occupancy_stats(const FrameGrid& grid) {
  if (grid.frame_count() == 0) throw RangeError("occupancy statistics of an empty grid");
  std::vector<long> counts(grid.speaker_count() + 1, 0);
  for (int f = 0; f < grid.frame_count(); ++f) ++counts[grid.active_count(f)];
  OccupancyStats stats;
  for (long c : counts) stats.fractions.push_back(static_cast<double>(c) / grid.frame_count());
  return stats;
}

}  // namespace vap
