#include "vap/projection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "vap/error.hpp"

namespace vap {

double ProjectionConfig::horizon() const {
  return std::accumulate(bin_durations.begin(), bin_durations.end(), 0.0);
}

std::vector<int> ProjectionConfig::bin_frames() const {
  std::vector<int> frames;
  for (double d : bin_durations) {
    const double exact = d * frame_rate;
    const long rounded = std::lround(exact);
    if (rounded <= 0 || std::abs(exact - static_cast<double>(rounded)) > 1e-6)
      throw ConfigError("bin duration " + std::to_string(d) + " s is not a whole number of frames");
    frames.push_back(static_cast<int>(rounded));
  }
  return frames;
}

int ProjectionConfig::horizon_frames() const {
  const auto frames = bin_frames();
  return std::accumulate(frames.begin(), frames.end(), 0);
}

std::vector<double> ProjectionConfig::bin_weights() const {
  const double total = horizon();
  std::vector<double> w;
  for (double d : bin_durations) w.push_back(d / total);
  return w;
}

void ProjectionConfig::validate() const {
  if (speaker_count <= 0) throw ConfigError("projection speaker count must be positive");
  if (bin_durations.empty()) throw ConfigError("projection needs at least one bin");
  if (!(frame_rate > 0.0)) throw ConfigError("frame rate must be positive");
  for (double d : bin_durations)
    if (!(d > 0.0)) throw ConfigError("bin durations must be positive");
  if (state_bits() > kMaxStateBits)
    throw ConfigError("S*B = " + std::to_string(state_bits()) + " exceeds the supported maximum of " +
                      std::to_string(kMaxStateBits));
  (void)bin_frames();
}

std::uint64_t state_count(const ProjectionConfig& config) {
  if (config.speaker_count <= 0 || config.bin_count() <= 0)
    throw ConfigError("projection needs positive speaker and bin counts");
  if (config.state_bits() > kMaxStateBits)
    throw ConfigError("S*B = " + std::to_string(config.state_bits()) + " exceeds the supported maximum of " +
                      std::to_string(kMaxStateBits));
  return std::uint64_t{1} << config.state_bits();
}

StateIndex encode_state(const BinMatrix& bins, const ProjectionConfig& config) {
  if (bins.speakers != config.speaker_count || bins.bins != config.bin_count() ||
      bins.cells.size() != static_cast<std::size_t>(bins.speakers * bins.bins))
    throw ConfigError("bin matrix is " + std::to_string(bins.speakers) + "x" + std::to_string(bins.bins) +
                      ", projection expects " + std::to_string(config.speaker_count) + "x" +
                      std::to_string(config.bin_count()));
  StateIndex index = 0;
  for (int s = 0; s < bins.speakers; ++s)
    for (int b = 0; b < bins.bins; ++b) {
      const auto cell = bins.cells[s * bins.bins + b];
      if (cell > 1) throw ConfigError("bin matrix entries must be 0 or 1");
      if (cell) index |= StateIndex{1} << (s * bins.bins + b);
    }
  return index;
}

BinMatrix decode_state(StateIndex index, const ProjectionConfig& config) {
  if (index >= state_count(config))
    throw RangeError("state index " + std::to_string(index) + " out of range");
  BinMatrix bins(config.speaker_count, config.bin_count());
  for (int s = 0; s < bins.speakers; ++s)
    for (int b = 0; b < bins.bins; ++b) bins.set(s, b, state_bit(index, s, b, bins.bins));
  return bins;
}

StateIndex permute_state(StateIndex state, std::span<const int> perm, const ProjectionConfig& config) {
  const int bins = config.bin_count();
  if (perm.size() != static_cast<std::size_t>(config.speaker_count))
    throw ConfigError("permutation size must equal the speaker count");
  StateIndex out = 0;
  for (int s = 0; s < config.speaker_count; ++s)
    for (int b = 0; b < bins; ++b)
      if (state_bit(state, s, b, bins)) out |= StateIndex{1} << (perm[s] * bins + b);
  return out;
}

StateIndex discretize_future(const FrameGrid& grid, int at_frame, const ProjectionConfig& config) {
  if (grid.speaker_count() != config.speaker_count)
    throw ConfigError("grid speaker count does not match projection");
  const auto lengths = config.bin_frames();
  const int horizon = config.horizon_frames();
  if (at_frame < 0 || at_frame + horizon > grid.frame_count())
    throw RangeError("frame " + std::to_string(at_frame) + " needs " + std::to_string(horizon) +
                     " future frames; grid has " + std::to_string(grid.frame_count()));
  const int bins = config.bin_count();
  StateIndex index = 0;
  for (int s = 0; s < config.speaker_count; ++s) {
    const auto row = grid.row(s);
    int offset = at_frame;
    for (int b = 0; b < bins; ++b) {
      int active = 0;
      for (int f = offset; f < offset + lengths[b]; ++f) active += row[f];
      if (2 * active > lengths[b]) index |= StateIndex{1} << (s * bins + b);
      offset += lengths[b];
    }
  }
  return index;
}

std::vector<StateIndex> label_window(const FrameGrid& grid, int first_frame, int last_frame,
                                     const ProjectionConfig& config) {
  if (last_frame < first_frame) return {};
  std::vector<StateIndex> labels;
  labels.reserve(last_frame - first_frame + 1);
  for (int f = first_frame; f <= last_frame; ++f) labels.push_back(discretize_future(grid, f, config));
  return labels;
}

ProjectionCodec::ProjectionCodec(ProjectionConfig config) : config_(std::move(config)) {
  config_.validate();
  states_ = static_cast<int>(vap::state_count(config_));
  const auto w = config_.bin_weights();
  const int bins = config_.bin_count();
  weight_.assign(static_cast<std::size_t>(config_.speaker_count) * states_, 0.0);
  for (int s = 0; s < config_.speaker_count; ++s)
    for (int state = 0; state < states_; ++state) {
      double acc = 0.0;
      for (int b = 0; b < bins; ++b)
        if (state_bit(static_cast<StateIndex>(state), s, b, bins)) acc += w[b];
      weight_[static_cast<std::size_t>(s) * states_ + state] = acc;
    }
}

template <typename T>
std::vector<double> ProjectionCodec::speaker_future_probability(std::span<const T> dist) const {
  if (dist.size() != static_cast<std::size_t>(states_))
    throw ConfigError("distribution has " + std::to_string(dist.size()) + " entries, expected " +
                      std::to_string(states_));
  std::vector<double> p(config_.speaker_count, 0.0);
  for (int s = 0; s < config_.speaker_count; ++s) {
    const double* w = weight_.data() + static_cast<std::size_t>(s) * states_;
    double acc = 0.0;
    for (int state = 0; state < states_; ++state) acc += static_cast<double>(dist[state]) * w[state];
    p[s] = std::clamp(acc, 0.0, 1.0);
  }
  return p;
}

template std::vector<double> ProjectionCodec::speaker_future_probability<float>(std::span<const float>) const;
template std::vector<double> ProjectionCodec::speaker_future_probability<double>(std::span<const double>) const;

std::vector<double> speaker_future_probability(std::span<const double> dist, const ProjectionConfig& config) {
  return ProjectionCodec(config).speaker_future_probability(dist);
}

}  // namespace vap
