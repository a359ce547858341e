#pragma once

#include <cstdint>
#include <memory>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "vap/tensor.hpp"

namespace vap {

/// Log-mel front end. Frame f covers samples [f*hop - (window - hop), f*hop + hop),
/// zero-padded before the first sample, so N samples give floor(N / hop) frames
/// and frame f depends only on audio before (f + 1) * hop.
struct FeatureConfig {
  int mel_bins = 40;
  double window = 0.025;
  double hop = 0.020;
  int sample_rate = 16000;
  double log_floor = 1e-6;

  int window_samples() const;
  int hop_samples() const;
  int fft_size() const;
  void validate() const;

  friend bool operator==(const FeatureConfig&, const FeatureConfig&) = default;
};

void to_json(nlohmann::json& j, const FeatureConfig& c);
void from_json(const nlohmann::json& j, FeatureConfig& c);

/// Triangular HTK-mel filters over the FFT magnitude bins, stored sparsely.
struct MelFilterbank {
  int fft_size = 0;
  struct Filter {
    int first_bin = 0;
    std::vector<float> weights;
  };
  std::vector<Filter> filters;

  static MelFilterbank build(const FeatureConfig& config);
};

/// Periodic Hann window of `length` samples.
std::vector<float> hann_window(int length);

/// Optimized extractor (FFTW, OpenMP over frames). Immutable and shareable
/// across threads after construction.
class LogMelExtractor {
 public:
  explicit LogMelExtractor(FeatureConfig config);
  ~LogMelExtractor();
  LogMelExtractor(const LogMelExtractor&) = delete;
  LogMelExtractor& operator=(const LogMelExtractor&) = delete;

  const FeatureConfig& config() const { return config_; }

  /// All complete frames of one channel.
  Matrix<float> extract(std::span<const std::int16_t> samples, Exec exec = Exec::parallel) const;

  /// One frame from exactly window_samples() samples (already zero-padded).
  void frame(const float* window_samples, float* out) const;

 private:
  FeatureConfig config_;
  MelFilterbank bank_;
  std::vector<float> window_;
  void* plan_ = nullptr;
};

/// Per-channel features; every channel must have the same length >= one hop.
Features extract_features(const std::vector<std::vector<std::int16_t>>& audio, const FeatureConfig& config,
                          Exec exec = Exec::parallel);
Features extract_features(const std::vector<std::vector<std::int16_t>>& audio, const LogMelExtractor& extractor,
                          Exec exec = Exec::parallel);

/// Incremental front end producing the same frames as LogMelExtractor::extract.
class StreamingFeatureExtractor {
 public:
  StreamingFeatureExtractor(const LogMelExtractor& extractor, int channels);

  /// Appends interleaved samples; returns newly completed frames per channel.
  Features push_interleaved(std::span<const std::int16_t> interleaved);

 private:
  const LogMelExtractor& extractor_;
  int channels_;
  std::vector<std::vector<std::int16_t>> pending_;  // per channel, starts with the (window - hop) history
};

/// Per-mel-bin mean and standard deviation used to normalize model inputs.
struct FeatureNormalizer {
  std::vector<float> mean;
  std::vector<float> stddev;

  static FeatureNormalizer identity(int dims);
  /// Statistics over every frame of every channel of every item.
  static FeatureNormalizer fit(const std::vector<const Features*>& items);
  Matrix<float> apply(const Matrix<float>& features) const;
};

}  // namespace vap
