#include "vap/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <complex>
#include <cmath>
#include <mutex>
#include <numbers>

#include "vap/error.hpp"

namespace vap {

namespace {

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace

int FeatureConfig::window_samples() const { return static_cast<int>(std::lround(window * sample_rate)); }
int FeatureConfig::hop_samples() const { return static_cast<int>(std::lround(hop * sample_rate)); }

int FeatureConfig::fft_size() const {
  int n = 1;
  while (n < window_samples()) n <<= 1;
  return n;
}

void FeatureConfig::validate() const {
  if (mel_bins <= 0) throw ConfigError("mel_bins must be positive");
  if (sample_rate <= 0) throw ConfigError("sample_rate must be positive");
  if (!(hop > 0.0) || !(window >= hop)) throw ConfigError("feature window must be at least one hop");
  if (std::abs(hop * sample_rate - hop_samples()) > 1e-6)
    throw ConfigError("feature hop must be a whole number of samples");
  if (std::abs(window * sample_rate - window_samples()) > 1e-6)
    throw ConfigError("feature window must be a whole number of samples");
  if (!(log_floor > 0.0)) throw ConfigError("log_floor must be positive");
}

void to_json(nlohmann::json& j, const FeatureConfig& c) {
  j = {{"mel_bins", c.mel_bins},
       {"window", c.window},
       {"hop", c.hop},
       {"sample_rate", c.sample_rate},
       {"log_floor", c.log_floor}};
}

void from_json(const nlohmann::json& j, FeatureConfig& c) {
  j.at("mel_bins").get_to(c.mel_bins);
  j.at("window").get_to(c.window);
  j.at("hop").get_to(c.hop);
  j.at("sample_rate").get_to(c.sample_rate);
  if (j.contains("log_floor")) j.at("log_floor").get_to(c.log_floor);
}

MelFilterbank MelFilterbank::build(const FeatureConfig& config) {
  MelFilterbank bank;
  bank.fft_size = config.fft_size();
  const int bins = bank.fft_size / 2 + 1;
  const double nyquist = config.sample_rate / 2.0;
  const double mel_max = hz_to_mel(nyquist);
  std::vector<double> edges;
  for (int i = 0; i < config.mel_bins + 2; ++i) edges.push_back(mel_to_hz(mel_max * i / (config.mel_bins + 1)));
  const double bin_hz = static_cast<double>(config.sample_rate) / bank.fft_size;

  for (int m = 0; m < config.mel_bins; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    Filter filter;
    filter.first_bin = -1;
    for (int k = 0; k < bins; ++k) {
      const double f = k * bin_hz;
      double w = 0.0;
      if (f > lo && f < mid) w = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi) w = (hi - f) / (hi - mid);
      if (w > 0.0) {
        if (filter.first_bin < 0) filter.first_bin = k;
        filter.weights.resize(k - filter.first_bin + 1, 0.0f);
        filter.weights[k - filter.first_bin] = static_cast<float>(w);
      }
    }
    if (filter.first_bin < 0) {
      // Narrower than one FFT bin: take the nearest bin.
      filter.first_bin = std::min(bins - 1, static_cast<int>(std::lround(mid / bin_hz)));
      filter.weights = {1.0f};
    }
    bank.filters.push_back(std::move(filter));
  }
  return bank;
}

std::vector<float> hann_window(int length) {
  std::vector<float> w(length);
  for (int i = 0; i < length; ++i)
    w[i] = static_cast<float>(0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / length));
  return w;
}

LogMelExtractor::LogMelExtractor(FeatureConfig config)
    : config_(config), bank_(MelFilterbank::build(config)), window_(hann_window(config.window_samples())) {
  config_.validate();
  const int n = config_.fft_size();
  std::vector<float> in(n);
  std::vector<std::complex<float>> out(n / 2 + 1);
  std::lock_guard lock(fftw_planner_mutex());
  plan_ = fftwf_plan_dft_r2c_1d(n, in.data(), reinterpret_cast<fftwf_complex*>(out.data()), FFTW_ESTIMATE | FFTW_UNALIGNED);
  if (!plan_) throw Error("FFTW planning failed");
}

LogMelExtractor::~LogMelExtractor() {
  std::lock_guard lock(fftw_planner_mutex());
  fftwf_destroy_plan(static_cast<fftwf_plan>(plan_));
}

void LogMelExtractor::frame(const float* samples, float* out) const {
  const int n = config_.fft_size();
  const int w = config_.window_samples();
  thread_local std::vector<float> buffer;
  thread_local std::vector<std::complex<float>> spectrum;
  thread_local std::vector<float> magnitude;
  buffer.assign(n, 0.0f);
  spectrum.resize(n / 2 + 1);
  magnitude.resize(n / 2 + 1);
  for (int i = 0; i < w; ++i) buffer[i] = samples[i] * window_[i];
  fftwf_execute_dft_r2c(static_cast<fftwf_plan>(plan_), buffer.data(),
                         reinterpret_cast<fftwf_complex*>(spectrum.data()));
  for (int k = 0; k <= n / 2; ++k)
    magnitude[k] = std::abs(spectrum[k]);
  const float floor = static_cast<float>(config_.log_floor);
  for (std::size_t m = 0; m < bank_.filters.size(); ++m) {
    const auto& f = bank_.filters[m];
    float acc = 0.0f;
    for (std::size_t k = 0; k < f.weights.size(); ++k) acc += f.weights[k] * magnitude[f.first_bin + k];
    out[m] = std::log(acc + floor);
  }
}

Matrix<float> LogMelExtractor::extract(std::span<const std::int16_t> samples, Exec exec) const {
  const int hop = config_.hop_samples();
  const int win = config_.window_samples();
  const int history = win - hop;
  if (samples.size() < static_cast<std::size_t>(hop))
    throw RangeError("audio shorter than one analysis hop (" + std::to_string(hop) + " samples)");
  const long frames = static_cast<long>(samples.size() / hop);
  Matrix<float> out(frames, config_.mel_bins);

#pragma omp parallel for schedule(static) if (exec == Exec::parallel)
  for (long f = 0; f < frames; ++f) {
    thread_local std::vector<float> chunk;
    chunk.assign(win, 0.0f);
    const long start = f * hop - history;
    for (int i = 0; i < win; ++i) {
      const long idx = start + i;
      if (idx >= 0) chunk[i] = samples[idx] / 32768.0f;
    }
    frame(chunk.data(), out.row(f).data());
  }
  return out;
}

Features extract_features(const std::vector<std::vector<std::int16_t>>& audio, const LogMelExtractor& extractor,
                          Exec exec) {
  if (audio.empty()) throw ConfigError("no audio channels");
  Features out;
  for (const auto& ch : audio) {
    if (ch.size() != audio.front().size()) throw ConfigError("audio channels differ in length");
    out.push_back(extractor.extract(ch, exec));
  }
  return out;
}

Features extract_features(const std::vector<std::vector<std::int16_t>>& audio, const FeatureConfig& config,
                          Exec exec) {
  const LogMelExtractor extractor(config);
  return extract_features(audio, extractor, exec);
}

StreamingFeatureExtractor::StreamingFeatureExtractor(const LogMelExtractor& extractor, int channels)
    : extractor_(extractor), channels_(channels) {
  const int history = extractor.config().window_samples() - extractor.config().hop_samples();
  pending_.assign(channels, std::vector<std::int16_t>(history, 0));
}

Features StreamingFeatureExtractor::push_interleaved(std::span<const std::int16_t> interleaved) {
  if (interleaved.size() % channels_ != 0) throw ConfigError("interleaved sample count not a multiple of channels");
  const std::size_t n = interleaved.size() / channels_;
  for (int c = 0; c < channels_; ++c) {
    auto& p = pending_[c];
    p.reserve(p.size() + n);
    for (std::size_t i = 0; i < n; ++i) p.push_back(interleaved[i * channels_ + c]);
  }
  const int hop = extractor_.config().hop_samples();
  const int win = extractor_.config().window_samples();
  const int history = win - hop;
  const long frames = static_cast<long>((pending_[0].size() - history) / hop);
  Features out(channels_, Matrix<float>(frames, extractor_.config().mel_bins));
  std::vector<float> chunk(win);
  for (int c = 0; c < channels_; ++c) {
    auto& p = pending_[c];
    for (long f = 0; f < frames; ++f) {
      for (int i = 0; i < win; ++i) chunk[i] = p[f * hop + i] / 32768.0f;
      extractor_.frame(chunk.data(), out[c].row(f).data());
    }
    p.erase(p.begin(), p.begin() + frames * hop);
  }
  return out;
}

FeatureNormalizer FeatureNormalizer::identity(int dims) {
  return {std::vector<float>(dims, 0.0f), std::vector<float>(dims, 1.0f)};
}

FeatureNormalizer FeatureNormalizer::fit(const std::vector<const Features*>& items) {
  int dims = -1;
  std::vector<double> sum, sq;
  double count = 0.0;
  for (const auto* item : items)
    for (const auto& ch : *item) {
      if (dims < 0) {
        dims = static_cast<int>(ch.cols());
        sum.assign(dims, 0.0);
        sq.assign(dims, 0.0);
      }
      for (Eigen::Index r = 0; r < ch.rows(); ++r)
        for (int d = 0; d < dims; ++d) {
          const double v = ch(r, d);
          sum[d] += v;
          sq[d] += v * v;
        }
      count += static_cast<double>(ch.rows());
    }
  if (dims < 0 || count == 0.0) throw ConfigError("cannot fit feature statistics on empty data");
  FeatureNormalizer n;
  for (int d = 0; d < dims; ++d) {
    const double mean = sum[d] / count;
    const double var = std::max(sq[d] / count - mean * mean, 0.0);
    n.mean.push_back(static_cast<float>(mean));
    n.stddev.push_back(static_cast<float>(std::max(std::sqrt(var), 1e-3)));
  }
  return n;
}

Matrix<float> FeatureNormalizer::apply(const Matrix<float>& features) const {
  if (features.cols() != static_cast<Eigen::Index>(mean.size()))
    throw ConfigError("feature width does not match normalizer");
  Matrix<float> out(features.rows(), features.cols());
  for (Eigen::Index r = 0; r < features.rows(); ++r)
    for (Eigen::Index d = 0; d < features.cols(); ++d) out(r, d) = (features(r, d) - mean[d]) / stddev[d];
  return out;
}

}  // namespace vap
