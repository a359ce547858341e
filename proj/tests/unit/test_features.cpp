#include <doctest.h>

#include <cmath>
#include <random>

#include "vap/error.hpp"
#include "vap/features.hpp"
#include "vap/kernels.hpp"

using namespace vap;

namespace {

std::vector<std::int16_t> noise(std::size_t n, std::uint64_t seed, double amplitude = 3000.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, amplitude);
  std::vector<std::int16_t> x(n);
  for (auto& v : x) v = static_cast<std::int16_t>(std::clamp(std::round(g(rng)), -32768.0, 32767.0));
  return x;
}

}  // namespace

TEST_CASE("frame arithmetic") {
  const FeatureConfig c;
  CHECK(c.hop_samples() == 320);
  CHECK(c.window_samples() == 400);
  CHECK(c.fft_size() == 512);
  const LogMelExtractor ex(c);
  CHECK(ex.extract(noise(320000, 1)).rows() == 1000);
  CHECK(ex.extract(noise(320000 + 319, 1)).rows() == 1000);
  CHECK(ex.extract(noise(320, 1)).rows() == 1);
  CHECK_THROWS_AS(ex.extract(noise(319, 1)), RangeError);

  FeatureConfig bad;
  bad.hop = 0.02003;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("log-mel values") {
  const FeatureConfig c;
  const LogMelExtractor ex(c);
  SUBCASE("silence gives the log floor") {
    const Matrix<float> m = ex.extract(std::vector<std::int16_t>(3200, 0));
    CHECK((m.array() == static_cast<float>(std::log(c.log_floor))).all());
  }
  SUBCASE("doubling the audio adds log 2") {
    const auto x = noise(16000, 2, 2000.0);
    std::vector<std::int16_t> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<std::int16_t>(2 * x[i]);
    const Matrix<float> a = ex.extract(x), b = ex.extract(y);
    // skip the zero-padded first frame; the floor makes the identity approximate
    const Matrix<float> diff = b.bottomRows(a.rows() - 1) - a.bottomRows(a.rows() - 1);
    CHECK((diff.array() - std::log(2.0f)).abs().maxCoeff() < 1e-3f);
  }
  SUBCASE("FFT front end agrees with a direct DFT") {
    const auto x = noise(4000, 3);
    const Matrix<float> m = ex.extract(x, Exec::serial);
    for (int f : {1, 5, 11}) {
      std::vector<float> chunk(400);
      for (int i = 0; i < 400; ++i) chunk[i] = x[f * 320 - 80 + i] / 32768.0f;
      const auto ref = reference::log_mel_frame(chunk, c.mel_bins, c.sample_rate, c.log_floor);
      for (int k = 0; k < c.mel_bins; ++k) CHECK(m(f, k) == doctest::Approx(ref[k]).epsilon(1e-4));
    }
  }
  SUBCASE("frame f depends only on samples before (f+1)*hop") {
    auto x = noise(6400, 4);
    const Matrix<float> a = ex.extract(x);
    for (std::size_t i = 10 * 320; i < x.size(); ++i) x[i] = static_cast<std::int16_t>(-x[i] / 2);
    const Matrix<float> b = ex.extract(x);
    CHECK(a.topRows(10) == b.topRows(10));
    CHECK(a.row(10) != b.row(10));
  }
  SUBCASE("parallel and serial extraction agree exactly") {
    const auto x = noise(32000, 5);
    CHECK(ex.extract(x, Exec::parallel) == ex.extract(x, Exec::serial));
  }
}

TEST_CASE("streaming extractor reproduces batch frames for any chunking") {
  const FeatureConfig c;
  const LogMelExtractor ex(c);
  std::vector<std::vector<std::int16_t>> audio{noise(16000, 6), noise(16000, 7), noise(16000, 8)};
  const Features batch = extract_features(audio, ex);
  for (int chunk : {320, 1, 777, 5000}) {
    StreamingFeatureExtractor stream(ex, 3);
    Features got(3, Matrix<float>(0, c.mel_bins));
    for (std::size_t first = 0; first < 16000; first += chunk) {
      const std::size_t n = std::min<std::size_t>(chunk, 16000 - first);
      std::vector<std::int16_t> inter;
      for (std::size_t i = 0; i < n; ++i)
        for (int s = 0; s < 3; ++s) inter.push_back(audio[s][first + i]);
      const Features f = stream.push_interleaved(inter);
      for (int s = 0; s < 3; ++s) {
        Matrix<float> joined(got[s].rows() + f[s].rows(), c.mel_bins);
        joined << got[s], f[s];
        got[s] = joined;
      }
    }
    for (int s = 0; s < 3; ++s) CHECK(got[s] == batch[s]);
  }
}

TEST_CASE("normalizer") {
  const FeatureConfig c;
  Features a{extract_features({noise(32000, 9)}, c)};
  Features b{extract_features({noise(32000, 10, 500.0)}, c)};
  const auto n = FeatureNormalizer::fit({&a, &b});
  REQUIRE(n.mean.size() == 40);
  Matrix<float> all(a[0].rows() + b[0].rows(), 40);
  all << n.apply(a[0]), n.apply(b[0]);
  for (int k = 0; k < 40; ++k) {
    CHECK(std::abs(all.col(k).mean()) < 1e-4);
    const double var = (all.col(k).array() - all.col(k).mean()).square().mean();
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
  CHECK_THROWS_AS(FeatureNormalizer::fit({}), ConfigError);
  const auto id = FeatureNormalizer::identity(40);
  CHECK(id.apply(a[0]) == a[0]);
}
