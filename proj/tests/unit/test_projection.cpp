#include <doctest.h>

#include <numeric>
#include <random>

#include "support.hpp"
#include "vap/error.hpp"
#include "vap/projection.hpp"

using namespace vap;

namespace {

ProjectionConfig config(int speakers, std::vector<double> bins) {
  ProjectionConfig c;
  c.speaker_count = speakers;
  c.bin_durations = std::move(bins);
  return c;
}

// Independent majority oracle: explicit frame counting per bin.
StateIndex brute_force_state(const FrameGrid& g, int at, const std::vector<int>& lengths) {
  StateIndex state = 0;
  const int B = static_cast<int>(lengths.size());
  for (int s = 0; s < g.speaker_count(); ++s) {
    int first = at;
    for (int b = 0; b < B; ++b) {
      int on = 0;
      for (int f = first; f < first + lengths[b]; ++f) on += g.active(s, f) ? 1 : 0;
      if (2 * on > lengths[b]) state |= StateIndex{1} << (s * B + b);
      first += lengths[b];
    }
  }
  return state;
}

}  // namespace

TEST_CASE("state counts") {
  CHECK(state_count(config(3, {0.2, 0.4})) == 64);
  CHECK(state_count(config(2, {0.2, 0.4, 0.6, 0.8})) == 256);
  CHECK(state_count(config(4, {0.2, 0.4, 0.6, 0.8})) == 65536);
  CHECK_THROWS_AS(state_count(config(5, {0.2, 0.2, 0.2, 0.2, 0.2})), ConfigError);
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(config(3, {0.2, 0.41}).validate(), ConfigError);
  CHECK_THROWS_AS(config(3, {}).validate(), ConfigError);
  CHECK_THROWS_AS(config(0, {0.2}).validate(), ConfigError);
  const auto c = config(3, {0.2, 0.4});
  CHECK(c.horizon_frames() == 30);
  CHECK(c.bin_frames() == std::vector<int>{10, 20});
  CHECK(c.bin_weights()[0] == doctest::Approx(1.0 / 3.0));
  CHECK(c.bin_weights()[1] == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("encode/decode are mutually inverse") {
  for (auto [S, B] : {std::pair{2, 2}, {3, 2}, {2, 4}, {3, 4}, {4, 3}}) {
    const auto c = config(S, std::vector<double>(B, 0.2));
    const auto n = state_count(c);
    for (StateIndex i = 0; i < n; ++i) {
      const BinMatrix m = decode_state(i, c);
      CHECK(encode_state(m, c) == i);
      for (int s = 0; s < S; ++s)
        for (int b = 0; b < B; ++b) CHECK(m.at(s, b) == state_bit(i, s, b, B));
    }
    CHECK_THROWS_AS(decode_state(static_cast<StateIndex>(n), c), RangeError);
  }
  const auto c = config(3, {0.2, 0.4});
  CHECK(encode_state(BinMatrix(3, 2), c) == 0);
  BinMatrix ones(3, 2);
  for (auto& v : ones.cells) v = 1;
  CHECK(encode_state(ones, c) == 63);
  CHECK(decode_state(63, c) == ones);
  CHECK_THROWS_AS(encode_state(BinMatrix(2, 2), c), ConfigError);
}

TEST_CASE("bit layout is speaker-major with the near bin first") {
  const auto c = config(3, {0.2, 0.4});
  BinMatrix m(3, 2);
  m.set(2, 1, true);
  CHECK(encode_state(m, c) == 32);
  m = BinMatrix(3, 2);
  m.set(1, 0, true);
  CHECK(encode_state(m, c) == 4);
}

TEST_CASE("discretize_future hand examples") {
  const auto c = config(3, {0.2, 0.4});
  FrameGrid g(3, 60);
  const int at = 7;
  SUBCASE("exact half of a bin is inactive") {
    for (int f = at; f < at + 5; ++f) g.set(0, f, true);
    CHECK(discretize_future(g, at, c) == 0);
    g.set(0, at + 5, true);
    CHECK(discretize_future(g, at, c) == 1);
  }
  SUBCASE("speaker 2 in the far bin") {
    for (int f = at + 10; f < at + 30; ++f) g.set(2, f, true);
    CHECK(discretize_future(g, at, c) == 32);
  }
  SUBCASE("everything active") {
    for (int s = 0; s < 3; ++s)
      for (int f = 0; f < 60; ++f) g.set(s, f, true);
    CHECK(discretize_future(g, at, c) == 63);
  }
  CHECK_THROWS_AS(discretize_future(g, 31, c), RangeError);
  CHECK_NOTHROW(discretize_future(g, 30, c));
}

TEST_CASE("discretize_future matches a frame-counting oracle") {
  std::mt19937_64 rng(2024);
  for (auto bins : {std::vector<double>{0.2, 0.4}, std::vector<double>{0.2, 0.4, 0.6, 0.8}}) {
    const auto c = config(bins.size() == 2 ? 3 : 2, bins);
    const auto lengths = c.bin_frames();
    for (int trial = 0; trial < 2000; ++trial) {
      const FrameGrid g = trial % 2 ? test::random_grid(rng, c.speaker_count, c.horizon_frames() + 5)
                                    : test::bursty_grid(rng, c.speaker_count, c.horizon_frames() + 5);
      const int at = static_cast<int>(rng() % 6);
      CHECK(discretize_future(g, at, c) == brute_force_state(g, at, lengths));
    }
  }
}

TEST_CASE("discretize_future is monotone per speaker") {
  std::mt19937_64 rng(8);
  const auto c = config(3, {0.2, 0.4});
  for (int trial = 0; trial < 500; ++trial) {
    FrameGrid g = test::random_grid(rng, 3, 30);
    const StateIndex before = discretize_future(g, 0, c);
    g.set(static_cast<int>(rng() % 3), static_cast<int>(rng() % 30), true);
    const StateIndex after = discretize_future(g, 0, c);
    CHECK((before & after) == before);
  }
}

TEST_CASE("label_window") {
  const auto c = config(3, {0.2, 0.4});
  CHECK(label_window(FrameGrid(3, 1030), 0, 999, c) == std::vector<StateIndex>(1000, 0));
  std::mt19937_64 rng(4);
  const FrameGrid g = test::bursty_grid(rng, 3, 200);
  const auto full = label_window(g, 0, 150, c);
  const auto shifted = label_window(g.slice(20, 180), 0, 130, c);
  CHECK(std::equal(shifted.begin(), shifted.end(), full.begin() + 20));
  CHECK_THROWS_AS(label_window(g, 0, 171, c), RangeError);
}

TEST_CASE("speaker future probability") {
  const auto c = config(3, {0.2, 0.4});
  const ProjectionCodec codec(c);
  std::vector<double> dist(64, 0.0);
  dist[0] = 1.0;
  CHECK(codec.speaker_future_probability<double>(dist) == std::vector<double>{0, 0, 0});
  dist[0] = 0.0;
  dist[63] = 1.0;
  CHECK(codec.speaker_future_probability<double>(dist) == std::vector<double>{1, 1, 1});

  SUBCASE("uniform distribution against brute force") {
    const std::vector<double> uniform(64, 1.0 / 64);
    const auto p = codec.speaker_future_probability<double>(uniform);
    std::vector<double> oracle(3, 0.0);
    const double w[2] = {1.0 / 3.0, 2.0 / 3.0};
    for (int state = 0; state < 64; ++state)
      for (int s = 0; s < 3; ++s)
        for (int b = 0; b < 2; ++b)
          if ((state >> (s * 2 + b)) & 1) oracle[s] += uniform[state] * w[b];
    for (int s = 0; s < 3; ++s) {
      CHECK(std::abs(p[s] - 0.5) <= 1e-9);
      CHECK(std::abs(p[s] - oracle[s]) <= 1e-12);
    }
  }

  SUBCASE("linear, bounded and permutation-equivariant") {
    std::mt19937_64 rng(9);
    std::gamma_distribution<double> g(0.5);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> a(64), b(64);
      for (auto& v : a) v = g(rng);
      for (auto& v : b) v = g(rng);
      const double sa = std::accumulate(a.begin(), a.end(), 0.0), sb = std::accumulate(b.begin(), b.end(), 0.0);
      for (auto& v : a) v /= sa;
      for (auto& v : b) v /= sb;
      std::vector<double> mix(64);
      for (int i = 0; i < 64; ++i) mix[i] = 0.3 * a[i] + 0.7 * b[i];
      const auto pa = codec.speaker_future_probability<double>(a);
      const auto pb = codec.speaker_future_probability<double>(b);
      const auto pm = codec.speaker_future_probability<double>(mix);
      for (int s = 0; s < 3; ++s) {
        CHECK(pm[s] == doctest::Approx(0.3 * pa[s] + 0.7 * pb[s]).epsilon(1e-12));
        CHECK(pa[s] >= 0.0);
        CHECK(pa[s] <= 1.0);
      }
      const std::vector<int> perm{2, 0, 1};
      std::vector<double> moved(64);
      for (StateIndex st = 0; st < 64; ++st) moved[permute_state(st, perm, c)] = a[st];
      const auto pp = codec.speaker_future_probability<double>(moved);
      for (int s = 0; s < 3; ++s) CHECK(pp[perm[s]] == doctest::Approx(pa[s]).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(codec.speaker_future_probability<double>(std::vector<double>(10, 0.1)), ConfigError);
}

TEST_CASE("permute_state relabels speakers") {
  const auto c = config(3, {0.2, 0.4});
  BinMatrix m(3, 2);
  m.set(0, 0, true);
  m.set(2, 1, true);
  const std::vector<int> perm{1, 2, 0};
  BinMatrix expect(3, 2);
  expect.set(1, 0, true);
  expect.set(0, 1, true);
  CHECK(decode_state(permute_state(encode_state(m, c), perm, c), c) == expect);
}
