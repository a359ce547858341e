#pragma once

#include <random>

#include "vap/activity.hpp"
#include "vap/net.hpp"

namespace vap::test {

inline FrameGrid random_grid(std::mt19937_64& rng, int speakers, int frames, double p = 0.5) {
  std::bernoulli_distribution on(p);
  FrameGrid g(speakers, frames);
  for (int s = 0; s < speakers; ++s)
    for (int f = 0; f < frames; ++f) g.set(s, f, on(rng));
  return g;
}

// Grid with runs rather than independent frames, closer to real speech.
inline FrameGrid bursty_grid(std::mt19937_64& rng, int speakers, int frames) {
  FrameGrid g(speakers, frames);
  std::uniform_int_distribution<int> run(1, 40);
  for (int s = 0; s < speakers; ++s) {
    bool on = rng() & 1;
    for (int f = 0; f < frames;) {
      const int n = run(rng);
      for (int k = 0; k < n && f < frames; ++k, ++f) g.set(s, f, on);
      on = !on;
    }
  }
  return g;
}

template <typename T>
ChannelMatrices<T> random_inputs(std::mt19937_64& rng, int speakers, int frames, int dims) {
  std::normal_distribution<double> n(0.0, 1.0);
  ChannelMatrices<T> x(speakers, Matrix<T>(frames, dims));
  for (auto& m : x)
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng));
  return x;
}

inline ModelConfig tiny_config(int speakers = 3, int width = 8, int mel = 4, int context = 12) {
  ModelConfig c;
  c.speaker_count = speakers;
  c.mel_bins = mel;
  c.d_model = width;
  c.attention_heads = 2;
  c.ffn_dim = 2 * width;
  c.context_frames = context;
  c.state_count = 1 << (2 * speakers);
  c.dropout = 0.0;
  return c;
}

}  // namespace vap::test
