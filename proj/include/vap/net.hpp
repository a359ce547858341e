#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "vap/kernels.hpp"
#include "vap/projection.hpp"
#include "vap/tensor.hpp"

namespace vap {

struct ModelConfig {
  int speaker_count = 3;
  int mel_bins = 40;
  int d_model = 64;
  int self_attention_layers = 1;
  int cross_attention_layers = 3;
  int attention_heads = 4;
  int ffn_dim = 256;
  int context_frames = 1000;
  int state_count = 64;
  double dropout = 0.1;

  void validate() const;
  /// Also checks state_count == 2^(S*B) of the paired projection.
  void validate(const ProjectionConfig& projection) const;
  int bins_per_speaker() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Maps (state, speaker) to the weight block of the speaker-tied VAP head:
/// the speaker's own bin pattern combined with the multiset of the other
/// speakers' patterns.
class HeadLayout {
 public:
  HeadLayout(int speakers, int bins);

  int speakers() const { return speakers_; }
  int states() const { return states_; }
  int blocks() const { return blocks_; }
  int block(StateIndex state, int speaker) const { return table_[state * speakers_ + speaker]; }

 private:
  int speakers_;
  int states_;
  int blocks_;
  std::vector<int> table_;
};

template <typename T>
struct LinearParams {
  Matrix<T> weight;  // in x out
  Matrix<T> bias;    // 1 x out
};

template <typename T>
struct NormParams {
  Matrix<T> gain;   // 1 x d
  Matrix<T> shift;  // 1 x d
};

template <typename T>
struct AttentionParams {
  LinearParams<T> query, key, value, output;
};

template <typename T>
struct FeedForwardParams {
  LinearParams<T> hidden, output;
};

template <typename T>
struct EncoderLayerParams {
  NormParams<T> attention_norm, ffn_norm;
  AttentionParams<T> attention;
  FeedForwardParams<T> ffn;
};

template <typename T>
struct CrossLayerParams {
  NormParams<T> self_norm, cross_norm, ffn_norm;
  AttentionParams<T> self_attention, cross_attention;
  FeedForwardParams<T> ffn;
};

/// Every trainable tensor of the net. All weights are shared across speaker channels.
template <typename T>
struct NetParams {
  LinearParams<T> input;
  std::vector<EncoderLayerParams<T>> encoder;
  std::vector<CrossLayerParams<T>> cross;
  NormParams<T> final_norm;
  Matrix<T> vap_weight;  // blocks x d
  Matrix<T> vap_bias;    // 1 x blocks
  Matrix<T> vad_self;    // d x 1
  Matrix<T> vad_other;   // d x 1
  Matrix<T> vad_bias;    // 1 x 1

  /// Tensors in canonical order with stable names.
  std::vector<std::pair<std::string, Matrix<T>*>> named();
  std::vector<std::pair<std::string, const Matrix<T>*>> named() const;

  NetParams zeros_like() const;
  void set_zero();
  std::size_t parameter_count() const;

  template <typename U>
  NetParams<U> cast() const;
};

template <typename T>
struct ModelOutput {
  Matrix<T> vap_logits;  // frames x states
  Matrix<T> vad_logits;  // frames x speakers
};

/// Key/value cache for incremental inference over one context window.
template <typename T>
struct InferenceCache {
  int length = 0;
  int capacity = 0;
  // Index [layer * speakers + channel]; capacity x d each.
  std::vector<Matrix<T>> encoder_keys, encoder_values;
  std::vector<Matrix<T>> self_keys, self_values;
  std::vector<Matrix<T>> cross_keys, cross_values;
};

template <typename T>
struct NormTape {
  Matrix<T> normalized;
  Eigen::Array<T, Eigen::Dynamic, 1> inv_std;
};

template <typename T>
struct AttentionBlockTape {
  NormTape<T> norm;
  Matrix<T> normed;
  Matrix<T> queries;
  Matrix<T> attended;
  kernels::AttentionTape<T> probs;
  Matrix<T> dropout;  // empty when dropout is off
};

template <typename T>
struct FeedForwardTape {
  NormTape<T> norm;
  Matrix<T> normed;
  Matrix<T> pre_activation;
  Matrix<T> activation;
  Matrix<T> dropout;
};

/// Everything the backward pass needs from one full-window forward pass.
template <typename T>
struct ForwardTape {
  ChannelMatrices<T> inputs;
  // [layer][channel]
  std::vector<std::vector<AttentionBlockTape<T>>> encoder_attention;
  std::vector<std::vector<FeedForwardTape<T>>> encoder_ffn;
  std::vector<std::vector<AttentionBlockTape<T>>> cross_self;
  std::vector<std::vector<AttentionBlockTape<T>>> cross_cross;
  std::vector<std::vector<FeedForwardTape<T>>> cross_ffn;
  std::vector<NormTape<T>> final_norm;
  ChannelMatrices<T> final_out;
  InferenceCache<T> cache;
};

/// Dropout settings for one training forward pass.
struct DropoutPlan {
  bool enabled = false;
  std::uint64_t seed = 0;
};

/// Causal multi-channel VAP network: shared per-channel input projection and
/// self-attention encoder, multi-channel layers (self-attention, cross-attention
/// to the other channels, feed-forward), and speaker-tied VAP/VAD heads over the
/// per-frame concatenation of all channels.
template <typename T>
class VapNet {
 public:
  enum class HeadInit { random, zero };

  VapNet(ModelConfig config, std::uint64_t seed, HeadInit head_init = HeadInit::random);
  VapNet(ModelConfig config, NetParams<T> params);

  const ModelConfig& config() const { return config_; }
  const HeadLayout& head_layout() const { return layout_; }
  NetParams<T>& params() { return params_; }
  const NetParams<T>& params() const { return params_; }

  InferenceCache<T> make_cache(int capacity) const;

  /// Runs `inputs` (normalized features, frames x mel per channel) as the
  /// frames following those already in `cache`, appending their keys/values.
  ModelOutput<T> forward(const ChannelMatrices<T>& inputs, InferenceCache<T>& cache,
                         Exec exec = Exec::parallel) const;

  /// Convenience: fresh cache, whole input at once.
  ModelOutput<T> forward(const ChannelMatrices<T>& inputs, Exec exec = Exec::parallel) const;

  /// Full-window forward that records what backward needs.
  ModelOutput<T> forward_train(const ChannelMatrices<T>& inputs, ForwardTape<T>& tape, const DropoutPlan& dropout,
                               Exec exec = Exec::parallel) const;

  /// Accumulates parameter gradients for output gradients `grad` into `grads`.
  void backward(const ForwardTape<T>& tape, const ModelOutput<T>& grad, NetParams<T>& grads,
                Exec exec = Exec::parallel) const;

  template <typename U>
  VapNet<U> cast() const {
    return VapNet<U>(config_, params_.template cast<U>());
  }

 private:
  ModelOutput<T> run(const ChannelMatrices<T>& inputs, InferenceCache<T>& cache, ForwardTape<T>* tape,
                     const DropoutPlan& dropout, Exec exec) const;

  ModelConfig config_;
  HeadLayout layout_;
  NetParams<T> params_;
};

template <typename T>
template <typename U>
NetParams<U> NetParams<T>::cast() const {
  NetParams<U> out;
  auto cast_linear = [](const LinearParams<T>& p) { return LinearParams<U>{p.weight.template cast<U>(), p.bias.template cast<U>()}; };
  auto cast_norm = [](const NormParams<T>& p) { return NormParams<U>{p.gain.template cast<U>(), p.shift.template cast<U>()}; };
  auto cast_attention = [&](const AttentionParams<T>& p) {
    return AttentionParams<U>{cast_linear(p.query), cast_linear(p.key), cast_linear(p.value), cast_linear(p.output)};
  };
  auto cast_ffn = [&](const FeedForwardParams<T>& p) {
    return FeedForwardParams<U>{cast_linear(p.hidden), cast_linear(p.output)};
  };
  out.input = cast_linear(input);
  for (const auto& l : encoder)
    out.encoder.push_back({cast_norm(l.attention_norm), cast_norm(l.ffn_norm), cast_attention(l.attention), cast_ffn(l.ffn)});
  for (const auto& l : cross)
    out.cross.push_back({cast_norm(l.self_norm), cast_norm(l.cross_norm), cast_norm(l.ffn_norm),
                         cast_attention(l.self_attention), cast_attention(l.cross_attention), cast_ffn(l.ffn)});
  out.final_norm = cast_norm(final_norm);
  out.vap_weight = vap_weight.template cast<U>();
  out.vap_bias = vap_bias.template cast<U>();
  out.vad_self = vad_self.template cast<U>();
  out.vad_other = vad_other.template cast<U>();
  out.vad_bias = vad_bias.template cast<U>();
  return out;
}

/// Sinusoidal positional encoding rows for positions [first, first + count).
template <typename T>
Matrix<T> positional_encoding(int first, int count, int width);

}  // namespace vap
