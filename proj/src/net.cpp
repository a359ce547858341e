#include "vap/net.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <random>

#include "vap/error.hpp"

namespace vap {

namespace {

constexpr double kNormEpsilon = 1e-5;
constexpr int kMaxSpeakers = 16;

template <typename T>
using Column = Eigen::Array<T, Eigen::Dynamic, 1>;

// ---------------------------------------------------------------------------
// Primitive layers

template <typename T>
Matrix<T> linear(const Matrix<T>& x, const LinearParams<T>& p) {
  Matrix<T> y(x.rows(), p.weight.cols());
  y.noalias() = x * p.weight;
  y.rowwise() += p.bias.row(0);
  return y;
}

/// Accumulates weight/bias gradients and adds dx into `dx`.
template <typename T>
void linear_backward(const Matrix<T>& x, const Matrix<T>& dy, const LinearParams<T>& p, LinearParams<T>& g,
                     Matrix<T>& dx) {
  g.weight.noalias() += x.transpose() * dy;
  g.bias += dy.colwise().sum();
  dx.noalias() += dy * p.weight.transpose();
}

// Row loops throughout: broadcasting across row-major matrices does not vectorize.
template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const NormParams<T>& p, NormTape<T>* tape) {
  const Eigen::Index n = x.rows();
  const T width = static_cast<T>(x.cols());
  Matrix<T> xhat(n, x.cols()), y(n, x.cols());
  Column<T> inv(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    xhat.row(r) = x.row(r).array() - x.row(r).mean();
    inv(r) = T(1) / std::sqrt(xhat.row(r).squaredNorm() / width + static_cast<T>(kNormEpsilon));
    xhat.row(r) *= inv(r);
    y.row(r) = xhat.row(r).cwiseProduct(p.gain) + p.shift;
  }
  if (tape) {
    tape->normalized = std::move(xhat);
    tape->inv_std = std::move(inv);
  }
  return y;
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const NormParams<T>& p, const NormTape<T>& tape, NormParams<T>& g) {
  const auto& xhat = tape.normalized;
  g.gain += dy.cwiseProduct(xhat).colwise().sum();
  g.shift += dy.colwise().sum();
  const T width = static_cast<T>(dy.cols());
  Matrix<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const auto dxhat = dy.row(r).cwiseProduct(p.gain).eval();
    const T m1 = dxhat.sum() / width;
    const T m2 = dxhat.dot(xhat.row(r)) / width;
    dx.row(r) = ((dxhat.array() - m1) - xhat.row(r).array() * m2) * tape.inv_std(r);
  }
  return dx;
}

template <typename T>
constexpr T gelu_k() {
  return static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
}

template <typename T>
Matrix<T> gelu(const Matrix<T>& x) {
  const T k = gelu_k<T>();
  const T c = static_cast<T>(0.044715);
  return (static_cast<T>(0.5) * x.array() * (static_cast<T>(1) + (k * (x.array() + c * x.array().cube())).tanh()))
      .matrix();
}

template <typename T>
Matrix<T> gelu_derivative(const Matrix<T>& x) {
  const T k = gelu_k<T>();
  const T c = static_cast<T>(0.044715);
  const auto t = (k * (x.array() + c * x.array().cube())).tanh().eval();
  return (static_cast<T>(0.5) * (static_cast<T>(1) + t) +
          static_cast<T>(0.5) * x.array() * (static_cast<T>(1) - t.square()) * k *
              (static_cast<T>(1) + static_cast<T>(3) * c * x.array().square()))
      .matrix();
}

template <typename T>
Matrix<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, std::mt19937_64& rng) {
  Matrix<T> mask(rows, cols);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = u(rng) < p ? T(0) : keep;
  return mask;
}

template <typename T>
Matrix<T> xavier(int rows, int cols, std::mt19937_64& rng, double gain = 1.0) {
  const double a = gain * std::sqrt(6.0 / (rows + cols));
  std::uniform_real_distribution<double> u(-a, a);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
  return m;
}

template <typename T>
LinearParams<T> make_linear(int in, int out, std::mt19937_64& rng) {
  return {xavier<T>(in, out, rng), Matrix<T>::Zero(1, out)};
}

template <typename T>
NormParams<T> make_norm(int d) {
  return {Matrix<T>::Ones(1, d), Matrix<T>::Zero(1, d)};
}

template <typename T>
AttentionParams<T> make_attention(int d, std::mt19937_64& rng) {
  return {make_linear<T>(d, d, rng), make_linear<T>(d, d, rng), make_linear<T>(d, d, rng), make_linear<T>(d, d, rng)};
}

template <typename T>
FeedForwardParams<T> make_ffn(int d, int hidden, std::mt19937_64& rng) {
  return {make_linear<T>(d, hidden, rng), make_linear<T>(hidden, d, rng)};
}

// ---------------------------------------------------------------------------
// Blocks

struct BlockContext {
  int heads;
  int offset;
  double dropout;
  std::mt19937_64* rng;  // null: no dropout
  Exec exec;
};

/// Pre-norm self-attention sublayer; returns the residual branch output.
template <typename T>
Matrix<T> self_attention_block(const Matrix<T>& x, const NormParams<T>& norm, const AttentionParams<T>& p,
                               Matrix<T>& key_cache, Matrix<T>& value_cache, const BlockContext& ctx,
                               AttentionBlockTape<T>* tape) {
  const Eigen::Index n = x.rows();
  Matrix<T> normed = layer_norm(x, norm, tape ? &tape->norm : nullptr);
  Matrix<T> q = linear(normed, p.query);
  key_cache.middleRows(ctx.offset, n) = linear(normed, p.key);
  value_cache.middleRows(ctx.offset, n) = linear(normed, p.value);
  const kernels::KeyValue<T> stream{&key_cache, &value_cache};
  Matrix<T> attended;
  kernels::causal_attention<T>(q, std::span(&stream, 1), ctx.heads, ctx.offset, attended,
                               tape ? &tape->probs : nullptr, ctx.exec);
  Matrix<T> out = linear(attended, p.output);
  if (ctx.rng && ctx.dropout > 0.0) {
    Matrix<T> mask = dropout_mask<T>(out.rows(), out.cols(), ctx.dropout, *ctx.rng);
    out.array() *= mask.array();
    if (tape) tape->dropout = std::move(mask);
  } else if (tape) {
    tape->dropout.resize(0, 0);
  }
  if (tape) {
    tape->normed = std::move(normed);
    tape->queries = std::move(q);
    tape->attended = std::move(attended);
  }
  return out;
}

template <typename T>
Matrix<T> feed_forward_block(const Matrix<T>& x, const NormParams<T>& norm, const FeedForwardParams<T>& p,
                             const BlockContext& ctx, FeedForwardTape<T>* tape) {
  Matrix<T> normed = layer_norm(x, norm, tape ? &tape->norm : nullptr);
  Matrix<T> pre = linear(normed, p.hidden);
  Matrix<T> act = gelu(pre);
  Matrix<T> out = linear(act, p.output);
  if (ctx.rng && ctx.dropout > 0.0) {
    Matrix<T> mask = dropout_mask<T>(out.rows(), out.cols(), ctx.dropout, *ctx.rng);
    out.array() *= mask.array();
    if (tape) tape->dropout = std::move(mask);
  } else if (tape) {
    tape->dropout.resize(0, 0);
  }
  if (tape) {
    tape->normed = std::move(normed);
    tape->pre_activation = std::move(pre);
    tape->activation = std::move(act);
  }
  return out;
}

/// Gradient of the residual branch of a feed-forward block w.r.t. its input.
template <typename T>
Matrix<T> feed_forward_backward(const Matrix<T>& dout, const NormParams<T>& norm, const FeedForwardParams<T>& p,
                                const FeedForwardTape<T>& tape, NormParams<T>& g_norm, FeedForwardParams<T>& g) {
  Matrix<T> d = dout;
  if (tape.dropout.size()) d.array() *= tape.dropout.array();
  Matrix<T> dact = Matrix<T>::Zero(tape.activation.rows(), tape.activation.cols());
  linear_backward(tape.activation, d, p.output, g.output, dact);
  const Matrix<T> dpre = (dact.array() * gelu_derivative(tape.pre_activation).array()).matrix();
  Matrix<T> dnormed = Matrix<T>::Zero(tape.normed.rows(), tape.normed.cols());
  linear_backward(tape.normed, dpre, p.hidden, g.hidden, dnormed);
  return layer_norm_backward(dnormed, norm, tape.norm, g_norm);
}

/// Backward through the output projection and dropout of an attention block;
/// returns d(attended).
template <typename T>
Matrix<T> attention_output_backward(const Matrix<T>& dout, const AttentionParams<T>& p, const AttentionBlockTape<T>& tape,
                                    AttentionParams<T>& g) {
  Matrix<T> d = dout;
  if (tape.dropout.size()) d.array() *= tape.dropout.array();
  Matrix<T> dattended = Matrix<T>::Zero(tape.attended.rows(), tape.attended.cols());
  linear_backward(tape.attended, d, p.output, g.output, dattended);
  return dattended;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (speaker_count < 2 || speaker_count > kMaxSpeakers) throw ConfigError("speaker_count must lie in [2, 16]");
  if (mel_bins <= 0 || d_model <= 0 || ffn_dim <= 0 || context_frames <= 0)
    throw ConfigError("model dimensions must be positive");
  if (attention_heads <= 0 || d_model % attention_heads != 0)
    throw ConfigError("d_model must be divisible by attention_heads");
  if (self_attention_layers < 0 || cross_attention_layers < 0) throw ConfigError("layer counts must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  (void)bins_per_speaker();
}

void ModelConfig::validate(const ProjectionConfig& projection) const {
  validate();
  if (projection.speaker_count != speaker_count) throw ConfigError("model and projection speaker counts differ");
  if (static_cast<std::uint64_t>(state_count) != vap::state_count(projection))
    throw ConfigError("model state_count " + std::to_string(state_count) + " != 2^(S*B) = " +
                      std::to_string(vap::state_count(projection)));
}

int ModelConfig::bins_per_speaker() const {
  int bits = 0;
  while ((1 << bits) < state_count) ++bits;
  if ((1 << bits) != state_count || bits % speaker_count != 0)
    throw ConfigError("state_count must be 2^(speakers * bins)");
  return bits / speaker_count;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"speaker_count", c.speaker_count},
       {"mel_bins", c.mel_bins},
       {"d_model", c.d_model},
       {"self_attention_layers", c.self_attention_layers},
       {"cross_attention_layers", c.cross_attention_layers},
       {"attention_heads", c.attention_heads},
       {"ffn_dim", c.ffn_dim},
       {"context_frames", c.context_frames},
       {"state_count", c.state_count},
       {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("speaker_count", c.speaker_count);
  get("mel_bins", c.mel_bins);
  get("d_model", c.d_model);
  get("self_attention_layers", c.self_attention_layers);
  get("cross_attention_layers", c.cross_attention_layers);
  get("attention_heads", c.attention_heads);
  get("ffn_dim", c.ffn_dim);
  get("context_frames", c.context_frames);
  get("state_count", c.state_count);
  get("dropout", c.dropout);
}

HeadLayout::HeadLayout(int speakers, int bins) : speakers_(speakers) {
  const int patterns = 1 << bins;
  states_ = 1 << (speakers * bins);
  // Index every non-decreasing tuple of (speakers - 1) patterns.
  std::map<std::vector<int>, int> multiset_index;
  std::vector<int> tuple(speakers - 1, 0);
  while (true) {
    multiset_index.emplace(tuple, static_cast<int>(multiset_index.size()));
    int i = speakers - 2;
    while (i >= 0 && tuple[i] == patterns - 1) --i;
    if (i < 0) break;
    ++tuple[i];
    for (int k = i + 1; k < speakers - 1; ++k) tuple[k] = tuple[i];
  }
  const int multisets = static_cast<int>(multiset_index.size());
  blocks_ = patterns * multisets;
  table_.resize(static_cast<std::size_t>(states_) * speakers);
  const int mask = patterns - 1;
  for (int state = 0; state < states_; ++state)
    for (int s = 0; s < speakers; ++s) {
      std::vector<int> others;
      for (int a = 0; a < speakers; ++a)
        if (a != s) others.push_back((state >> (a * bins)) & mask);
      std::sort(others.begin(), others.end());
      const int own = (state >> (s * bins)) & mask;
      table_[static_cast<std::size_t>(state) * speakers + s] = own * multisets + multiset_index.at(others);
    }
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
std::vector<std::pair<std::string, Matrix<T>*>> NetParams<T>::named() {
  std::vector<std::pair<std::string, Matrix<T>*>> out;
  auto add_linear = [&](const std::string& prefix, LinearParams<T>& p) {
    out.emplace_back(prefix + ".weight", &p.weight);
    out.emplace_back(prefix + ".bias", &p.bias);
  };
  auto add_norm = [&](const std::string& prefix, NormParams<T>& p) {
    out.emplace_back(prefix + ".gain", &p.gain);
    out.emplace_back(prefix + ".shift", &p.shift);
  };
  auto add_attention = [&](const std::string& prefix, AttentionParams<T>& p) {
    add_linear(prefix + ".query", p.query);
    add_linear(prefix + ".key", p.key);
    add_linear(prefix + ".value", p.value);
    add_linear(prefix + ".output", p.output);
  };
  auto add_ffn = [&](const std::string& prefix, FeedForwardParams<T>& p) {
    add_linear(prefix + ".hidden", p.hidden);
    add_linear(prefix + ".output", p.output);
  };
  add_linear("input", input);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const std::string prefix = "encoder." + std::to_string(i);
    add_norm(prefix + ".attention_norm", encoder[i].attention_norm);
    add_attention(prefix + ".attention", encoder[i].attention);
    add_norm(prefix + ".ffn_norm", encoder[i].ffn_norm);
    add_ffn(prefix + ".ffn", encoder[i].ffn);
  }
  for (std::size_t i = 0; i < cross.size(); ++i) {
    const std::string prefix = "cross." + std::to_string(i);
    add_norm(prefix + ".self_norm", cross[i].self_norm);
    add_attention(prefix + ".self_attention", cross[i].self_attention);
    add_norm(prefix + ".cross_norm", cross[i].cross_norm);
    add_attention(prefix + ".cross_attention", cross[i].cross_attention);
    add_norm(prefix + ".ffn_norm", cross[i].ffn_norm);
    add_ffn(prefix + ".ffn", cross[i].ffn);
  }
  add_norm("final_norm", final_norm);
  out.emplace_back("vap_head.weight", &vap_weight);
  out.emplace_back("vap_head.bias", &vap_bias);
  out.emplace_back("vad_head.self", &vad_self);
  out.emplace_back("vad_head.other", &vad_other);
  out.emplace_back("vad_head.bias", &vad_bias);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Matrix<T>*>> NetParams<T>::named() const {
  std::vector<std::pair<std::string, const Matrix<T>*>> out;
  for (auto& [name, ptr] : const_cast<NetParams<T>*>(this)->named()) out.emplace_back(name, ptr);
  return out;
}

template <typename T>
NetParams<T> NetParams<T>::zeros_like() const {
  NetParams<T> out = *this;
  out.set_zero();
  return out;
}

template <typename T>
void NetParams<T>::set_zero() {
  for (auto& [_, m] : named()) m->setZero();
}

template <typename T>
std::size_t NetParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, m] : named()) n += static_cast<std::size_t>(m->size());
  return n;
}

template <typename T>
Matrix<T> positional_encoding(int first, int count, int width) {
  Matrix<T> pe(count, width);
  for (int r = 0; r < count; ++r) {
    const double pos = first + r;
    for (int i = 0; i < width; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / width);
      pe(r, i) = static_cast<T>(std::sin(pos * freq));
      if (i + 1 < width) pe(r, i + 1) = static_cast<T>(std::cos(pos * freq));
    }
  }
  return pe;
}

// ---------------------------------------------------------------------------
// VapNet

template <typename T>
VapNet<T>::VapNet(ModelConfig config, std::uint64_t seed, HeadInit head_init)
    : config_(config), layout_(config.speaker_count, (config.validate(), config.bins_per_speaker())) {
  std::mt19937_64 rng(seed);
  const int d = config_.d_model;
  params_.input = make_linear<T>(config_.mel_bins, d, rng);
  for (int i = 0; i < config_.self_attention_layers; ++i)
    params_.encoder.push_back({make_norm<T>(d), make_norm<T>(d), make_attention<T>(d, rng),
                               make_ffn<T>(d, config_.ffn_dim, rng)});
  for (int i = 0; i < config_.cross_attention_layers; ++i)
    params_.cross.push_back({make_norm<T>(d), make_norm<T>(d), make_norm<T>(d), make_attention<T>(d, rng),
                             make_attention<T>(d, rng), make_ffn<T>(d, config_.ffn_dim, rng)});
  params_.final_norm = make_norm<T>(d);
  params_.vap_weight = xavier<T>(layout_.blocks(), d, rng, 0.5);
  params_.vap_bias = Matrix<T>::Zero(1, layout_.blocks());
  params_.vad_self = xavier<T>(d, 1, rng, 0.5);
  params_.vad_other = xavier<T>(d, 1, rng, 0.5);
  params_.vad_bias = Matrix<T>::Zero(1, 1);
  if (head_init == HeadInit::zero) {
    params_.vap_weight.setZero();
    params_.vad_self.setZero();
    params_.vad_other.setZero();
  }
}

template <typename T>
VapNet<T>::VapNet(ModelConfig config, NetParams<T> params)
    : config_(config),
      layout_(config.speaker_count, (config.validate(), config.bins_per_speaker())),
      params_(std::move(params)) {
  const int d = config_.d_model;
  auto expect = [](const Matrix<T>& m, Eigen::Index r, Eigen::Index c, const char* what) {
    if (m.rows() != r || m.cols() != c) throw ConfigError(std::string("parameter shape mismatch: ") + what);
  };
  if (static_cast<int>(params_.encoder.size()) != config_.self_attention_layers ||
      static_cast<int>(params_.cross.size()) != config_.cross_attention_layers)
    throw ConfigError("parameter layer count does not match model config");
  expect(params_.input.weight, config_.mel_bins, d, "input.weight");
  expect(params_.vap_weight, layout_.blocks(), d, "vap_head.weight");
  expect(params_.vad_self, d, 1, "vad_head.self");
  for (const auto& l : params_.cross) expect(l.ffn.hidden.weight, d, config_.ffn_dim, "ffn.hidden.weight");
}

template <typename T>
InferenceCache<T> VapNet<T>::make_cache(int capacity) const {
  InferenceCache<T> cache;
  cache.capacity = capacity;
  const int d = config_.d_model;
  const int s = config_.speaker_count;
  cache.encoder_keys.assign(config_.self_attention_layers * s, Matrix<T>::Zero(capacity, d));
  cache.encoder_values = cache.encoder_keys;
  cache.self_keys.assign(config_.cross_attention_layers * s, Matrix<T>::Zero(capacity, d));
  cache.self_values = cache.self_keys;
  cache.cross_keys = cache.self_keys;
  cache.cross_values = cache.self_keys;
  return cache;
}

template <typename T>
ModelOutput<T> VapNet<T>::forward(const ChannelMatrices<T>& inputs, InferenceCache<T>& cache, Exec exec) const {
  return run(inputs, cache, nullptr, DropoutPlan{}, exec);
}

template <typename T>
ModelOutput<T> VapNet<T>::forward(const ChannelMatrices<T>& inputs, Exec exec) const {
  const int n = inputs.empty() ? 0 : static_cast<int>(inputs.front().rows());
  InferenceCache<T> cache = make_cache(n);
  return run(inputs, cache, nullptr, DropoutPlan{}, exec);
}

template <typename T>
ModelOutput<T> VapNet<T>::forward_train(const ChannelMatrices<T>& inputs, ForwardTape<T>& tape,
                                        const DropoutPlan& dropout, Exec exec) const {
  const int n = inputs.empty() ? 0 : static_cast<int>(inputs.front().rows());
  // Tapes are reused across steps to keep their large buffers allocated.
  if (tape.cache.capacity != n || tape.cache.cross_keys.size() != make_cache(0).cross_keys.size())
    tape.cache = make_cache(n);
  tape.cache.length = 0;
  return run(inputs, tape.cache, &tape, dropout, exec);
}

template <typename T>
ModelOutput<T> VapNet<T>::run(const ChannelMatrices<T>& inputs, InferenceCache<T>& cache, ForwardTape<T>* tape,
                              const DropoutPlan& dropout, Exec exec) const {
  const int speakers = config_.speaker_count;
  const int d = config_.d_model;
  if (static_cast<int>(inputs.size()) != speakers)
    throw ConfigError("expected " + std::to_string(speakers) + " input channels, got " + std::to_string(inputs.size()));
  const int n = static_cast<int>(inputs.front().rows());
  const int offset = cache.length;
  for (const auto& x : inputs) {
    if (x.rows() != n) throw ConfigError("input channels differ in frame count");
    if (x.cols() != config_.mel_bins) throw ConfigError("input feature width does not match mel_bins");
    if (!x.allFinite()) throw ConfigError("non-finite input features");
  }
  if (offset + n > config_.context_frames)
    throw RangeError("context of " + std::to_string(offset + n) + " frames exceeds the model's " +
                     std::to_string(config_.context_frames));
  if (offset + n > cache.capacity) throw RangeError("inference cache capacity exceeded");
  if (tape && offset != 0) throw ConfigError("training forward must start from an empty cache");

  std::mt19937_64 rng(dropout.seed);
  const BlockContext ctx{config_.attention_heads, offset, config_.dropout,
                         dropout.enabled && config_.dropout > 0.0 ? &rng : nullptr, exec};

  if (tape) {
    tape->inputs = inputs;
    auto shape = [&](auto& v, int layers) {
      v.resize(layers);
      for (auto& per_layer : v) per_layer.resize(speakers);
    };
    shape(tape->encoder_attention, config_.self_attention_layers);
    shape(tape->encoder_ffn, config_.self_attention_layers);
    shape(tape->cross_self, config_.cross_attention_layers);
    shape(tape->cross_cross, config_.cross_attention_layers);
    shape(tape->cross_ffn, config_.cross_attention_layers);
    tape->final_norm.resize(speakers);
  }

  const Matrix<T> pe = positional_encoding<T>(offset, n, d);
  ChannelMatrices<T> x(speakers);
  for (int c = 0; c < speakers; ++c) x[c] = linear(inputs[c], params_.input) + pe;

  for (int l = 0; l < config_.self_attention_layers; ++l) {
    const auto& p = params_.encoder[l];
    for (int c = 0; c < speakers; ++c) {
      const int slot = l * speakers + c;
      x[c] += self_attention_block(x[c], p.attention_norm, p.attention, cache.encoder_keys[slot],
                                   cache.encoder_values[slot], ctx,
                                   tape ? &tape->encoder_attention[l][c] : nullptr);
      x[c] += feed_forward_block(x[c], p.ffn_norm, p.ffn, ctx, tape ? &tape->encoder_ffn[l][c] : nullptr);
    }
  }

  for (int l = 0; l < config_.cross_attention_layers; ++l) {
    const auto& p = params_.cross[l];
    for (int c = 0; c < speakers; ++c) {
      const int slot = l * speakers + c;
      x[c] += self_attention_block(x[c], p.self_norm, p.self_attention, cache.self_keys[slot],
                                   cache.self_values[slot], ctx, tape ? &tape->cross_self[l][c] : nullptr);
    }
    // Cross-attention: each channel queries the other channels' streams.
    std::vector<Matrix<T>> normed(speakers), queries(speakers);
    std::vector<NormTape<T>> norm_tapes(speakers);
    for (int c = 0; c < speakers; ++c) {
      const int slot = l * speakers + c;
      normed[c] = layer_norm(x[c], p.cross_norm, tape ? &norm_tapes[c] : nullptr);
      queries[c] = linear(normed[c], p.cross_attention.query);
      cache.cross_keys[slot].middleRows(offset, n) = linear(normed[c], p.cross_attention.key);
      cache.cross_values[slot].middleRows(offset, n) = linear(normed[c], p.cross_attention.value);
    }
    std::vector<Matrix<T>> branch(speakers);
    for (int c = 0; c < speakers; ++c) {
      std::vector<kernels::KeyValue<T>> streams;
      for (int a = 0; a < speakers; ++a)
        if (a != c) streams.push_back({&cache.cross_keys[l * speakers + a], &cache.cross_values[l * speakers + a]});
      AttentionBlockTape<T>* bt = tape ? &tape->cross_cross[l][c] : nullptr;
      Matrix<T> attended;
      kernels::causal_attention<T>(queries[c], streams, config_.attention_heads, offset, attended,
                                   bt ? &bt->probs : nullptr, exec);
      branch[c] = linear(attended, p.cross_attention.output);
      if (ctx.rng && ctx.dropout > 0.0) {
        Matrix<T> mask = dropout_mask<T>(branch[c].rows(), branch[c].cols(), ctx.dropout, *ctx.rng);
        branch[c].array() *= mask.array();
        if (bt) bt->dropout = std::move(mask);
      } else if (bt) {
        bt->dropout.resize(0, 0);
      }
      if (bt) {
        bt->norm = std::move(norm_tapes[c]);
        bt->normed = normed[c];
        bt->queries = queries[c];
        bt->attended = std::move(attended);
      }
    }
    for (int c = 0; c < speakers; ++c) {
      x[c] += branch[c];
      x[c] += feed_forward_block(x[c], p.ffn_norm, p.ffn, ctx, tape ? &tape->cross_ffn[l][c] : nullptr);
    }
  }

  ChannelMatrices<T> z(speakers);
  for (int c = 0; c < speakers; ++c) z[c] = layer_norm(x[c], params_.final_norm, tape ? &tape->final_norm[c] : nullptr);

  // Heads on the per-frame concatenation [z_0 | z_1 | z_2].
  ModelOutput<T> out;
  out.vad_logits.resize(n, speakers);
  for (int c = 0; c < speakers; ++c) {
    Matrix<T> others = Matrix<T>::Zero(n, d);
    bool first = true;
    for (int a = 0; a < speakers; ++a) {
      if (a == c) continue;
      others = first ? z[a] : Matrix<T>(others + z[a]);
      first = false;
    }
    out.vad_logits.col(c) = z[c] * params_.vad_self + others * params_.vad_other;
    out.vad_logits.col(c).array() += params_.vad_bias(0, 0);
  }

  std::vector<Matrix<T>> contrib(speakers);
  for (int c = 0; c < speakers; ++c) {
    contrib[c].noalias() = z[c] * params_.vap_weight.transpose();
    contrib[c].rowwise() += params_.vap_bias.row(0);
  }
  const int states = layout_.states();
  out.vap_logits.resize(n, states);
  std::array<T, kMaxSpeakers> terms{};
  for (int t = 0; t < n; ++t)
    for (int state = 0; state < states; ++state) {
      for (int c = 0; c < speakers; ++c) terms[c] = contrib[c](t, layout_.block(static_cast<StateIndex>(state), c));
      std::sort(terms.begin(), terms.begin() + speakers);
      T sum = terms[0];
      for (int c = 1; c < speakers; ++c) sum += terms[c];
      out.vap_logits(t, state) = sum;
    }

  if (tape) tape->final_out = std::move(z);
  cache.length = offset + n;
  return out;
}

template <typename T>
void VapNet<T>::backward(const ForwardTape<T>& tape, const ModelOutput<T>& grad, NetParams<T>& g, Exec exec) const {
  const int speakers = config_.speaker_count;
  const int d = config_.d_model;
  const int heads = config_.attention_heads;
  const int n = static_cast<int>(tape.inputs.front().rows());
  const auto& z = tape.final_out;
  if (grad.vap_logits.rows() != n || grad.vad_logits.rows() != n) throw ConfigError("gradient frame count mismatch");

  // Heads.
  ChannelMatrices<T> dz(speakers, Matrix<T>::Zero(n, d));
  for (int c = 0; c < speakers; ++c) {
    Matrix<T> others = Matrix<T>::Zero(n, d);
    for (int a = 0; a < speakers; ++a)
      if (a != c) others += z[a];
    const auto dv = grad.vad_logits.col(c);
    g.vad_self.noalias() += z[c].transpose() * dv;
    g.vad_other.noalias() += others.transpose() * dv;
    g.vad_bias(0, 0) += dv.sum();
    dz[c].noalias() += dv * params_.vad_self.transpose();
    for (int a = 0; a < speakers; ++a)
      if (a != c) dz[a].noalias() += dv * params_.vad_other.transpose();
  }
  const int states = layout_.states();
  for (int c = 0; c < speakers; ++c) {
    Matrix<T> dcontrib = Matrix<T>::Zero(n, layout_.blocks());
    for (int t = 0; t < n; ++t)
      for (int state = 0; state < states; ++state)
        dcontrib(t, layout_.block(static_cast<StateIndex>(state), c)) += grad.vap_logits(t, state);
    g.vap_weight.noalias() += dcontrib.transpose() * z[c];
    g.vap_bias += dcontrib.colwise().sum();
    dz[c].noalias() += dcontrib * params_.vap_weight;
  }

  ChannelMatrices<T> dx(speakers);
  for (int c = 0; c < speakers; ++c) dx[c] = layer_norm_backward(dz[c], params_.final_norm, tape.final_norm[c], g.final_norm);

  // Multi-channel layers, last to first.
  for (int l = config_.cross_attention_layers - 1; l >= 0; --l) {
    const auto& p = params_.cross[l];
    auto& gp = g.cross[l];
    for (int c = 0; c < speakers; ++c)
      dx[c] += feed_forward_backward(dx[c], p.ffn_norm, p.ffn, tape.cross_ffn[l][c], gp.ffn_norm, gp.ffn);

    // Cross-attention.
    ChannelMatrices<T> dkeys(speakers, Matrix<T>::Zero(n, d)), dvalues(speakers, Matrix<T>::Zero(n, d));
    ChannelMatrices<T> dqueries(speakers);
    for (int c = 0; c < speakers; ++c) {
      const auto& bt = tape.cross_cross[l][c];
      const Matrix<T> dattended = attention_output_backward(dx[c], p.cross_attention, bt, gp.cross_attention);
      std::vector<kernels::KeyValue<T>> streams;
      std::vector<Matrix<T>*> dk, dv;
      for (int a = 0; a < speakers; ++a) {
        if (a == c) continue;
        streams.push_back({&tape.cache.cross_keys[l * speakers + a], &tape.cache.cross_values[l * speakers + a]});
        dk.push_back(&dkeys[a]);
        dv.push_back(&dvalues[a]);
      }
      kernels::causal_attention_backward<T>(bt.queries, streams, heads, bt.attended, dattended, bt.probs,
                                            dqueries[c], dk, dv, exec);
    }
    for (int c = 0; c < speakers; ++c) {
      const auto& bt = tape.cross_cross[l][c];
      Matrix<T> dnormed = Matrix<T>::Zero(n, d);
      linear_backward(bt.normed, dqueries[c], p.cross_attention.query, gp.cross_attention.query, dnormed);
      linear_backward(bt.normed, dkeys[c], p.cross_attention.key, gp.cross_attention.key, dnormed);
      linear_backward(bt.normed, dvalues[c], p.cross_attention.value, gp.cross_attention.value, dnormed);
      dx[c] += layer_norm_backward(dnormed, p.cross_norm, bt.norm, gp.cross_norm);
    }

    // Channel-wise self-attention.
    for (int c = 0; c < speakers; ++c) {
      const auto& bt = tape.cross_self[l][c];
      const int slot = l * speakers + c;
      const Matrix<T> dattended = attention_output_backward(dx[c], p.self_attention, bt, gp.self_attention);
      Matrix<T> dq, dk = Matrix<T>::Zero(n, d), dv = Matrix<T>::Zero(n, d);
      const kernels::KeyValue<T> stream{&tape.cache.self_keys[slot], &tape.cache.self_values[slot]};
      Matrix<T>* dkp = &dk;
      Matrix<T>* dvp = &dv;
      kernels::causal_attention_backward<T>(bt.queries, std::span(&stream, 1), heads, bt.attended, dattended,
                                            bt.probs, dq, std::span(&dkp, 1), std::span(&dvp, 1), exec);
      Matrix<T> dnormed = Matrix<T>::Zero(n, d);
      linear_backward(bt.normed, dq, p.self_attention.query, gp.self_attention.query, dnormed);
      linear_backward(bt.normed, dk, p.self_attention.key, gp.self_attention.key, dnormed);
      linear_backward(bt.normed, dv, p.self_attention.value, gp.self_attention.value, dnormed);
      dx[c] += layer_norm_backward(dnormed, p.self_norm, bt.norm, gp.self_norm);
    }
  }

  for (int l = config_.self_attention_layers - 1; l >= 0; --l) {
    const auto& p = params_.encoder[l];
    auto& gp = g.encoder[l];
    for (int c = 0; c < speakers; ++c) {
      dx[c] += feed_forward_backward(dx[c], p.ffn_norm, p.ffn, tape.encoder_ffn[l][c], gp.ffn_norm, gp.ffn);
      const auto& bt = tape.encoder_attention[l][c];
      const int slot = l * speakers + c;
      const Matrix<T> dattended = attention_output_backward(dx[c], p.attention, bt, gp.attention);
      Matrix<T> dq, dk = Matrix<T>::Zero(n, d), dv = Matrix<T>::Zero(n, d);
      const kernels::KeyValue<T> stream{&tape.cache.encoder_keys[slot], &tape.cache.encoder_values[slot]};
      Matrix<T>* dkp = &dk;
      Matrix<T>* dvp = &dv;
      kernels::causal_attention_backward<T>(bt.queries, std::span(&stream, 1), heads, bt.attended, dattended,
                                            bt.probs, dq, std::span(&dkp, 1), std::span(&dvp, 1), exec);
      Matrix<T> dnormed = Matrix<T>::Zero(n, d);
      linear_backward(bt.normed, dq, p.attention.query, gp.attention.query, dnormed);
      linear_backward(bt.normed, dk, p.attention.key, gp.attention.key, dnormed);
      linear_backward(bt.normed, dv, p.attention.value, gp.attention.value, dnormed);
      dx[c] += layer_norm_backward(dnormed, p.attention_norm, bt.norm, gp.attention_norm);
    }
  }

  for (int c = 0; c < speakers; ++c) {
    g.input.weight.noalias() += tape.inputs[c].transpose() * dx[c];
    g.input.bias += dx[c].colwise().sum();
  }
}

template struct NetParams<float>;
template struct NetParams<double>;
template class VapNet<float>;
template class VapNet<double>;
template Matrix<float> positional_encoding<float>(int, int, int);
template Matrix<double> positional_encoding<double>(int, int, int);

}  // namespace vap
