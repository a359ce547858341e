#pragma once

#include <cstdint>
#include <functional>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "vap/corpus.hpp"
#include "vap/features.hpp"
#include "vap/model.hpp"
#include "vap/net.hpp"

namespace vap {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 8;
  double learning_rate = 3.64e-4;
  double weight_decay = 0.001;
  double vad_loss_weight = 1.0;
  std::uint64_t seed = 0;
  double gradient_clip = 1.0;  // global-norm clip; 0 disables
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct LossValue {
  double total = 0.0;
  double vap = 0.0;
  double vad = 0.0;
};

/// vap = mean CE of softmax(vap_logits) against the labels; vad = mean BCE of
/// sigmoid(vad_logits) over frames and speakers; total = vap + lambda * vad.
/// When `grad` is given it receives d(total)/d(logits).
template <typename T>
LossValue compute_loss(const ModelOutput<T>& out, std::span<const StateIndex> labels, const FrameGrid& vad_targets,
                       double vad_weight, ModelOutput<T>* grad = nullptr);

/// One training/validation example: normalized features and frame targets.
struct Example {
  Features features;  // S x [frames x mel]
  std::vector<StateIndex> labels;
  FrameGrid vad_targets;
  std::string session_id;
  double start_time = 0.0;
};

/// Raw (unnormalized) examples at the same window starts as make_windows.
/// Features are extracted once over the whole session and sliced, so a window's
/// first frames see the audio just before it, as they do when streaming.
std::vector<Example> session_examples(const SessionRecord& session, const Features& session_features,
                                      const ProjectionConfig& projection, double hop_seconds = kWindowSeconds);

void normalize_examples(std::vector<Example>& examples, const FeatureNormalizer& normalizer);

struct PreparedData {
  std::vector<Example> train;
  std::vector<Example> validation;
  FeatureNormalizer normalizer;  // fitted on the training examples only
};

/// Loads the split's training and validation sessions one at a time, extracts
/// session-wide features, cuts windows and normalizes them.
PreparedData prepare_training_data(const Manifest& manifest, const DatasetSplit& split,
                                   const ProjectionConfig& projection, const FeatureConfig& features,
                                   double hop_seconds = kWindowSeconds, Exec exec = Exec::parallel);

/// Mean loss over examples (no dropout), examples in parallel.
LossValue evaluate_loss(const VapNet<float>& net, std::span<const Example> examples, double vad_weight,
                        Exec exec = Exec::parallel);

/// Decoupled-weight-decay Adam.
class AdamW {
 public:
  AdamW(const NetParams<float>& like, const TrainConfig& config);

  /// p <- p - lr*wd*p, then the Adam update with bias correction.
  void step(NetParams<float>& params, const NetParams<float>& grads);
  long steps() const { return steps_; }

 private:
  TrainConfig config_;
  NetParams<float> m_;
  NetParams<float> v_;
  long steps_ = 0;
};

double global_norm(const NetParams<float>& grads);
/// Scales grads to norm `max_norm` when larger; returns the pre-clip norm.
double clip_global_norm(NetParams<float>& grads, double max_norm);

/// Owns the optimizer state for one network. With Exec::parallel the windows of
/// a batch run on separate OpenMP threads; gradients are reduced in batch order
/// either way, so both modes give bit-identical updates.
class Trainer {
 public:
  Trainer(VapNet<float>& net, TrainConfig config, Exec exec = Exec::parallel);

  /// One optimizer step on `batch`; returns the batch's mean training loss.
  LossValue step(std::span<const Example* const> batch, std::uint64_t dropout_seed, bool dropout = true);

  /// Mean loss over `examples` without dropout.
  LossValue evaluate(std::span<const Example> examples) const;

  const AdamW& optimizer() const { return optimizer_; }

 private:
  VapNet<float>& net_;
  TrainConfig config_;
  Exec exec_;
  AdamW optimizer_;
  std::vector<NetParams<float>> window_grads_;
  std::vector<ForwardTape<float>> tapes_;
};

struct EpochRecord {
  int epoch = 0;
  LossValue train;
  LossValue validation;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_loss = 0.0;
  long steps = 0;
  double wall_seconds = 0.0;
};

/// Timing fields are left out when `with_timing` is false, which makes the
/// report comparable across runs.
nlohmann::json report_json(const TrainReport& report, bool with_timing = true);

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  VapModel model;  // parameters from best_epoch
  TrainReport report;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Full recipe: per-epoch seeded shuffle, AdamW steps, validation after every
/// epoch, best-validation parameters returned. Examples must be normalized
/// with `normalizer`.
TrainResult train(const std::vector<Example>& train_set, const std::vector<Example>& validation_set,
                  const ModelConfig& model_config, const ProjectionConfig& projection,
                  const FeatureConfig& features, const FeatureNormalizer& normalizer, const TrainConfig& config,
                  Exec exec = Exec::parallel, const EpochCallback& on_epoch = {});

}  // namespace vap
