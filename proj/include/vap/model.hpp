#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "vap/features.hpp"
#include "vap/net.hpp"
#include "vap/projection.hpp"

namespace vap {

void to_json(nlohmann::json& j, const ProjectionConfig& c);
void from_json(const nlohmann::json& j, ProjectionConfig& c);

/// Model output for one frame.
struct PredictionFrame {
  std::vector<float> state_probs;  // softmax over 2^(S*B) states
  std::vector<double> p_future;    // expected activity over the horizon, per speaker
  std::vector<double> p_now;       // sigmoid of the VAD logits
};

struct CheckpointMetadata {
  int epoch = -1;
  double validation_loss = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();
};

/// A trained network with everything needed to run it on raw audio.
class VapModel {
 public:
  VapModel(ModelConfig model, ProjectionConfig projection, FeatureConfig features, FeatureNormalizer normalizer,
           VapNet<float> net, CheckpointMetadata metadata = {});

  const ModelConfig& model_config() const { return net_.config(); }
  const ProjectionConfig& projection() const { return projection_; }
  const FeatureConfig& feature_config() const { return features_; }
  const FeatureNormalizer& normalizer() const { return normalizer_; }
  const CheckpointMetadata& metadata() const { return metadata_; }
  CheckpointMetadata& metadata() { return metadata_; }
  const VapNet<float>& net() const { return net_; }
  VapNet<float>& net() { return net_; }
  const ProjectionCodec& codec() const { return codec_; }

  Features normalize(const Features& raw) const;

  /// Per-frame predictions from raw model outputs.
  std::vector<PredictionFrame> to_predictions(const ModelOutput<float>& out) const;
  PredictionFrame to_prediction(const ModelOutput<float>& out, Eigen::Index row) const;

  /// Features, forward and predictions for one audio window of at most context_frames.
  std::vector<PredictionFrame> predict(const std::vector<std::vector<std::int16_t>>& audio,
                                       Exec exec = Exec::parallel) const;

 private:
  ProjectionConfig projection_;
  FeatureConfig features_;
  FeatureNormalizer normalizer_;
  VapNet<float> net_;
  CheckpointMetadata metadata_;
  ProjectionCodec codec_;
};

// Checkpoint file, all integers little-endian:
//   magic "VAPCKPT\0" (8 bytes)
//   u32 format version
//   u32 header length, then UTF-8 JSON header (configs, layout version, metadata)
//   u32 tensor count, then per tensor:
//     u16 name length, name bytes, u32 rows, u32 cols, rows*cols f32 (row-major)
//   u32 CRC-32 (zlib) of every preceding byte
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const VapModel& model, const std::filesystem::path& path);
VapModel load_checkpoint(const std::filesystem::path& path);

std::string serialize_checkpoint(const VapModel& model);
VapModel deserialize_checkpoint(const std::string& bytes);

}  // namespace vap
