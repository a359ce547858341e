#include "vap/model.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "vap/error.hpp"

namespace vap {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void to_json(nlohmann::json& j, const ProjectionConfig& c) {
  j = {{"speaker_count", c.speaker_count}, {"bin_durations", c.bin_durations}, {"frame_rate", c.frame_rate}};
}

void from_json(const nlohmann::json& j, ProjectionConfig& c) {
  j.at("speaker_count").get_to(c.speaker_count);
  j.at("bin_durations").get_to(c.bin_durations);
  j.at("frame_rate").get_to(c.frame_rate);
}

VapModel::VapModel(ModelConfig model, ProjectionConfig projection, FeatureConfig features,
                   FeatureNormalizer normalizer, VapNet<float> net, CheckpointMetadata metadata)
    : projection_(std::move(projection)),
      features_(features),
      normalizer_(std::move(normalizer)),
      net_(std::move(net)),
      metadata_(std::move(metadata)),
      codec_(projection_) {
  features_.validate();
  model.validate(projection_);
  if (!(model == net_.config())) throw ConfigError("model config does not match the network");
  if (model.mel_bins != features_.mel_bins) throw ConfigError("model mel_bins differs from the feature config");
  if (normalizer_.mean.size() != static_cast<std::size_t>(features_.mel_bins) ||
      normalizer_.stddev.size() != normalizer_.mean.size())
    throw ConfigError("normalizer width differs from mel_bins");
  if (std::abs(1.0 / features_.hop - projection_.frame_rate) > 1e-9)
    throw ConfigError("feature hop does not match the projection frame rate");
}

Features VapModel::normalize(const Features& raw) const {
  Features out;
  out.reserve(raw.size());
  for (const auto& ch : raw) out.push_back(normalizer_.apply(ch));
  return out;
}

PredictionFrame VapModel::to_prediction(const ModelOutput<float>& out, Eigen::Index row) const {
  const auto logits = out.vap_logits.row(row);
  const int states = static_cast<int>(logits.cols());
  std::vector<double> dist(states);
  const double peak = static_cast<double>(logits.maxCoeff());
  double total = 0.0;
  for (int k = 0; k < states; ++k) total += (dist[k] = std::exp(static_cast<double>(logits(k)) - peak));
  PredictionFrame frame;
  frame.state_probs.resize(states);
  for (int k = 0; k < states; ++k) {
    dist[k] /= total;
    frame.state_probs[k] = static_cast<float>(dist[k]);
  }
  frame.p_future = codec_.speaker_future_probability(std::span<const double>(dist));
  for (Eigen::Index s = 0; s < out.vad_logits.cols(); ++s)
    frame.p_now.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(out.vad_logits(row, s)))));
  return frame;
}

std::vector<PredictionFrame> VapModel::to_predictions(const ModelOutput<float>& out) const {
  std::vector<PredictionFrame> frames;
  frames.reserve(out.vap_logits.rows());
  for (Eigen::Index r = 0; r < out.vap_logits.rows(); ++r) frames.push_back(to_prediction(out, r));
  return frames;
}

std::vector<PredictionFrame> VapModel::predict(const std::vector<std::vector<std::int16_t>>& audio, Exec exec) const {
  const LogMelExtractor extractor(features_);
  const Features feats = normalize(extract_features(audio, extractor, exec));
  return to_predictions(net_.forward(feats, exec));
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kMagic[8] = {'V', 'A', 'P', 'C', 'K', 'P', 'T', '\0'};

template <typename U>
void put(std::string& out, U value) {
  char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  out.append(bytes, sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}

  template <typename U>
  U get() {
    U value;
    std::memcpy(&value, take(sizeof(U)), sizeof(U));
    return value;
  }

  const char* take(std::size_t n) {
    if (n > limit_ - pos_) throw ParseError("checkpoint truncated");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t position() const { return pos_; }

 private:
  const std::string& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1U << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::string serialize_checkpoint(const VapModel& model) {
  nlohmann::json header;
  header["model_config"] = model.model_config();
  header["projection_config"] = model.projection();
  header["state_layout_version"] = kStateLayoutVersion;
  header["feature_config"] = model.feature_config();
  const auto& meta = model.metadata();
  header["metadata"] = {{"epoch", meta.epoch},
                        {"validation_loss", std::isfinite(meta.validation_loss) ? nlohmann::json(meta.validation_loss)
                                                                                : nlohmann::json(nullptr)},
                        {"seed", meta.seed},
                        {"extra", meta.extra}};
  const std::string text = header.dump();

  std::vector<std::pair<std::string, Matrix<float>>> tensors;
  const int mel = model.feature_config().mel_bins;
  tensors.emplace_back("normalizer.mean", Eigen::Map<const Matrix<float>>(model.normalizer().mean.data(), 1, mel));
  tensors.emplace_back("normalizer.stddev",
                       Eigen::Map<const Matrix<float>>(model.normalizer().stddev.data(), 1, mel));
  for (const auto& [name, m] : model.net().params().named()) tensors.emplace_back(name, *m);

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(float));
  }
  put<std::uint32_t>(out, crc32_of(out.data(), out.size()));
  return out;
}

VapModel deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw ParseError("not a VAP checkpoint (bad magic)");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + body, 4);
  Reader in(bytes, body);
  in.take(sizeof(kMagic));
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint format version " + std::to_string(version) + " (expected " +
                     std::to_string(kCheckpointVersion) + ")");
  if (crc32_of(bytes.data(), body) != stored_crc) throw ParseError("checkpoint checksum mismatch (corrupt file)");

  const auto header_len = in.get<std::uint32_t>();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(std::string(in.take(header_len), header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  const int layout = header.value("state_layout_version", -1);
  if (layout != kStateLayoutVersion)
    throw ConfigError("checkpoint uses state bit-layout version " + std::to_string(layout) + ", this build uses " +
                      std::to_string(kStateLayoutVersion));

  ModelConfig model_config;
  ProjectionConfig projection;
  FeatureConfig features;
  CheckpointMetadata meta;
  try {
    header.at("model_config").get_to(model_config);
    header.at("projection_config").get_to(projection);
    header.at("feature_config").get_to(features);
    const auto& m = header.at("metadata");
    meta.epoch = m.value("epoch", -1);
    if (m.contains("validation_loss") && !m.at("validation_loss").is_null())
      meta.validation_loss = m.at("validation_loss").get<double>();
    meta.seed = m.value("seed", std::uint64_t{0});
    if (m.contains("extra")) meta.extra = m.at("extra");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  model_config.validate(projection);

  std::map<std::string, Matrix<float>> tensors;
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = in.get<std::uint16_t>();
    std::string name(in.take(name_len), name_len);
    const auto rows = in.get<std::uint32_t>();
    const auto cols = in.get<std::uint32_t>();
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    Matrix<float> m(rows, cols);
    std::memcpy(m.data(), in.take(n * sizeof(float)), n * sizeof(float));
    if (!tensors.emplace(std::move(name), std::move(m)).second) throw ParseError("duplicate checkpoint tensor");
  }
  if (in.position() != body) throw ParseError("trailing bytes in checkpoint");

  // Shapes come from a freshly built net; every tensor must be present with that shape.
  VapNet<float> net(model_config, 0);
  NetParams<float> params = net.params();
  auto fetch = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ParseError("checkpoint is missing tensor '" + name + "'");
    if (it->second.rows() != rows || it->second.cols() != cols)
      throw ParseError("tensor '" + name + "' has shape " + std::to_string(it->second.rows()) + "x" +
                       std::to_string(it->second.cols()) + ", expected " + std::to_string(rows) + "x" +
                       std::to_string(cols));
    Matrix<float> m = std::move(it->second);
    tensors.erase(it);
    return m;
  };
  for (auto& [name, m] : params.named()) *m = fetch(name, m->rows(), m->cols());
  FeatureNormalizer normalizer;
  const Matrix<float> mean = fetch("normalizer.mean", 1, features.mel_bins);
  const Matrix<float> stddev = fetch("normalizer.stddev", 1, features.mel_bins);
  normalizer.mean.assign(mean.data(), mean.data() + mean.size());
  normalizer.stddev.assign(stddev.data(), stddev.data() + stddev.size());
  if (!tensors.empty()) throw ParseError("checkpoint has unexpected tensor '" + tensors.begin()->first + "'");

  return VapModel(model_config, projection, features, std::move(normalizer),
                  VapNet<float>(model_config, std::move(params)), std::move(meta));
}

void save_checkpoint(const VapModel& model, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(model);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

VapModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return deserialize_checkpoint(buffer.str());
}

}  // namespace vap
