#include "vap/train.hpp"

#include <omp.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <iterator>
#include <cmath>
#include <numeric>
#include <random>

#include "vap/error.hpp"

namespace vap {

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void add_scaled(NetParams<float>& dst, const NetParams<float>& src, float scale) {
  auto d = dst.named();
  const auto s = src.named();
  for (std::size_t i = 0; i < d.size(); ++i) *d[i].second += scale * *s[i].second;
}

bool finite(const LossValue& l) { return std::isfinite(l.total) && std::isfinite(l.vap) && std::isfinite(l.vad); }

}  // namespace

void TrainConfig::validate() const {
  if (epochs <= 0) throw ConfigError("epochs must be positive");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(vad_loss_weight >= 0.0)) throw ConfigError("vad_loss_weight must be non-negative");
  if (!(gradient_clip >= 0.0)) throw ConfigError("gradient_clip must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"vad_loss_weight", c.vad_loss_weight},
       {"seed", c.seed},
       {"gradient_clip", c.gradient_clip},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"epsilon", c.epsilon}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("learning_rate", c.learning_rate);
  get("weight_decay", c.weight_decay);
  get("vad_loss_weight", c.vad_loss_weight);
  get("seed", c.seed);
  get("gradient_clip", c.gradient_clip);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("epsilon", c.epsilon);
}

template <typename T>
LossValue compute_loss(const ModelOutput<T>& out, std::span<const StateIndex> labels, const FrameGrid& vad_targets,
                       double vad_weight, ModelOutput<T>* grad) {
  const Eigen::Index n = out.vap_logits.rows();
  const Eigen::Index states = out.vap_logits.cols();
  const Eigen::Index speakers = out.vad_logits.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n || out.vad_logits.rows() != n ||
      vad_targets.frame_count() != n || vad_targets.speaker_count() != speakers)
    throw ConfigError("loss inputs are not aligned: " + std::to_string(n) + " frames of logits, " +
                      std::to_string(labels.size()) + " labels, " + std::to_string(vad_targets.frame_count()) +
                      " target frames");
  if (n == 0) throw ConfigError("loss over zero frames");
  if (grad) {
    grad->vap_logits.resize(n, states);
    grad->vad_logits.resize(n, speakers);
  }

  double vap = 0.0;
  std::vector<double> e(states);
  for (Eigen::Index t = 0; t < n; ++t) {
    const StateIndex label = labels[t];
    if (label >= states) throw RangeError("label " + std::to_string(label) + " outside the state space");
    const auto row = out.vap_logits.row(t);
    const double peak = static_cast<double>(row.maxCoeff());
    double total = 0.0;
    for (Eigen::Index k = 0; k < states; ++k) total += (e[k] = std::exp(static_cast<double>(row(k)) - peak));
    vap += peak + std::log(total) - static_cast<double>(row(label));
    if (grad)
      for (Eigen::Index k = 0; k < states; ++k)
        grad->vap_logits(t, k) = static_cast<T>((e[k] / total - (k == label ? 1.0 : 0.0)) / n);
  }

  double vad = 0.0;
  const double count = static_cast<double>(n * speakers);
  for (Eigen::Index s = 0; s < speakers; ++s)
    for (Eigen::Index t = 0; t < n; ++t) {
      const double x = static_cast<double>(out.vad_logits(t, s));
      const double y = vad_targets.active(static_cast<int>(s), static_cast<int>(t)) ? 1.0 : 0.0;
      vad += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
      if (grad) grad->vad_logits(t, s) = static_cast<T>(vad_weight * (1.0 / (1.0 + std::exp(-x)) - y) / count);
    }

  LossValue loss;
  loss.vap = vap / static_cast<double>(n);
  loss.vad = vad / count;
  loss.total = loss.vap + vad_weight * loss.vad;
  return loss;
}

template LossValue compute_loss<float>(const ModelOutput<float>&, std::span<const StateIndex>, const FrameGrid&,
                                       double, ModelOutput<float>*);
template LossValue compute_loss<double>(const ModelOutput<double>&, std::span<const StateIndex>, const FrameGrid&,
                                        double, ModelOutput<double>*);

std::vector<Example> session_examples(const SessionRecord& session, const Features& session_features,
                                      const ProjectionConfig& projection, double hop_seconds) {
  projection.validate();
  const double rate = projection.frame_rate;
  const long hop_frames = std::lround(hop_seconds * rate);
  if (hop_frames <= 0 || std::abs(hop_frames / rate - hop_seconds) > 1e-9)
    throw ConfigError("window hop must be a positive whole number of frames");
  const int count = window_count(session.track.duration(), hop_seconds, projection);
  if (count == 0) {
    spdlog::warn("session {} is {:.2f} s long, shorter than one window plus horizon; skipped", session.session_id,
                 session.track.duration());
    return {};
  }
  if (static_cast<int>(session_features.size()) != session.speaker_count())
    throw ConfigError("session features and audio differ in channel count");
  const FrameGrid grid = rasterize(session.track, rate);
  std::vector<Example> out;
  for (int k = 0; k < count; ++k) {
    const int first = static_cast<int>(k * hop_frames);
    Example ex;
    ex.session_id = session.session_id;
    ex.start_time = first / rate;
    for (const auto& ch : session_features) {
      if (ch.rows() < first + kWindowFrames) throw RangeError("session features shorter than its windows");
      ex.features.push_back(ch.middleRows(first, kWindowFrames));
    }
    ex.labels = label_window(grid, first, first + kWindowFrames - 1, projection);
    ex.vad_targets = grid.slice(first, kWindowFrames);
    out.push_back(std::move(ex));
  }
  return out;
}

void normalize_examples(std::vector<Example>& examples, const FeatureNormalizer& normalizer) {
  for (auto& ex : examples)
    for (auto& ch : ex.features) ch = normalizer.apply(ch);
}

// ---------------------------------------------------------------------------
// Optimizer

PreparedData prepare_training_data(const Manifest& manifest, const DatasetSplit& split,
                                   const ProjectionConfig& projection, const FeatureConfig& features,
                                   double hop_seconds, Exec exec) {
  const LogMelExtractor extractor(features);
  auto load = [&](const std::vector<std::string>& ids) {
    std::vector<Example> out;
    for (const auto& id : ids) {
      const SessionRecord session = load_manifest_session(manifest, manifest.find(id));
      const Features session_features = extract_features(session.audio, extractor, exec);
      auto ex = session_examples(session, session_features, projection, hop_seconds);
      std::move(ex.begin(), ex.end(), std::back_inserter(out));
    }
    return out;
  };
  PreparedData data;
  data.train = load(split.train);
  data.validation = load(split.validation);
  if (data.train.empty()) throw ConfigError("training split yields no windows");
  std::vector<const Features*> items;
  for (const auto& ex : data.train) items.push_back(&ex.features);
  data.normalizer = FeatureNormalizer::fit(items);
  normalize_examples(data.train, data.normalizer);
  normalize_examples(data.validation, data.normalizer);
  spdlog::info("prepared {} training and {} validation windows", data.train.size(), data.validation.size());
  return data;
}

AdamW::AdamW(const NetParams<float>& like, const TrainConfig& config)
    : config_(config), m_(like.zeros_like()), v_(like.zeros_like()) {
  config_.validate();
}

void AdamW::step(NetParams<float>& params, const NetParams<float>& grads) {
  ++steps_;
  const double lr = config_.learning_rate;
  const float decay = static_cast<float>(1.0 - lr * config_.weight_decay);
  const float b1 = static_cast<float>(config_.beta1);
  const float b2 = static_cast<float>(config_.beta2);
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  const float step_size = static_cast<float>(lr / c1);
  const float root_c2 = static_cast<float>(std::sqrt(c2));
  const float eps = static_cast<float>(config_.epsilon);

  auto p = params.named();
  const auto g = grads.named();
  auto m = m_.named();
  auto v = v_.named();
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto pa = p[i].second->array();
    const auto ga = g[i].second->array();
    auto ma = m[i].second->array();
    auto va = v[i].second->array();
    ma = b1 * ma + (1.0f - b1) * ga;
    va = b2 * va + (1.0f - b2) * ga.square();
    pa *= decay;
    pa -= step_size * ma / (va.sqrt() / root_c2 + eps);
  }
}

double global_norm(const NetParams<float>& grads) {
  double sq = 0.0;
  for (const auto& [_, m] : grads.named()) sq += m->template cast<double>().squaredNorm();
  return std::sqrt(sq);
}

double clip_global_norm(NetParams<float>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const float scale = static_cast<float>(max_norm / (norm + 1e-6));
    for (auto& [_, m] : grads.named()) *m *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(VapNet<float>& net, TrainConfig config, Exec exec)
    : net_(net), config_(config), exec_(exec), optimizer_(net.params(), config) {}

LossValue Trainer::step(std::span<const Example* const> batch, std::uint64_t dropout_seed, bool dropout) {
  const int n = static_cast<int>(batch.size());
  if (n == 0) throw ConfigError("empty batch");
  while (static_cast<int>(window_grads_.size()) < n) window_grads_.push_back(net_.params().zeros_like());
  const bool parallel = exec_ == Exec::parallel;
  const int threads = parallel ? omp_get_max_threads() : 1;
  if (static_cast<int>(tapes_.size()) < threads) tapes_.resize(threads);
  std::vector<LossValue> losses(n);
  std::vector<std::string> failures(n);

  // Each window owns a gradient buffer, so the reduction below fixes the
  // summation order regardless of thread scheduling.
#pragma omp parallel for schedule(dynamic, 1) if (parallel)
  for (int i = 0; i < n; ++i) {
    try {
      ForwardTape<float>& tape = tapes_[parallel ? omp_get_thread_num() : 0];
      const Example& ex = *batch[i];
      const ModelOutput<float> out =
          net_.forward_train(ex.features, tape, DropoutPlan{dropout, mix_seed(dropout_seed, i)}, Exec::serial);
      ModelOutput<float> grad;
      losses[i] = compute_loss(out, ex.labels, ex.vad_targets, config_.vad_loss_weight, &grad);
      window_grads_[i].set_zero();
      net_.backward(tape, grad, window_grads_[i], Exec::serial);
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  }
  for (const auto& f : failures)
    if (!f.empty()) throw Error(f);

  NetParams<float>& total = window_grads_[0];
  for (int i = 1; i < n; ++i) add_scaled(total, window_grads_[i], 1.0f);
  for (auto& [_, m] : total.named()) *m *= 1.0f / static_cast<float>(n);
  LossValue mean;
  for (const auto& l : losses) {
    mean.total += l.total / n;
    mean.vap += l.vap / n;
    mean.vad += l.vad / n;
  }
  if (!finite(mean)) throw TrainingDiverged("training loss became non-finite");
  clip_global_norm(total, config_.gradient_clip);
  optimizer_.step(net_.params(), total);
  return mean;
}

LossValue evaluate_loss(const VapNet<float>& net, std::span<const Example> examples, double vad_weight, Exec exec) {
  const int n = static_cast<int>(examples.size());
  if (n == 0) throw ConfigError("no examples to evaluate");
  std::vector<LossValue> losses(n);
  std::vector<std::string> failures(n);
  const bool parallel = exec == Exec::parallel;
#pragma omp parallel for schedule(dynamic, 1) if (parallel)
  for (int i = 0; i < n; ++i) {
    try {
      const ModelOutput<float> out = net.forward(examples[i].features, Exec::serial);
      losses[i] = compute_loss(out, examples[i].labels, examples[i].vad_targets, vad_weight);
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  }
  for (const auto& f : failures)
    if (!f.empty()) throw Error(f);
  LossValue mean;
  for (const auto& l : losses) {
    mean.total += l.total / n;
    mean.vap += l.vap / n;
    mean.vad += l.vad / n;
  }
  return mean;
}

LossValue Trainer::evaluate(std::span<const Example> examples) const {
  return evaluate_loss(net_, examples, config_.vad_loss_weight, exec_);
}

// ---------------------------------------------------------------------------
// Recipe

nlohmann::json report_json(const TrainReport& report, bool with_timing) {
  auto loss = [](const LossValue& l) { return nlohmann::json{{"total", l.total}, {"vap", l.vap}, {"vad", l.vad}}; };
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : report.epochs) {
    nlohmann::json row = {{"epoch", e.epoch}, {"train", loss(e.train)}, {"validation", loss(e.validation)}};
    if (with_timing) row["seconds"] = e.seconds;
    epochs.push_back(row);
  }
  nlohmann::json j = {{"epochs", epochs},
                      {"best_epoch", report.best_epoch},
                      {"best_val_loss", report.best_val_loss},
                      {"steps", report.steps}};
  if (with_timing) j["wall_seconds"] = report.wall_seconds;
  return j;
}

TrainResult train(const std::vector<Example>& train_set, const std::vector<Example>& validation_set,
                  const ModelConfig& model_config, const ProjectionConfig& projection,
                  const FeatureConfig& features, const FeatureNormalizer& normalizer, const TrainConfig& config,
                  Exec exec, const EpochCallback& on_epoch) {
  config.validate();
  model_config.validate(projection);
  if (train_set.empty()) throw ConfigError("training split has no windows");
  if (validation_set.empty()) throw ConfigError("validation split has no windows");
  const auto started = std::chrono::steady_clock::now();

  VapNet<float> net(model_config, config.seed);
  Trainer trainer(net, config, exec);
  std::mt19937_64 rng(mix_seed(config.seed, 0x5eed));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  TrainReport report;
  NetParams<float> best = net.params();
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord record;
    record.epoch = epoch;
    std::vector<const Example*> batch;
    for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
      batch.clear();
      for (std::size_t i = first; i < std::min(order.size(), first + config.batch_size); ++i)
        batch.push_back(&train_set[order[i]]);
      const LossValue l = trainer.step(batch, mix_seed(config.seed, static_cast<std::uint64_t>(report.steps) + 1));
      const double w = static_cast<double>(batch.size()) / static_cast<double>(order.size());
      record.train.total += w * l.total;
      record.train.vap += w * l.vap;
      record.train.vad += w * l.vad;
      ++report.steps;
      spdlog::debug("epoch {} step {} loss {:.4f} (vap {:.4f}, vad {:.4f})", epoch, report.steps, l.total, l.vap,
                    l.vad);
    }
    record.validation = trainer.evaluate(validation_set);
    if (!finite(record.validation)) throw TrainingDiverged("validation loss became non-finite");
    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    if (report.best_epoch < 0 || record.validation.total < report.best_val_loss) {
      report.best_epoch = epoch;
      report.best_val_loss = record.validation.total;
      best = net.params();
    }
    spdlog::info("epoch {}/{}: train {:.4f} (vap {:.4f}) | val {:.4f} (vap {:.4f}, vad {:.4f}) | {:.0f} s", epoch,
                 config.epochs, record.train.total, record.train.vap, record.validation.total,
                 record.validation.vap, record.validation.vad, record.seconds);
    report.epochs.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  CheckpointMetadata meta;
  meta.epoch = report.best_epoch;
  meta.validation_loss = report.best_val_loss;
  meta.seed = config.seed;
  meta.extra = {{"train_config", config}, {"best_val_vap_loss", report.epochs[report.best_epoch - 1].validation.vap}};
  return TrainResult{VapModel(model_config, projection, features, normalizer,
                              VapNet<float>(model_config, std::move(best)), std::move(meta)),
                     std::move(report)};
}

}  // namespace vap
