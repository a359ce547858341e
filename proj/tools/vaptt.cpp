// vaptt: command-line front end for the VAP toolkit.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <thread>

#include "vap/activity.hpp"
#include "vap/corpus.hpp"
#include "vap/error.hpp"
#include "vap/eval.hpp"
#include "vap/features.hpp"
#include "vap/model.hpp"
#include "vap/server.hpp"
#include "vap/synth.hpp"
#include "vap/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw vap::ConfigError("cannot open config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw vap::ParseError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw vap::Error("cannot write " + path.string());
  out << text;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("vaptt");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
  if (const char* level = std::getenv("VAP_LOG_LEVEL")) spdlog::set_level(spdlog::level::from_str(level));
}

// Options shared by several subcommands.
struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string manifest;
  std::string out;
  int port = 7860;
  int hop = 50;
};

// ---------------------------------------------------------------------------

int run_synth(const Options& o) {
  vap::CorpusSynthesisConfig config;
  if (!o.config.empty()) config = read_json(o.config).get<vap::CorpusSynthesisConfig>();
  if (o.seed) config.seed = *o.seed;
  const fs::path dir = o.out.empty() ? fs::path("corpus") : fs::path(o.out);
  vap::Manifest manifest;
  manifest.base_dir = dir;
  vap::synthesize_corpus(config, [&](vap::SessionRecord&& session) {
    manifest.sessions.push_back(vap::save_session(session, dir));
    spdlog::debug("wrote session {}", session.session_id);
  });
  vap::write_manifest(dir / "manifest.json", manifest);
  write_text(dir / "synth_config.json", json(config).dump(2) + "\n");
  spdlog::info("synthesized {} sessions into {}", manifest.sessions.size(), dir.string());
  std::cout << (dir / "manifest.json").string() << "\n";
  return 0;
}

int run_stats(const Options& o) {
  const vap::Manifest manifest = vap::read_manifest(o.manifest);
  // Mean over sessions of each session's occupancy percentages.
  std::map<std::string, std::pair<std::vector<double>, int>> rows;
  for (const auto& e : manifest.sessions) {
    const vap::ActivityTrack track = vap::read_annotations(manifest.base_dir / e.annotation);
    if (track.speaker_count() != 3) throw vap::ConfigError("stats expects triadic sessions");
    const auto stats = vap::occupancy_stats(vap::rasterize(track));
    for (const std::string key : {e.category == vap::Category::spontaneous ? "SP" : "ATT", "BOTH"}) {
      auto& [sum, n] = rows[key];
      sum.resize(4, 0.0);
      for (int k = 0; k < 4; ++k) sum[k] += 100.0 * stats.fractions[k];
      ++n;
    }
  }
  std::cout << fmt::format("{:<6}{:>10}{:>10}{:>10}{:>10}\n", "", "Silence", "Single", "Double", "Triple");
  for (const char* key : {"SP", "ATT", "BOTH"}) {
    auto it = rows.find(key);
    if (it == rows.end()) continue;
    const auto& [sum, n] = it->second;
    std::cout << fmt::format("{:<6}", key);
    for (double v : sum) std::cout << fmt::format("{:>9.2f}%", v / n);
    std::cout << "\n";
  }
  return 0;
}

int run_train(const Options& o) {
  json cfg = o.config.empty() ? json::object() : read_json(o.config);
  vap::TrainConfig train_config = cfg.value("train", json::object()).get<vap::TrainConfig>();
  vap::ModelConfig model_config = cfg.value("model", json::object()).get<vap::ModelConfig>();
  vap::ProjectionConfig projection;
  if (cfg.contains("projection")) projection = cfg["projection"].get<vap::ProjectionConfig>();
  vap::FeatureConfig features;
  if (cfg.contains("features")) features = cfg["features"].get<vap::FeatureConfig>();
  const auto fractions = cfg.value("split_fractions", std::vector<double>{0.8, 0.1, 0.1});
  const double window_hop = cfg.value("window_hop_seconds", vap::kWindowSeconds);
  if (o.seed) train_config.seed = *o.seed;

  const vap::Manifest manifest = vap::read_manifest(o.manifest);
  std::vector<std::pair<std::string, std::string>> groups;
  for (const auto& e : manifest.sessions) groups.emplace_back(e.session_id, e.group_id);
  const vap::DatasetSplit split = vap::split_sessions(groups, fractions, train_config.seed);
  spdlog::info("split: {} train, {} validation, {} test sessions", split.train.size(), split.validation.size(),
               split.test.size());

  const vap::PreparedData data = vap::prepare_training_data(manifest, split, projection, features, window_hop);
  vap::TrainResult result = vap::train(data.train, data.validation, model_config, projection, features,
                                       data.normalizer, train_config);
  result.model.metadata().extra["split"] = split;

  const fs::path dir = o.out.empty() ? fs::path("run") : fs::path(o.out);
  fs::create_directories(dir);
  vap::save_checkpoint(result.model, dir / "model.vap");
  write_text(dir / "train_report.json", vap::report_json(result.report).dump(2) + "\n");
  write_text(dir / "split.json", json(split).dump(2) + "\n");
  spdlog::info("best epoch {} (validation loss {:.4f}); checkpoint {}", result.report.best_epoch,
               result.report.best_val_loss, (dir / "model.vap").string());
  return 0;
}

std::vector<std::string> test_sessions(const vap::VapModel& model, const vap::Manifest& manifest) {
  const auto& extra = model.metadata().extra;
  if (extra.contains("split")) return extra["split"].get<vap::DatasetSplit>().test;
  spdlog::warn("checkpoint has no stored split; evaluating every manifest session");
  std::vector<std::string> ids;
  for (const auto& e : manifest.sessions) ids.push_back(e.session_id);
  return ids;
}

int run_eval(const Options& o, bool all_sessions) {
  const vap::VapModel model = vap::load_checkpoint(o.checkpoint);
  const vap::Manifest manifest = vap::read_manifest(o.manifest);
  std::vector<std::string> ids;
  if (all_sessions)
    for (const auto& e : manifest.sessions) ids.push_back(e.session_id);
  else
    ids = test_sessions(model, manifest);
  std::vector<vap::SessionRecord> sessions;
  for (const auto& id : ids) sessions.push_back(vap::load_manifest_session(manifest, manifest.find(id)));
  vap::EvalConfig config;
  config.hop_frames = o.hop;
  const vap::EvalReport report = vap::evaluate(model, sessions, config);
  if (!o.out.empty()) write_text(o.out, vap::report_json(report).dump(2) + "\n");
  std::cout << vap::summary_table(report);
  return 0;
}

vap::SessionRecord session_from(const Options& o, const std::string& session_id,
                                const std::vector<std::string>& wavs, const vap::VapModel& model) {
  if (!wavs.empty()) {
    vap::SessionRecord s;
    s.session_id = fs::path(wavs.front()).stem().string();
    for (const auto& path : wavs) {
      const vap::PcmAudio pcm = vap::read_wav(path);
      if (pcm.sample_rate != model.feature_config().sample_rate)
        throw vap::ConfigError(path + ": sample rate does not match the model");
      for (const auto& ch : pcm.channels) s.audio.push_back(ch);
    }
    if (s.speaker_count() != model.model_config().speaker_count)
      throw vap::ConfigError("audio has " + std::to_string(s.speaker_count()) + " channels, model expects " +
                             std::to_string(model.model_config().speaker_count));
    s.track = vap::ActivityTrack(s.speaker_count(), static_cast<double>(s.sample_count()) / vap::kSampleRate, {});
    return s;
  }
  if (o.manifest.empty() || session_id.empty()) throw vap::ConfigError("give --wav files or --manifest with --session");
  const vap::Manifest manifest = vap::read_manifest(o.manifest);
  return vap::load_manifest_session(manifest, manifest.find(session_id));
}

std::vector<vap::PredictionFrame> session_predictions(const vap::VapModel& model, const vap::SessionRecord& s,
                                                      int hop) {
  const vap::Features raw = vap::extract_features(s.audio, model.feature_config());
  vap::SessionPredictor predictor(model, model.normalize(raw), hop);
  return predictor.all();
}

int run_predict(const Options& o, const std::string& session_id, const std::vector<std::string>& wavs) {
  const vap::VapModel model = vap::load_checkpoint(o.checkpoint);
  const vap::SessionRecord s = session_from(o, session_id, wavs, model);
  const auto predictions = session_predictions(model, s, o.hop);
  std::ofstream file;
  if (!o.out.empty()) {
    file.open(o.out);
    if (!file) throw vap::Error("cannot write " + o.out);
  }
  std::ostream& out = o.out.empty() ? std::cout : file;
  const int S = s.speaker_count();
  out << "frame,time";
  for (int c = 0; c < S; ++c) out << ",p_future" << c;
  for (int c = 0; c < S; ++c) out << ",p_now" << c;
  out << ",top_state,top_prob\n";
  const double rate = model.projection().frame_rate;
  for (std::size_t f = 0; f < predictions.size(); ++f) {
    const auto& p = predictions[f];
    const auto top = std::max_element(p.state_probs.begin(), p.state_probs.end());
    out << f << ',' << fmt::format("{:.2f}", f / rate);
    for (double v : p.p_future) out << ',' << fmt::format("{:.6f}", v);
    for (double v : p.p_now) out << ',' << fmt::format("{:.6f}", v);
    out << ',' << (top - p.state_probs.begin()) << ',' << fmt::format("{:.6f}", *top) << '\n';
  }
  return 0;
}

int run_export(const Options& o, const std::string& session_id, double start, double end) {
  const vap::VapModel model = vap::load_checkpoint(o.checkpoint);
  const vap::SessionRecord s = session_from(o, session_id, {}, model);
  const auto predictions = session_predictions(model, s, o.hop);
  std::ofstream file;
  if (!o.out.empty()) {
    file.open(o.out);
    if (!file) throw vap::Error("cannot write " + o.out);
  }
  vap::export_timeline(o.out.empty() ? std::cout : file, s, predictions, start, end < 0 ? s.track.duration() : end);
  return 0;
}

std::atomic<bool> interrupted{false};

int run_serve(const Options& o, int max_sessions, const std::string& bind, int bench_sessions, double bench_seconds) {
  const vap::VapModel model = vap::load_checkpoint(o.checkpoint);
  vap::ServerConfig config;
  config.bind_address = bind;
  config.port = static_cast<std::uint16_t>(bench_sessions > 0 ? 0 : o.port);
  config.max_sessions = std::max(max_sessions, bench_sessions);
  config.hop_frames = o.hop;
  vap::Server server(model, config);
  const std::uint16_t port = server.start();

  if (bench_sessions > 0) {
    // Built-in load test: N concurrent clients streaming synthetic audio.
    std::vector<std::thread> clients;
    std::atomic<int> failures{0};
    for (int k = 0; k < bench_sessions; ++k)
      clients.emplace_back([&, k] {
        vap::SynthesisParams p = vap::CorpusSynthesisConfig::default_spontaneous();
        p.seed = 1000 + static_cast<std::uint64_t>(k);
        p.session_duration = bench_seconds;
        p.speaker_count = model.model_config().speaker_count;
        const auto session = vap::synthesize_session(p, "bench" + std::to_string(k));
        const auto result = vap::stream_audio(bind, port, session.audio, 320);
        if (result.error) ++failures;
      });
    for (auto& t : clients) t.join();
    server.stop();
    const auto lat = server.latency();
    std::cout << fmt::format(
        "sessions {} frames {} latency ms: mean {:.2f} p50 {:.2f} p95 {:.2f} max {:.2f} failures {}\n",
        bench_sessions, lat.frames, lat.mean_ms, lat.p50_ms, lat.p95_ms, lat.max_ms, failures.load());
    return failures.load() == 0 ? 0 : 1;
  }

  std::signal(SIGINT, [](int) { interrupted = true; });
  std::signal(SIGTERM, [](int) { interrupted = true; });
  std::cout << "listening on " << bind << ":" << port << std::endl;
  while (!interrupted.load()) std::this_thread::sleep_for(std::chrono::milliseconds(200));
  server.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Voice activity projection toolkit for multi-party conversation"};
  app.require_subcommand(1);
  Options o;

  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus (sessions and manifest)");
  synth->add_option("--config", o.config, "corpus synthesis parameters (JSON)")->check(CLI::ExistingFile);
  synth->add_option("--seed", o.seed, "corpus seed");
  synth->add_option("--out", o.out, "output directory")->default_str("corpus");

  auto* stats = app.add_subcommand("stats", "occupancy percentages per conversation category");
  stats->add_option("--manifest", o.manifest, "manifest file")->required()->check(CLI::ExistingFile);

  auto* train = app.add_subcommand("train", "train a model on the training split of a manifest");
  train->add_option("--manifest", o.manifest, "manifest file")->required()->check(CLI::ExistingFile);
  train->add_option("--config", o.config, "training/model configuration (JSON)")->check(CLI::ExistingFile);
  train->add_option("--seed", o.seed, "split, initialization and shuffling seed");
  train->add_option("--out", o.out, "run directory")->default_str("run");

  bool all_sessions = false;
  auto* eval = app.add_subcommand("eval", "next-speaker accuracy and test loss on the test split");
  eval->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", o.manifest, "manifest file")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", o.out, "JSON report path");
  eval->add_option("--hop", o.hop, "context recomputation hop in frames");
  eval->add_flag("--all-sessions", all_sessions, "evaluate every manifest session instead of the stored test split");

  std::string session_id;
  std::vector<std::string> wavs;
  auto* predict = app.add_subcommand("predict", "per-frame predictions for one session as CSV");
  predict->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  predict->add_option("--manifest", o.manifest, "manifest file")->check(CLI::ExistingFile);
  predict->add_option("--session", session_id, "session id in the manifest");
  predict->add_option("--wav", wavs, "one multi-channel WAV or one mono WAV per speaker")->check(CLI::ExistingFile);
  predict->add_option("--out", o.out, "CSV path (default stdout)");
  predict->add_option("--hop", o.hop, "context recomputation hop in frames");

  double start = 0.0, end = -1.0;
  auto* exp = app.add_subcommand("export", "aligned ground truth / prediction timeline as CSV");
  exp->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  exp->add_option("--manifest", o.manifest, "manifest file")->required()->check(CLI::ExistingFile);
  exp->add_option("--session", session_id, "session id")->required();
  exp->add_option("--start", start, "range start in seconds");
  exp->add_option("--end", end, "range end in seconds (default session end)");
  exp->add_option("--out", o.out, "CSV path (default stdout)");
  exp->add_option("--hop", o.hop, "context recomputation hop in frames");

  int max_sessions = 8, bench_sessions = 0;
  double bench_seconds = 20.0;
  std::string bind = "127.0.0.1";
  auto* serve = app.add_subcommand("serve", "frame-synchronous streaming prediction service");
  serve->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  serve->add_option("--port", o.port, "TCP port")->check(CLI::Range(0, 65535));
  serve->add_option("--bind", bind, "listen address");
  serve->add_option("--hop", o.hop, "context recomputation hop in frames");
  serve->add_option("--max-sessions", max_sessions, "concurrent session limit");
  serve->add_option("--bench-latency", bench_sessions,
                    "stream synthetic audio from N concurrent clients, print per-frame latency and exit");
  serve->add_option("--bench-seconds", bench_seconds, "audio length per benchmark client");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return run_synth(o);
    if (*stats) return run_stats(o);
    if (*train) return run_train(o);
    if (*eval) return run_eval(o, all_sessions);
    if (*predict) return run_predict(o, session_id, wavs);
    if (*exp) return run_export(o, session_id, start, end);
    if (*serve) return run_serve(o, max_sessions, bind, bench_sessions, bench_seconds);
  } catch (const vap::TrainingDiverged& e) {
    spdlog::error("training diverged: {}", e.what());
    return 3;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 1;
}
