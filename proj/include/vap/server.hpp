#pragma once

#include <atomic>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "vap/model.hpp"
#include "vap/protocol.hpp"

namespace vap {

struct ServerConfig {
  std::string bind_address = "127.0.0.1";
  std::uint16_t port = 7860;  // 0 picks a free port
  int max_sessions = 8;
  int hop_frames = 50;
};

struct LatencySummary {
  std::size_t frames = 0;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double max_ms = 0.0;
};

LatencySummary summarize_latency(std::vector<double> samples_ms);

/// TCP streaming service: one thread per connection, all sharing one
/// immutable model.
class Server {
 public:
  Server(const VapModel& model, ServerConfig config);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and starts accepting; returns the bound port.
  std::uint16_t start();
  /// Closes the listener and every open session, then joins all threads.
  void stop();
  /// Blocks until stop() is called from another thread.
  void wait();

  int active_sessions() const { return active_.load(); }
  /// Time from receiving an audio message to sending each prediction it produced.
  LatencySummary latency() const;

 private:
  struct Connection {
    std::thread thread;
    std::shared_ptr<std::atomic<bool>> done;
  };

  void accept_loop();
  void serve_connection(int fd);
  void reap(bool all);

  const VapModel& model_;
  ServerConfig config_;
  int listen_fd_ = -1;
  std::atomic<bool> stopping_{false};
  std::atomic<int> active_{0};
  std::thread acceptor_;
  std::mutex mutex_;
  std::list<Connection> connections_;
  std::set<int> open_fds_;
  mutable std::mutex latency_mutex_;
  std::vector<double> latencies_ms_;
};

/// Blocking client for the wire protocol.
class Client {
 public:
  Client(const std::string& host, std::uint16_t port);
  ~Client();
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;

  void send(const wire::Message& message);
  void send_raw(const std::string& bytes);
  /// Next message; nullopt once the server has closed the connection.
  std::optional<wire::Message> receive();
  void close();

 private:
  int fd_ = -1;
  wire::Decoder decoder_;
};

struct StreamResult {
  std::vector<wire::Prediction> predictions;
  std::optional<wire::Error> error;
};

/// Sends hello, the audio in chunks of `chunk_samples` per channel, then bye,
/// and collects every prediction.
StreamResult stream_audio(const std::string& host, std::uint16_t port,
                          const std::vector<std::vector<std::int16_t>>& audio, int chunk_samples);

}  // namespace vap
