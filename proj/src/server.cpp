#include "vap/server.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <spdlog/spdlog.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <numeric>

#include "vap/error.hpp"
#include "vap/stream.hpp"

namespace vap {

namespace {

void send_all(int fd, const std::string& bytes) {
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    const ssize_t n = ::send(fd, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(std::string("send failed: ") + std::strerror(errno));
    }
    sent += static_cast<std::size_t>(n);
  }
}

wire::Prediction to_wire(const StreamOutput& out) {
  wire::Prediction p;
  p.frame = static_cast<std::uint32_t>(out.frame);
  for (double v : out.prediction.p_future) p.p_future.push_back(static_cast<float>(v));
  for (double v : out.prediction.p_now) p.p_now.push_back(static_cast<float>(v));
  const auto& probs = out.prediction.state_probs;
  std::vector<std::uint16_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t k = std::min<std::size_t>(wire::kTopStates, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::uint16_t a, std::uint16_t b) { return probs[a] > probs[b] || (probs[a] == probs[b] && a < b); });
  for (std::size_t i = 0; i < k; ++i) p.top_states.emplace_back(order[i], probs[order[i]]);
  return p;
}

}  // namespace

LatencySummary summarize_latency(std::vector<double> samples_ms) {
  LatencySummary s;
  s.frames = samples_ms.size();
  if (samples_ms.empty()) return s;
  std::sort(samples_ms.begin(), samples_ms.end());
  s.mean_ms = std::accumulate(samples_ms.begin(), samples_ms.end(), 0.0) / static_cast<double>(samples_ms.size());
  auto quantile = [&](double q) {
    return samples_ms[std::min(samples_ms.size() - 1, static_cast<std::size_t>(q * static_cast<double>(samples_ms.size())))];
  };
  s.p50_ms = quantile(0.5);
  s.p95_ms = quantile(0.95);
  s.max_ms = samples_ms.back();
  return s;
}

Server::Server(const VapModel& model, ServerConfig config) : model_(model), config_(std::move(config)) {
  if (config_.max_sessions <= 0) throw ConfigError("max_sessions must be positive");
}

Server::~Server() { stop(); }

std::uint16_t Server::start() {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw Error(std::string("socket: ") + std::strerror(errno));
  const int yes = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(config_.port);
  if (::inet_pton(AF_INET, config_.bind_address.c_str(), &addr.sin_addr) != 1)
    throw ConfigError("invalid bind address " + config_.bind_address);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
    throw Error("cannot bind port " + std::to_string(config_.port) + ": " + std::strerror(errno));
  if (::listen(listen_fd_, 64) != 0) throw Error(std::string("listen: ") + std::strerror(errno));
  socklen_t len = sizeof(addr);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  const std::uint16_t port = ntohs(addr.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
  spdlog::info("serving on {}:{} (max {} sessions)", config_.bind_address, port, config_.max_sessions);
  return port;
}

void Server::stop() {
  if (stopping_.exchange(true)) {
    if (acceptor_.joinable()) acceptor_.join();
    return;
  }
  if (acceptor_.joinable()) acceptor_.join();
  {
    std::lock_guard lock(mutex_);
    for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  reap(true);
  if (listen_fd_ >= 0) ::close(listen_fd_);
  listen_fd_ = -1;
}

void Server::wait() {
  while (!stopping_.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

LatencySummary Server::latency() const {
  std::lock_guard lock(latency_mutex_);
  return summarize_latency(latencies_ms_);
}

void Server::reap(bool all) {
  std::list<Connection> finished;
  {
    std::lock_guard lock(mutex_);
    for (auto it = connections_.begin(); it != connections_.end();) {
      if (all || it->done->load()) {
        finished.splice(finished.end(), connections_, it++);
      } else {
        ++it;
      }
    }
  }
  for (auto& c : finished) c.thread.join();
}

void Server::accept_loop() {
  while (!stopping_.load()) {
    pollfd pfd{listen_fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, 100);
    reap(false);
    if (ready <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    const int yes = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &yes, sizeof(yes));
    if (active_.load() >= config_.max_sessions) {
      try {
        send_all(fd, wire::encode(wire::Error{wire::ErrorCode::busy, "server is at its session limit"}));
      } catch (const std::exception&) {
      }
      ::close(fd);
      continue;
    }
    ++active_;
    auto done = std::make_shared<std::atomic<bool>>(false);
    std::lock_guard lock(mutex_);
    open_fds_.insert(fd);
    connections_.push_back({std::thread([this, fd, done] {
                              serve_connection(fd);
                              {
                                std::lock_guard inner(mutex_);
                                open_fds_.erase(fd);
                              }
                              ::close(fd);
                              --active_;
                              done->store(true);
                            }),
                            done});
  }
}

void Server::serve_connection(int fd) {
  wire::Decoder decoder;
  std::unique_ptr<StreamPredictor> predictor;
  int speakers = 0;
  std::optional<std::uint32_t> last_seq;
  std::vector<char> buffer(1 << 16);
  std::vector<double> latencies;

  auto fail = [&](wire::ErrorCode code, const std::string& message) {
    spdlog::warn("closing session: {} ({})", message, wire::to_string(code));
    try {
      send_all(fd, wire::encode(wire::Error{code, message}));
    } catch (const std::exception&) {
    }
  };

  try {
    while (true) {
      const ssize_t n = ::recv(fd, buffer.data(), buffer.size(), 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) break;
      decoder.feed(buffer.data(), static_cast<std::size_t>(n));
      while (auto message = decoder.next()) {
        const auto received = std::chrono::steady_clock::now();
        if (auto* hello = std::get_if<wire::Hello>(&*message)) {
          if (predictor) throw ProtocolError("duplicate hello");
          if (hello->speakers != model_.model_config().speaker_count) {
            fail(wire::ErrorCode::unsupported, "model expects " + std::to_string(model_.model_config().speaker_count) +
                                                   " speakers, hello announced " + std::to_string(hello->speakers));
            return;
          }
          if (static_cast<int>(hello->sample_rate) != model_.feature_config().sample_rate) {
            fail(wire::ErrorCode::unsupported, "sample rate " + std::to_string(hello->sample_rate) + " not supported");
            return;
          }
          speakers = hello->speakers;
          predictor = std::make_unique<StreamPredictor>(model_, config_.hop_frames);
        } else if (auto* audio = std::get_if<wire::Audio>(&*message)) {
          if (!predictor) throw ProtocolError("audio before hello");
          if (last_seq && audio->seq <= *last_seq)
            throw ProtocolError("audio seq " + std::to_string(audio->seq) + " does not follow " +
                                std::to_string(*last_seq));
          last_seq = audio->seq;
          if (audio->samples.size() != static_cast<std::size_t>(audio->sample_count) * speakers)
            throw ProtocolError("audio payload does not hold sample_count * speakers samples");
          for (const auto& out : predictor->push(audio->samples)) {
            send_all(fd, wire::encode(to_wire(out)));
            latencies.push_back(
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - received).count());
          }
        } else if (std::holds_alternative<wire::Bye>(*message)) {
          send_all(fd, wire::encode(wire::Bye{}));
          goto done;
        } else {
          throw ProtocolError("unexpected message type from client");
        }
      }
    }
  } catch (const ProtocolError& e) {
    fail(wire::ErrorCode::protocol, e.what());
  } catch (const std::exception& e) {
    fail(wire::ErrorCode::internal, e.what());
  }
done:
  std::lock_guard lock(latency_mutex_);
  latencies_ms_.insert(latencies_ms_.end(), latencies.begin(), latencies.end());
}

// ---------------------------------------------------------------------------
// Client

Client::Client(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* result = nullptr;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &result) != 0 || !result)
    throw Error("cannot resolve " + host);
  fd_ = ::socket(result->ai_family, result->ai_socktype, result->ai_protocol);
  const int rc = fd_ < 0 ? -1 : ::connect(fd_, result->ai_addr, result->ai_addrlen);
  ::freeaddrinfo(result);
  if (rc != 0) {
    const std::string reason = std::strerror(errno);
    close();
    throw Error("cannot connect to " + host + ":" + std::to_string(port) + ": " + reason);
  }
  const int yes = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &yes, sizeof(yes));
}

Client::~Client() { close(); }

void Client::close() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

void Client::send(const wire::Message& message) { send_raw(wire::encode(message)); }

void Client::send_raw(const std::string& bytes) {
  if (fd_ < 0) throw Error("client is closed");
  send_all(fd_, bytes);
}

std::optional<wire::Message> Client::receive() {
  char buffer[1 << 14];
  while (true) {
    if (auto m = decoder_.next()) return m;
    if (fd_ < 0) return std::nullopt;
    const ssize_t n = ::recv(fd_, buffer, sizeof(buffer), 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return std::nullopt;
    decoder_.feed(buffer, static_cast<std::size_t>(n));
  }
}

StreamResult stream_audio(const std::string& host, std::uint16_t port,
                          const std::vector<std::vector<std::int16_t>>& audio, int chunk_samples) {
  if (audio.empty() || chunk_samples <= 0) throw ConfigError("nothing to stream");
  const std::size_t total = audio.front().size();
  const int speakers = static_cast<int>(audio.size());
  const std::size_t hop = 320;
  Client client(host, port);
  StreamResult result;
  client.send(wire::Hello{static_cast<std::uint16_t>(speakers), 16000, ""});

  auto collect = [&](std::size_t expected) {
    while (result.predictions.size() < expected) {
      auto m = client.receive();
      if (!m) return false;
      if (auto* p = std::get_if<wire::Prediction>(&*m)) result.predictions.push_back(std::move(*p));
      else if (auto* e = std::get_if<wire::Error>(&*m)) {
        result.error = *e;
        return false;
      }
    }
    return true;
  };

  std::uint32_t seq = 0;
  for (std::size_t first = 0; first < total; first += chunk_samples) {
    const std::size_t n = std::min<std::size_t>(chunk_samples, total - first);
    wire::Audio msg{seq++, static_cast<std::uint32_t>(n), {}};
    msg.samples.reserve(n * speakers);
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < speakers; ++c) msg.samples.push_back(audio[c][first + i]);
    client.send(msg);
    if (!collect((first + n) / hop)) return result;
  }
  client.send(wire::Bye{});
  while (auto m = client.receive()) {
    if (std::holds_alternative<wire::Bye>(*m)) break;
    if (auto* e = std::get_if<wire::Error>(&*m)) {
      result.error = *e;
      break;
    }
  }
  return result;
}

}  // namespace vap
