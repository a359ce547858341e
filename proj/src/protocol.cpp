#include "vap/protocol.hpp"

#include <bit>
#include <cstring>

#include "vap/error.hpp"

namespace vap::wire {

static_assert(std::endian::native == std::endian::little, "wire encoding assumes a little-endian host");

namespace {

template <typename U>
void put(std::string& out, U value) {
  char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  out.append(bytes, sizeof(U));
}

class Cursor {
 public:
  explicit Cursor(std::span<const char> body) : body_(body) {}

  template <typename U>
  U get() {
    U value;
    std::memcpy(&value, take(sizeof(U)), sizeof(U));
    return value;
  }

  const char* take(std::size_t n) {
    if (n > body_.size() - pos_) throw ProtocolError("message body truncated");
    const char* p = body_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t remaining() const { return body_.size() - pos_; }

  void finish() const {
    if (remaining() != 0) throw ProtocolError("unexpected trailing bytes in message");
  }

 private:
  std::span<const char> body_;
  std::size_t pos_ = 0;
};

struct Encoder {
  std::string& out;

  void operator()(const Hello& m) const {
    out.push_back(static_cast<char>(MessageType::hello));
    put<std::uint16_t>(out, m.speakers);
    put<std::uint32_t>(out, m.sample_rate);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(m.checkpoint_id.size()));
    out += m.checkpoint_id;
  }
  void operator()(const Audio& m) const {
    out.push_back(static_cast<char>(MessageType::audio));
    put<std::uint32_t>(out, m.seq);
    put<std::uint32_t>(out, m.sample_count);
    out.append(reinterpret_cast<const char*>(m.samples.data()), m.samples.size() * sizeof(std::int16_t));
  }
  void operator()(const Prediction& m) const {
    if (m.p_future.size() != m.p_now.size()) throw ProtocolError("prediction p_future/p_now sizes differ");
    out.push_back(static_cast<char>(MessageType::prediction));
    put<std::uint32_t>(out, m.frame);
    out.push_back(static_cast<char>(m.p_future.size()));
    for (float p : m.p_future) put<float>(out, p);
    for (float p : m.p_now) put<float>(out, p);
    out.push_back(static_cast<char>(m.top_states.size()));
    for (const auto& [state, prob] : m.top_states) {
      put<std::uint16_t>(out, state);
      put<float>(out, prob);
    }
  }
  void operator()(const Error& m) const {
    out.push_back(static_cast<char>(MessageType::error));
    put<std::uint16_t>(out, static_cast<std::uint16_t>(m.code));
    put<std::uint16_t>(out, static_cast<std::uint16_t>(m.message.size()));
    out += m.message;
  }
  void operator()(const Bye&) const { out.push_back(static_cast<char>(MessageType::bye)); }
};

}  // namespace

std::string encode(const Message& message) {
  std::string body;
  std::visit(Encoder{body}, message);
  if (body.size() > kMaxMessageBytes) throw ProtocolError("message too large");
  std::string out;
  out.reserve(body.size() + 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(body.size()));
  out += body;
  return out;
}

Message decode(MessageType type, std::span<const char> body) {
  Cursor in(body);
  switch (type) {
    case MessageType::hello: {
      Hello m;
      m.speakers = in.get<std::uint16_t>();
      m.sample_rate = in.get<std::uint32_t>();
      const auto n = in.get<std::uint16_t>();
      m.checkpoint_id.assign(in.take(n), n);
      in.finish();
      return m;
    }
    case MessageType::audio: {
      Audio m;
      m.seq = in.get<std::uint32_t>();
      m.sample_count = in.get<std::uint32_t>();
      if (in.remaining() % sizeof(std::int16_t) != 0) throw ProtocolError("audio payload has an odd byte count");
      m.samples.resize(in.remaining() / sizeof(std::int16_t));
      // the channel count is only known to the session, but it must be whole
      if (m.samples.empty() != (m.sample_count == 0) || (m.sample_count && m.samples.size() % m.sample_count != 0))
        throw ProtocolError("audio payload is not a whole number of frames of sample_count samples");
      std::memcpy(m.samples.data(), in.take(in.remaining()), m.samples.size() * sizeof(std::int16_t));
      return m;
    }
    case MessageType::prediction: {
      Prediction m;
      m.frame = in.get<std::uint32_t>();
      const auto speakers = in.get<std::uint8_t>();
      for (int s = 0; s < speakers; ++s) m.p_future.push_back(in.get<float>());
      for (int s = 0; s < speakers; ++s) m.p_now.push_back(in.get<float>());
      const auto n = in.get<std::uint8_t>();
      for (int k = 0; k < n; ++k) {
        const auto state = in.get<std::uint16_t>();
        m.top_states.emplace_back(state, in.get<float>());
      }
      in.finish();
      return m;
    }
    case MessageType::error: {
      Error m;
      const auto code = in.get<std::uint16_t>();
      if (code < 1 || code > 4) throw ProtocolError("unknown error code " + std::to_string(code));
      m.code = static_cast<ErrorCode>(code);
      const auto n = in.get<std::uint16_t>();
      m.message.assign(in.take(n), n);
      in.finish();
      return m;
    }
    case MessageType::bye:
      in.finish();
      return Bye{};
  }
  throw ProtocolError("unknown message type " + std::to_string(static_cast<int>(type)));
}

void Decoder::feed(const char* data, std::size_t size) {
  if (offset_ > 0 && offset_ == buffer_.size()) {
    buffer_.clear();
    offset_ = 0;
  }
  buffer_.append(data, size);
}

std::optional<Message> Decoder::next() {
  if (buffer_.size() - offset_ < 4) return std::nullopt;
  std::uint32_t length;
  std::memcpy(&length, buffer_.data() + offset_, 4);
  if (length == 0) throw ProtocolError("empty message frame");
  if (length > kMaxMessageBytes) throw ProtocolError("message frame of " + std::to_string(length) + " bytes too large");
  if (buffer_.size() - offset_ - 4 < length) return std::nullopt;
  const auto type = static_cast<MessageType>(static_cast<std::uint8_t>(buffer_[offset_ + 4]));
  const std::span<const char> body(buffer_.data() + offset_ + 5, length - 1);
  Message m = decode(type, body);
  offset_ += 4 + length;
  if (offset_ > (1u << 20)) {
    buffer_.erase(0, offset_);
    offset_ = 0;
  }
  return m;
}

std::string to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::protocol: return "protocol";
    case ErrorCode::unsupported: return "unsupported";
    case ErrorCode::busy: return "busy";
    case ErrorCode::internal: return "internal";
  }
  return "unknown";
}

}  // namespace vap::wire
