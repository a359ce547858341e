#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace vap::wire {

// Every message on the socket is
//   u32 length (of everything after this field), u8 type, body
// with little-endian integers and IEEE-754 f32 values.
//
//   hello      = 1: u16 speakers, u32 sample_rate, u16 id_length, id bytes
//   audio      = 2: u32 seq, u32 sample_count (per channel),
//                   sample_count * speakers interleaved i16 samples
//   prediction = 3: u32 frame, u8 speakers, f32 p_future[speakers], f32 p_now[speakers],
//                   u8 n, n * (u16 state, f32 probability)
//   error      = 4: u16 code, u16 message_length, message bytes
//   bye        = 5: empty
enum class MessageType : std::uint8_t { hello = 1, audio = 2, prediction = 3, error = 4, bye = 5 };

enum class ErrorCode : std::uint16_t { protocol = 1, unsupported = 2, busy = 3, internal = 4 };

inline constexpr std::uint32_t kMaxMessageBytes = 16u << 20;
inline constexpr int kTopStates = 5;

struct Hello {
  std::uint16_t speakers = 3;
  std::uint32_t sample_rate = 16000;
  std::string checkpoint_id;
  friend bool operator==(const Hello&, const Hello&) = default;
};

struct Audio {
  std::uint32_t seq = 0;
  std::uint32_t sample_count = 0;
  std::vector<std::int16_t> samples;  // interleaved; sample_count * speakers values
  friend bool operator==(const Audio&, const Audio&) = default;
};

struct Prediction {
  std::uint32_t frame = 0;
  std::vector<float> p_future;
  std::vector<float> p_now;
  std::vector<std::pair<std::uint16_t, float>> top_states;
  friend bool operator==(const Prediction&, const Prediction&) = default;
};

struct Error {
  ErrorCode code = ErrorCode::internal;
  std::string message;
  friend bool operator==(const Error&, const Error&) = default;
};

struct Bye {
  friend bool operator==(const Bye&, const Bye&) = default;
};

using Message = std::variant<Hello, Audio, Prediction, Error, Bye>;

/// Length prefix included.
std::string encode(const Message& message);

/// Decodes one message body (without the length prefix). Throws ProtocolError.
Message decode(MessageType type, std::span<const char> body);

/// Incremental decoder for a byte stream.
class Decoder {
 public:
  void feed(const char* data, std::size_t size);
  /// Next complete message, if any. Throws ProtocolError on malformed input.
  std::optional<Message> next();

 private:
  std::string buffer_;
  std::size_t offset_ = 0;
};

std::string to_string(ErrorCode code);

}  // namespace vap::wire
