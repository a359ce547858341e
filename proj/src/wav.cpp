#include "vap/wav.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include "vap/error.hpp"

namespace vap {

namespace {

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

}  // namespace

PcmAudio read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open WAV file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw ParseError(where + "not a RIFF/WAVE file");

  int channels = 0;
  int sample_rate = 0;
  int bits = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t size = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw ParseError(where + "truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) throw ParseError(where + "short fmt chunk");
      const std::uint16_t format = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      sample_rate = static_cast<int>(read_u32(bytes.data() + body + 4));
      bits = read_u16(bytes.data() + body + 14);
      if (format != 1 && format != 0xFFFE) throw ParseError(where + "only PCM WAV is supported");
      if (bits != 16) throw ParseError(where + "only 16-bit samples are supported, got " + std::to_string(bits));
      if (channels <= 0) throw ParseError(where + "zero channels");
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      if (!have_fmt) throw ParseError(where + "data chunk before fmt chunk");
      PcmAudio audio;
      audio.sample_rate = sample_rate;
      const std::size_t frames = size / (2u * channels);
      audio.channels.assign(channels, std::vector<std::int16_t>(frames));
      const unsigned char* p = bytes.data() + body;
      for (std::size_t i = 0; i < frames; ++i)
        for (int c = 0; c < channels; ++c, p += 2)
          audio.channels[c][i] = static_cast<std::int16_t>(read_u16(p));
      return audio;
    }
    pos = body + size + (size & 1u);
  }
  throw ParseError(where + "no data chunk");
}

void write_wav(const std::filesystem::path& path, const PcmAudio& audio) {
  const int channels = audio.channel_count();
  if (channels == 0) throw ConfigError("cannot write WAV without channels");
  const std::size_t frames = audio.frames();
  for (const auto& ch : audio.channels)
    if (ch.size() != frames) throw ConfigError("WAV channels must have equal length");

  const std::uint32_t data_bytes = static_cast<std::uint32_t>(frames * channels * 2);
  std::vector<unsigned char> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, static_cast<std::uint16_t>(channels));
  put_u32(out, static_cast<std::uint32_t>(audio.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(audio.sample_rate * channels * 2));
  put_u16(out, static_cast<std::uint16_t>(channels * 2));
  put_u16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, data_bytes);
  for (std::size_t i = 0; i < frames; ++i)
    for (int c = 0; c < channels; ++c) put_u16(out, static_cast<std::uint16_t>(audio.channels[c][i]));

  std::ofstream file(path, std::ios::binary);
  if (!file) throw Error("cannot write WAV file " + path.string());
  file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

}  // namespace vap
