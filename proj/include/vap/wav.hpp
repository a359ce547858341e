#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace vap {

/// PCM 16-bit audio, one vector per channel.
struct PcmAudio {
  int sample_rate = 16000;
  std::vector<std::vector<std::int16_t>> channels;

  int channel_count() const { return static_cast<int>(channels.size()); }
  std::size_t frames() const { return channels.empty() ? 0 : channels.front().size(); }
};

/// Reads a RIFF/WAVE file with 16-bit PCM samples. Unknown chunks are skipped.
PcmAudio read_wav(const std::filesystem::path& path);

/// Writes 16-bit PCM little-endian, channels interleaved.
void write_wav(const std::filesystem::path& path, const PcmAudio& audio);

}  // namespace vap
