#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace vqmir::dsp {

// Mono PCM audio with amplitudes in [-1, 1].
struct AudioClip {
  std::vector<double> samples;
  std::uint32_t sample_rate = 44100;
  std::string id;

  double duration_seconds() const {
    return sample_rate == 0 ? 0.0 : static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }
};

// Reads 16-bit little-endian PCM WAV. Stereo input is averaged to mono.
AudioClip read_wav(const std::filesystem::path& path, std::string id = {});
// Writes 16-bit mono PCM, clipping to [-1, 1].
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

}  // namespace vqmir::dsp
