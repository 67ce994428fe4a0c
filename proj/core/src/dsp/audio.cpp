#include "vqmir/dsp/audio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "vqmir/binary_io.hpp"
#include "vqmir/error.hpp"

namespace vqmir::dsp {

AudioClip read_wav(const std::filesystem::path& path, std::string id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open WAV file " + path.string());
  try {
    if (binio::get_bytes(in, 4) != "RIFF") throw FormatError("not a RIFF file");
    binio::get_u32(in);
    if (binio::get_bytes(in, 4) != "WAVE") throw FormatError("RIFF file is not WAVE");

    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    bool have_fmt = false;
    while (true) {
      const std::string tag = binio::get_bytes(in, 4);
      const std::uint32_t size = binio::get_u32(in);
      if (tag == "fmt ") {
        format = binio::get_u16(in);
        channels = binio::get_u16(in);
        rate = binio::get_u32(in);
        binio::get_u32(in);  // byte rate
        binio::get_u16(in);  // block align
        bits = binio::get_u16(in);
        if (size > 16) binio::get_bytes(in, size - 16 + (size & 1u));
        have_fmt = true;
        continue;
      }
      if (tag != "data") {
        binio::get_bytes(in, size + (size & 1u));
        continue;
      }
      if (!have_fmt) throw FormatError("data chunk precedes fmt chunk");
      if (format != 1 || bits != 16) throw FormatError("only 16-bit PCM WAV is supported");
      if (channels == 0 || channels > 2) throw FormatError("only mono or stereo WAV is supported");
      const std::size_t frames = size / (2u * channels);
      AudioClip clip;
      clip.sample_rate = rate;
      clip.id = id.empty() ? path.stem().string() : std::move(id);
      clip.samples.resize(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (std::uint16_t c = 0; c < channels; ++c) {
          acc += static_cast<double>(static_cast<std::int16_t>(binio::get_u16(in))) / 32768.0;
        }
        clip.samples[i] = acc / channels;
      }
      return clip;
    }
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  if (clip.sample_rate == 0) throw ConfigError("sample rate must be positive");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write WAV file " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  binio::put_bytes(out, "RIFF");
  binio::put_u32(out, 36 + data_bytes);
  binio::put_bytes(out, "WAVE");
  binio::put_bytes(out, "fmt ");
  binio::put_u32(out, 16);
  binio::put_u16(out, 1);
  binio::put_u16(out, 1);
  binio::put_u32(out, clip.sample_rate);
  binio::put_u32(out, clip.sample_rate * 2);
  binio::put_u16(out, 2);
  binio::put_u16(out, 16);
  binio::put_bytes(out, "data");
  binio::put_u32(out, data_bytes);
  for (double s : clip.samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    const auto q = static_cast<std::int16_t>(std::lround(c * 32767.0));
    binio::put_u16(out, static_cast<std::uint16_t>(q));
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

}  // namespace vqmir::dsp
