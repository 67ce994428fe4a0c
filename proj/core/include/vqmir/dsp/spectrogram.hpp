#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vqmir/dsp/audio.hpp"
#include "vqmir/numerics/tensor.hpp"

namespace vqmir::dsp {

// Mel front-end parameters. Defaults give 11.6 ms frames at 44.1 kHz with a
// hop of 128 samples so that spectrogram frames line up with 128x codec tokens.
struct SpectrogramConfig {
  std::size_t frame_size = 512;
  std::size_t hop_size = 128;
  std::size_t n_mels = 86;
  double db_floor = -80.0;
  bool center_pad = true;

  std::size_t n_bins() const { return frame_size / 2 + 1; }
  // Throws ConfigError when the invariants between the fields do not hold.
  void validate() const;

  // 2048-sample frames (~46 ms at 44.1 kHz), the usual MIR frame length.
  static SpectrogramConfig long_frame_ablation() {
    SpectrogramConfig c;
    c.frame_size = 2048;
    return c;
  }
};

// Time x Mel-band matrix of dB values.
struct MelSpectrogram {
  Tensor frames;  // [T x n_mels]
  SpectrogramConfig config;
  std::string clip_id;

  std::size_t num_frames() const { return frames.rank() == 2 ? frames.shape()[0] : 0; }
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Periodic Hann window w[k] = 0.5 - 0.5 cos(2 pi k / n).
std::vector<double> hann_window(std::size_t n);

// Frames produced for a clip of `num_samples` samples.
std::size_t num_frames(std::size_t num_samples, const SpectrogramConfig& config);

// Magnitude-squared STFT, [T x (frame/2 + 1)].
Tensor stft_power(const AudioClip& clip, const SpectrogramConfig& config);

// Triangular filters, [n_mels x (frame/2 + 1)], centers equally spaced on
// the Mel scale between 0 Hz and Nyquist, peak value 1.
Tensor mel_filterbank(const SpectrogramConfig& config, std::uint32_t sample_rate);
// Center frequency in Hz of each filter.
std::vector<double> mel_band_centers(const SpectrogramConfig& config, std::uint32_t sample_rate);

// 10 log10(S / max S) clamped at db_floor. An all-zero input maps to db_floor.
Tensor power_to_db(const Tensor& power, double db_floor);

MelSpectrogram mel_spectrogram(const AudioClip& clip, const SpectrogramConfig& config = {});

// Maps dB in [floor, 0] linearly onto [-1, 1].
Tensor normalize_db(const Tensor& db, double db_floor);

// Cache file: 16-byte header (8-byte magic, u32 version, u32 reserved),
// u32 T, u32 n_mels, then T*n_mels little-endian float32, row-major.
void write_mel_cache(const std::filesystem::path& path, const MelSpectrogram& mel);
Tensor read_mel_cache(const std::filesystem::path& path);

}  // namespace vqmir::dsp
