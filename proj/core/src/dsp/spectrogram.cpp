#include "vqmir/dsp/spectrogram.hpp"

#include <fftw3.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>

#include "vqmir/binary_io.hpp"
#include "vqmir/error.hpp"

namespace vqmir::dsp {
namespace {

constexpr char kMelMagic[] = "VQMIRMEL";
constexpr std::uint32_t kMelVersion = 1;

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

// FFTW planning is not thread-safe; execution with new arrays is.
fftw_plan r2c_plan(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, fftw_plan> plans;
  std::lock_guard lock(mu);
  auto it = plans.find(n);
  if (it != plans.end()) return it->second;
  std::unique_ptr<double, FftwFree> in(fftw_alloc_real(n));
  std::unique_ptr<fftw_complex, FftwFree> out(fftw_alloc_complex(n / 2 + 1));
  // FFTW_ESTIMATE keeps the chosen algorithm, and so the rounding, fixed across runs.
  fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(n), in.get(), out.get(), FFTW_ESTIMATE);
  if (plan == nullptr) throw Error("FFTW could not plan a transform of size " + std::to_string(n));
  plans.emplace(n, plan);
  return plan;
}

// Sample at padded position `i`; positions outside the clip read as zero.
double padded_sample(const std::vector<double>& x, long long i) {
  return (i < 0 || i >= static_cast<long long>(x.size())) ? 0.0 : x[static_cast<std::size_t>(i)];
}

}  // namespace

void SpectrogramConfig::validate() const {
  if (frame_size < 2 || (frame_size & (frame_size - 1)) != 0) {
    throw ConfigError("frame_size must be a power of two, got " + std::to_string(frame_size));
  }
  if (hop_size == 0 || hop_size > frame_size) throw ConfigError("hop_size must lie in [1, frame_size]");
  if (n_mels == 0) throw ConfigError("n_mels must be at least 1");
  if (n_mels > n_bins()) {
    throw ConfigError("n_mels (" + std::to_string(n_mels) + ") exceeds the " + std::to_string(n_bins()) +
                      " frequency bins of a " + std::to_string(frame_size) + "-sample frame");
  }
  if (!(db_floor < 0.0)) throw ConfigError("db_floor must be negative");
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> hann_window(std::size_t n) {
  if (n < 2) throw ConfigError("Hann window length must be at least 2");
  std::vector<double> w(n);
  for (std::size_t k = 0; k < n; ++k) {
    w[k] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n));
  }
  return w;
}

std::size_t num_frames(std::size_t num_samples, const SpectrogramConfig& config) {
  if (config.center_pad) return (num_samples + config.hop_size - 1) / config.hop_size;
  if (num_samples < config.frame_size) return 0;
  return 1 + (num_samples - config.frame_size) / config.hop_size;
}

Tensor stft_power(const AudioClip& clip, const SpectrogramConfig& config) {
  config.validate();
  if (clip.samples.empty()) throw Error("cannot compute a spectrogram of an empty clip");
  const std::size_t n = config.frame_size;
  const std::size_t bins = config.n_bins();
  const std::size_t frames = num_frames(clip.samples.size(), config);
  if (frames == 0) throw Error("clip shorter than one frame and center padding is off");
  const auto window = hann_window(n);
  const fftw_plan plan = r2c_plan(n);
  std::unique_ptr<double, FftwFree> in(fftw_alloc_real(n));
  std::unique_ptr<fftw_complex, FftwFree> out(fftw_alloc_complex(bins));

  Tensor power(Shape{frames, bins});
  const long long offset = config.center_pad ? static_cast<long long>(n / 2) : 0;
  for (std::size_t t = 0; t < frames; ++t) {
    const long long start = static_cast<long long>(t * config.hop_size) - offset;
    for (std::size_t k = 0; k < n; ++k) {
      in.get()[k] = window[k] * padded_sample(clip.samples, start + static_cast<long long>(k));
    }
    fftw_execute_dft_r2c(plan, in.get(), out.get());
    for (std::size_t b = 0; b < bins; ++b) {
      const double re = out.get()[b][0], im = out.get()[b][1];
      power.at(t, b) = re * re + im * im;
    }
  }
  return power;
}

std::vector<double> mel_band_centers(const SpectrogramConfig& config, std::uint32_t sample_rate) {
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> centers(config.n_mels);
  for (std::size_t i = 0; i < config.n_mels; ++i) {
    centers[i] = mel_to_hz(top * static_cast<double>(i + 1) / static_cast<double>(config.n_mels + 1));
  }
  return centers;
}

Tensor mel_filterbank(const SpectrogramConfig& config, std::uint32_t sample_rate) {
  config.validate();
  if (sample_rate == 0) throw ConfigError("sample rate must be positive");
  const std::size_t bins = config.n_bins();
  const double top = hz_to_mel(sample_rate / 2.0);
  const double bin_hz = static_cast<double>(sample_rate) / static_cast<double>(config.frame_size);
  std::vector<double> edges(config.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(config.n_mels + 1));
  }

  Tensor fb(Shape{config.n_mels, bins});
  for (std::size_t m = 0; m < config.n_mels; ++m) {
    const double center = edges[m + 1];
    // Filters narrower than one FFT bin would miss every bin; their slopes
    // are widened to span at least one bin on each side.
    const double lower = std::min(edges[m], center - bin_hz);
    const double upper = std::max(edges[m + 2], center + bin_hz);
    for (std::size_t b = 0; b < bins; ++b) {
      const double f = static_cast<double>(b) * bin_hz;
      double w = 0.0;
      if (f > lower && f < upper) w = f <= center ? (f - lower) / (center - lower) : (upper - f) / (upper - center);
      fb.at(m, b) = w;
    }
  }
  return fb;
}

Tensor power_to_db(const Tensor& power, double db_floor) {
  double mx = 0.0;
  for (double v : power.data()) {
    if (v < 0.0) throw Error("power_to_db expects non-negative power values");
    mx = std::max(mx, v);
  }
  Tensor db(power.shape(), db_floor);
  if (mx == 0.0) return db;
  for (std::size_t i = 0; i < power.numel(); ++i) {
    if (power[i] > 0.0) db[i] = std::max(db_floor, 10.0 * std::log10(power[i] / mx));
  }
  return db;
}

MelSpectrogram mel_spectrogram(const AudioClip& clip, const SpectrogramConfig& config) {
  const Tensor power = stft_power(clip, config);
  const Tensor fb = mel_filterbank(config, clip.sample_rate);
  const std::size_t frames = power.shape()[0], bins = power.shape()[1];
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Tensor mel(Shape{frames, config.n_mels});
  Eigen::Map<RowMat>(mel.data().data(), static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(config.n_mels))
      .noalias() =
      Eigen::Map<const RowMat>(power.data().data(), static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(bins)) *
      Eigen::Map<const RowMat>(fb.data().data(), static_cast<Eigen::Index>(config.n_mels), static_cast<Eigen::Index>(bins))
          .transpose();
  return MelSpectrogram{power_to_db(mel, config.db_floor), config, clip.id};
}

Tensor normalize_db(const Tensor& db, double db_floor) {
  const double half = -db_floor / 2.0;
  Tensor out(db.shape());
  for (std::size_t i = 0; i < db.numel(); ++i) out[i] = (db[i] - db_floor / 2.0) / half;
  return out;
}

void write_mel_cache(const std::filesystem::path& path, const MelSpectrogram& mel) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  binio::put_bytes(out, std::string(kMelMagic, 8));
  binio::put_u32(out, kMelVersion);
  binio::put_u32(out, 0);
  const std::size_t t = mel.num_frames();
  const std::size_t m = t == 0 ? 0 : mel.frames.shape()[1];
  binio::put_u32(out, static_cast<std::uint32_t>(t));
  binio::put_u32(out, static_cast<std::uint32_t>(m));
  for (double v : mel.frames.data()) binio::put_f32(out, static_cast<float>(v));
  if (!out) throw FormatError("failed writing " + path.string());
}

Tensor read_mel_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    if (binio::get_bytes(in, 8) != std::string(kMelMagic, 8)) throw FormatError("bad magic");
    const std::uint32_t version = binio::get_u32(in);
    if (version != kMelVersion) {
      throw FormatError("unsupported version " + std::to_string(version) + " (expected " +
                        std::to_string(kMelVersion) + ")");
    }
    binio::get_u32(in);
    const std::uint32_t t = binio::get_u32(in);
    const std::uint32_t m = binio::get_u32(in);
    Tensor frames(Shape{t, m});
    for (double& v : frames.data()) v = binio::get_f32(in);
    return frames;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace vqmir::dsp
