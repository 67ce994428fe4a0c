#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include "vqmir/datalab/dataset.hpp"
#include "vqmir/dsp/audio.hpp"
#include "vqmir/error.hpp"

namespace vqmir::data {

std::vector<GenreRecipe> default_recipes(std::size_t n_genres) {
  std::vector<GenreRecipe> out;
  for (std::size_t g = 0; g < n_genres; ++g) {
    GenreRecipe r;
    // Fundamentals a major third apart never overlap across genres.
    r.f_lo = 100.0 * std::pow(1.25, static_cast<double>(g));
    r.f_hi = r.f_lo * 1.12;
    // Highest partial stays below 8 kHz.
    const std::size_t partials = std::max<std::size_t>(1, std::min<std::size_t>(1 + 2 * (g % 4), static_cast<std::size_t>(8000.0 / r.f_hi)));
    const double decay = 0.5 + 0.15 * static_cast<double>(g % 3);
    for (std::size_t h = 0; h < partials; ++h) r.harmonics.push_back(std::pow(decay, static_cast<double>(h)));
    r.noise_color = static_cast<int>(g % 3);
    r.noise_level = 0.05 + 0.05 * static_cast<double>(g % 2);
    r.am_rate = 1.0 + 1.5 * static_cast<double>(g % 5);
    r.am_depth = 0.3 + 0.2 * static_cast<double>(g % 3);
    out.push_back(std::move(r));
  }
  return out;
}

void SynthCorpusSpec::validate() const {
  if (n_genres < 2) throw ConfigError("synthetic corpus needs n_genres >= 2");
  if (tracks_per_genre == 0) throw ConfigError("synthetic corpus needs at least one track per genre");
  if (!(clip_seconds > 0.0)) throw ConfigError("synthetic clip length must be positive");
  if (sample_rate < 8000) throw ConfigError("synthetic sample rate must be at least 8000 Hz");
  const auto rs = recipes.empty() ? default_recipes(n_genres) : recipes;
  if (rs.size() != n_genres)
    throw ConfigError("synthetic corpus: " + std::to_string(rs.size()) + " recipes for " + std::to_string(n_genres) +
                      " genres");
  for (std::size_t i = 0; i < rs.size(); ++i) {
    const auto& r = rs[i];
    if (!(r.f_lo > 0.0) || r.f_hi < r.f_lo || r.harmonics.empty() ||
        r.f_hi * static_cast<double>(r.harmonics.size()) >= 0.5 * sample_rate || r.noise_color < 0 || r.noise_color > 2 ||
        r.noise_level < 0.0 || r.am_rate < 0.0 || r.am_depth < 0.0 || r.am_depth > 1.0)
      throw ConfigError("synthetic recipe " + std::to_string(i) + " is out of range");
    for (std::size_t j = 0; j < i; ++j)
      if (rs[j] == r) throw ConfigError("synthetic recipes " + std::to_string(j) + " and " + std::to_string(i) + " are identical");
  }
}

namespace {

std::vector<double> render(const GenreRecipe& r, std::size_t n, double sr, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;
  const double f0 = r.f_lo + (r.f_hi - r.f_lo) * u(rng);
  const double am = r.am_rate * (0.9 + 0.2 * u(rng));
  const double am_phase = two_pi * u(rng);
  std::vector<double> amp, phase;
  for (double a : r.harmonics) {
    amp.push_back(a * (0.8 + 0.4 * u(rng)));
    phase.push_back(two_pi * u(rng));
  }

  std::vector<double> noise(n);
  double state = 0.0, sq = 0.0;
  for (auto& v : noise) {
    const double w = gauss(rng);
    if (r.noise_color == 0) {
      v = w;
    } else {
      state = (r.noise_color == 1 ? 0.9 : 0.995) * state + w;
      v = state;
    }
    sq += v * v;
  }
  const double rms = std::sqrt(sq / static_cast<double>(std::max<std::size_t>(n, 1)));

  std::vector<double> x(n);
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sr;
    double tone = 0.0;
    for (std::size_t h = 0; h < amp.size(); ++h) tone += amp[h] * std::sin(two_pi * f0 * static_cast<double>(h + 1) * t + phase[h]);
    const double env = 1.0 - 0.5 * r.am_depth + 0.5 * r.am_depth * std::sin(two_pi * am * t + am_phase);
    x[i] = env * tone + r.noise_level * (rms > 0 ? noise[i] / rms : 0.0);
    peak = std::max(peak, std::abs(x[i]));
  }
  if (peak > 0)
    for (auto& v : x) v *= 0.8 / peak;
  return x;
}

std::string numbered(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%04zu", prefix, i);
  return buf;
}

}  // namespace

SynthCorpus generate_synthetic_corpus(const SynthCorpusSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  const auto recipes = spec.recipes.empty() ? default_recipes(spec.n_genres) : spec.recipes;
  std::filesystem::create_directories(out_dir / "audio");

  std::vector<Genre> genres;
  for (std::size_t g = 0; g < spec.n_genres; ++g) {
    const int root = static_cast<int>(g + 1);
    genres.push_back({root, 0, numbered("genre", g)});
    genres.push_back({1000 + root, root, numbered("genre", g) + "/style"});
  }

  SynthCorpus corpus;
  corpus.taxonomy = GenreTaxonomy(genres);
  const auto n = static_cast<std::size_t>(std::llround(spec.clip_seconds * spec.sample_rate));
  std::size_t track = 0, artist = 0;
  for (std::size_t g = 0; g < spec.n_genres; ++g) {
    for (std::size_t k = 0; k < spec.tracks_per_genre; ++k, ++track) {
      if (k % 2 == 0 && k > 0) ++artist;
      std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                        static_cast<std::uint32_t>(track), 0x5e7du};
      std::mt19937_64 rng(seq);
      dsp::AudioClip clip;
      clip.sample_rate = spec.sample_rate;
      clip.samples = render(recipes[g], n, spec.sample_rate, rng);
      TrackMetadata t;
      t.track_id = numbered("trk", track);
      t.artist_id = numbered("art", artist);
      t.genre_ids = {1000 + static_cast<int>(g + 1)};
      t.path = "audio/" + t.track_id + ".wav";
      t.duration_s = clip.duration_seconds();
      t.top_level = static_cast<int>(g);
      dsp::write_wav(out_dir / t.path, clip);
      corpus.tracks.push_back(std::move(t));
    }
    ++artist;
  }

  corpus.metadata_path = out_dir / "metadata.tsv";
  corpus.taxonomy_path = out_dir / "taxonomy.tsv";
  std::ofstream(corpus.metadata_path, std::ios::binary) << format_track_metadata(corpus.tracks);
  std::ofstream(corpus.taxonomy_path, std::ios::binary) << format_taxonomy(corpus.taxonomy);
  return corpus;
}

}  // namespace vqmir::data
