#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vqmir::data {

struct Genre {
  int id = 0;
  int parent = 0;  // 0 marks a root
  std::string name;
};

class GenreTaxonomy {
 public:
  GenreTaxonomy() = default;
  explicit GenreTaxonomy(std::vector<Genre> genres);

  bool contains(int id) const { return genres_.count(id) != 0; }
  const Genre& at(int id) const;
  const std::map<int, Genre>& genres() const { return genres_; }
  // Root ids in ascending order; their positions are the class indices.
  const std::vector<int>& roots() const { return roots_; }
  std::vector<std::string> root_names() const;
  // Walks parents to the root. Throws FormatError on a dangling parent or a cycle.
  int root_of(int id) const;
  int class_index(int root_id) const;

 private:
  std::map<int, Genre> genres_;
  std::vector<int> roots_;
};

// "genre_id\tparent_id\tname" with a header row.
GenreTaxonomy parse_taxonomy(const std::string& text);
GenreTaxonomy read_taxonomy(const std::filesystem::path& path);
std::string format_taxonomy(const GenreTaxonomy& taxonomy);

struct TrackMetadata {
  std::string track_id;
  std::string artist_id;
  std::vector<int> genre_ids;
  std::string path;  // relative to the metadata file unless absolute
  double duration_s = 0.0;
  int top_level = -1;  // class index after resolution

  bool operator==(const TrackMetadata&) const = default;
};

// Metadata layout: header row, then
// "track_id\tartist_id\tgenre_ids\tpath[\tduration_s]" with genre ids
// separated by commas. All malformed rows are reported together with their
// line numbers. With a taxonomy, unknown genre ids are errors.
std::vector<TrackMetadata> parse_track_metadata(const std::string& text, const GenreTaxonomy* taxonomy = nullptr);
std::vector<TrackMetadata> read_track_metadata(const std::filesystem::path& path,
                                               const GenreTaxonomy* taxonomy = nullptr);
std::string format_track_metadata(const std::vector<TrackMetadata>& tracks);

enum class MultiRootPolicy { Reject, FirstGenre };

// Root genre id of the track, or nullopt when its genres lead to different
// roots and the policy rejects such tracks.
std::optional<int> resolve_top_level_genre(const TrackMetadata& track, const GenreTaxonomy& taxonomy,
                                           MultiRootPolicy policy = MultiRootPolicy::Reject);

struct ResolvedTracks {
  std::vector<TrackMetadata> accepted;  // top_level set to the class index
  std::vector<std::string> warnings;
};
ResolvedTracks resolve_tracks(std::vector<TrackMetadata> tracks, const GenreTaxonomy& taxonomy,
                              MultiRootPolicy policy = MultiRootPolicy::Reject);

enum class Segment { Train, Validation, Test };
const char* segment_name(Segment s);

struct SplitRatios {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

struct DatasetSplit {
  std::map<std::string, Segment> assignment;  // track id -> segment
  SplitRatios ratios;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;

  std::vector<std::string> tracks_in(Segment s) const;
  bool operator==(const DatasetSplit& o) const { return assignment == o.assignment && seed == o.seed; }
};

// Artists are packed whole, largest first, into the segment that most
// reduces the squared deviation from the target per-genre and total counts.
DatasetSplit make_split(const std::vector<TrackMetadata>& tracks, SplitRatios ratios = {}, std::uint64_t seed = 0);

struct SplitCheck {
  std::string name;
  bool hard = false;
  bool passed = false;
  std::string detail;
};

struct SplitReport {
  std::vector<SplitCheck> checks;
  bool hard_passed() const;
  bool soft_passed() const;
  std::string to_json() const;
};

// Hard checks: coverage (every track assigned exactly once) and artist
// disjointness. Soft checks: each genre's share of tracks per segment within
// `tolerance` of the segment's overall share, and segment sizes within
// `ratio_tolerance` of the target ratios.
SplitReport verify_split(const DatasetSplit& split, const std::vector<TrackMetadata>& tracks, double tolerance = 0.03,
                         double ratio_tolerance = 0.02);

std::string format_split(const DatasetSplit& split);
DatasetSplit parse_split(const std::string& text);

struct GenreRecipe {
  double f_lo = 110.0, f_hi = 120.0;  // fundamental range, Hz
  std::vector<double> harmonics;      // relative amplitudes of partials 1..n
  int noise_color = 0;                // 0 white, 1 pink-ish, 2 brown
  double noise_level = 0.05;
  double am_rate = 2.0;  // amplitude-modulation rate, Hz
  double am_depth = 0.5;

  bool operator==(const GenreRecipe&) const = default;
};

struct SynthCorpusSpec {
  std::size_t n_genres = 4;
  std::size_t tracks_per_genre = 16;
  double clip_seconds = 2.0;
  std::uint32_t sample_rate = 22050;
  std::uint64_t seed = 0;
  std::vector<GenreRecipe> recipes;  // empty: default_recipes(n_genres)

  void validate() const;
};

std::vector<GenreRecipe> default_recipes(std::size_t n_genres);

struct SynthCorpus {
  std::vector<TrackMetadata> tracks;
  GenreTaxonomy taxonomy;
  std::filesystem::path metadata_path;
  std::filesystem::path taxonomy_path;
};

// Writes audio/<track>.wav, metadata.tsv and taxonomy.tsv under `out_dir`.
// Each genre root has one child genre; tracks are tagged with the child.
// Every synthetic artist owns two tracks of one genre.
SynthCorpus generate_synthetic_corpus(const SynthCorpusSpec& spec, const std::filesystem::path& out_dir);

// Converts FMA's genres.csv and tracks.csv (either the three-row header of
// the original release or a flat header with track_id, artist_id and genres
// columns) into this library's taxonomy and metadata files. Audio paths
// follow FMA's <audio_dir>/<first 3 digits>/<6-digit id>.wav layout.
struct FmaImportResult {
  std::size_t tracks = 0;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};
FmaImportResult import_fma(const std::filesystem::path& tracks_csv, const std::filesystem::path& genres_csv,
                           const std::filesystem::path& audio_dir, const std::filesystem::path& out_dir,
                           const std::string& subset = "");

// RFC 4180 rows.
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

}  // namespace vqmir::data
