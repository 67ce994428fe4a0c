#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "vqmir/datalab/dataset.hpp"
#include "vqmir/error.hpp"

namespace vqmir::data {

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ArtifactError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int to_int(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw FormatError(where + ": expected an integer, got '" + s + "'");
}

// "[21, 811]" -> {21, 811}
std::vector<int> genre_list(const std::string& s, const std::string& where) {
  std::vector<int> out;
  std::string cur;
  for (char c : s) {
    if (std::isdigit(static_cast<unsigned char>(c))) {
      cur += c;
    } else if (c == ',' || c == ']') {
      if (!cur.empty()) out.push_back(to_int(cur, where));
      cur.clear();
    } else if (c != '[' && c != ' ') {
      throw FormatError(where + ": bad genre list '" + s + "'");
    }
  }
  if (!cur.empty()) out.push_back(to_int(cur, where));
  return out;
}

int subset_rank(const std::string& s) {
  if (s == "small") return 0;
  if (s == "medium") return 1;
  if (s == "large") return 2;
  return 3;
}

}  // namespace

FmaImportResult import_fma(const std::filesystem::path& tracks_csv, const std::filesystem::path& genres_csv,
                           const std::filesystem::path& audio_dir, const std::filesystem::path& out_dir,
                           const std::string& subset) {
  if (!subset.empty() && subset_rank(subset) > 2) throw ConfigError("unknown FMA subset '" + subset + "'");

  const auto grows = parse_csv(slurp(genres_csv));
  if (grows.empty()) throw FormatError(genres_csv.string() + ": empty");
  const auto& gh = grows[0];
  const auto gcol = [&](const std::string& name) {
    const auto it = std::find(gh.begin(), gh.end(), name);
    if (it == gh.end()) throw FormatError(genres_csv.string() + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - gh.begin());
  };
  const std::size_t gi = gcol("genre_id"), gp = gcol("parent"), gt = gcol("title");
  std::vector<Genre> genres;
  for (std::size_t r = 1; r < grows.size(); ++r) {
    const std::string where = genres_csv.string() + " row " + std::to_string(r + 1);
    const auto& row = grows[r];
    if (row.size() <= std::max({gi, gp, gt})) throw FormatError(where + ": too few columns");
    genres.push_back({to_int(row[gi], where), to_int(row[gp], where), row[gt]});
  }
  GenreTaxonomy taxonomy(std::move(genres));
  for (const auto& [id, g] : taxonomy.genres()) taxonomy.root_of(id);

  const auto trows = parse_csv(slurp(tracks_csv));
  if (trows.empty()) throw FormatError(tracks_csv.string() + ": empty");
  std::size_t first_data = 1;
  std::size_t c_id = 0, c_artist = 0, c_genres = 0;
  std::optional<std::size_t> c_subset, c_duration;
  const auto find_col = [](const std::vector<std::string>& hdr, const std::string& name) -> std::optional<std::size_t> {
    const auto it = std::find(hdr.begin(), hdr.end(), name);
    if (it == hdr.end()) return std::nullopt;
    return static_cast<std::size_t>(it - hdr.begin());
  };
  if (trows.size() >= 3 && trows[2].size() > 0 && trows[2][0] == "track_id") {
    // Original release: section row, field row, then "track_id".
    first_data = 3;
    const auto& sec = trows[0];
    const auto& fld = trows[1];
    const auto col2 = [&](const std::string& s, const std::string& f) -> std::optional<std::size_t> {
      for (std::size_t i = 0; i < std::min(sec.size(), fld.size()); ++i)
        if (sec[i] == s && fld[i] == f) return i;
      return std::nullopt;
    };
    const auto a = col2("artist", "id");
    const auto g = col2("track", "genres");
    if (!a || !g) throw FormatError(tracks_csv.string() + ": missing artist/id or track/genres column");
    c_artist = *a;
    c_genres = *g;
    c_subset = col2("set", "subset");
    c_duration = col2("track", "duration");
  } else {
    const auto& hdr = trows[0];
    const auto i = find_col(hdr, "track_id");
    const auto a = find_col(hdr, "artist_id");
    const auto g = find_col(hdr, "genres");
    if (!i || !a || !g) throw FormatError(tracks_csv.string() + ": need track_id, artist_id and genres columns");
    c_id = *i;
    c_artist = *a;
    c_genres = *g;
    c_subset = find_col(hdr, "subset");
    c_duration = find_col(hdr, "duration");
  }

  FmaImportResult result;
  std::vector<TrackMetadata> tracks;
  for (std::size_t r = first_data; r < trows.size(); ++r) {
    const auto& row = trows[r];
    const std::string where = tracks_csv.string() + " row " + std::to_string(r + 1);
    if (row.size() <= std::max({c_id, c_artist, c_genres})) throw FormatError(where + ": too few columns");
    if (!subset.empty() && c_subset && *c_subset < row.size() && subset_rank(row[*c_subset]) > subset_rank(subset)) continue;
    const int tid = to_int(row[c_id], where);
    TrackMetadata t;
    t.track_id = std::to_string(tid);
    t.artist_id = row[c_artist];
    t.genre_ids = genre_list(row[c_genres], where);
    std::vector<int> known;
    for (int g : t.genre_ids) {
      if (taxonomy.contains(g)) known.push_back(g);
      else result.warnings.push_back("track " + t.track_id + ": unknown genre " + std::to_string(g) + " dropped");
    }
    t.genre_ids = known;
    if (t.genre_ids.empty()) {
      ++result.skipped;
      result.warnings.push_back("track " + t.track_id + " skipped: no genres");
      continue;
    }
    char rel[32];
    std::snprintf(rel, sizeof rel, "%03d/%06d.wav", tid / 1000, tid);
    t.path = (audio_dir / rel).string();
    if (c_duration && *c_duration < row.size() && !row[*c_duration].empty()) {
      try {
        t.duration_s = std::stod(row[*c_duration]);
      } catch (const std::exception&) {
        throw FormatError(where + ": bad duration '" + row[*c_duration] + "'");
      }
    }
    tracks.push_back(std::move(t));
  }

  std::filesystem::create_directories(out_dir);
  std::ofstream(out_dir / "metadata.tsv", std::ios::binary) << format_track_metadata(tracks);
  std::ofstream(out_dir / "taxonomy.tsv", std::ios::binary) << format_taxonomy(taxonomy);
  result.tracks = tracks.size();
  return result;
}

}  // namespace vqmir::data
