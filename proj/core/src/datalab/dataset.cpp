#include "vqmir/datalab/dataset.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "vqmir/error.hpp"

namespace vqmir::data {

namespace {

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \r\n\t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \r\n\t");
  return s.substr(b, e - b + 1);
}

bool parse_int(const std::string& s, int& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  const auto r = std::from_chars(t.data(), t.data() + t.size(), out);
  return r.ec == std::errc() && r.ptr == t.data() + t.size();
}

bool parse_double(const std::string& s, double& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  try {
    std::size_t used = 0;
    out = std::stod(t, &used);
    return used == t.size() && std::isfinite(out);
  } catch (const std::exception&) {
    return false;
  }
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void throw_errors(const std::string& what, const std::vector<std::string>& errors) {
  std::string msg = what + ": " + std::to_string(errors.size()) + " error(s)";
  for (const auto& e : errors) msg += "\n  " + e;
  throw FormatError(msg);
}

}  // namespace

GenreTaxonomy::GenreTaxonomy(std::vector<Genre> genres) {
  for (auto& g : genres) {
    if (g.id <= 0) throw FormatError("taxonomy: genre ids must be positive, got " + std::to_string(g.id));
    if (!genres_.emplace(g.id, g).second) throw FormatError("taxonomy: duplicate genre id " + std::to_string(g.id));
    if (g.parent == 0) roots_.push_back(g.id);
  }
  std::sort(roots_.begin(), roots_.end());
}

const Genre& GenreTaxonomy::at(int id) const {
  const auto it = genres_.find(id);
  if (it == genres_.end()) throw FormatError("taxonomy: unknown genre id " + std::to_string(id));
  return it->second;
}

std::vector<std::string> GenreTaxonomy::root_names() const {
  std::vector<std::string> names;
  for (int r : roots_) names.push_back(genres_.at(r).name);
  return names;
}

int GenreTaxonomy::root_of(int id) const {
  int cur = id;
  for (std::size_t hops = 0; hops <= genres_.size(); ++hops) {
    const auto it = genres_.find(cur);
    if (it == genres_.end()) {
      if (cur == id) throw FormatError("taxonomy: unknown genre id " + std::to_string(id));
      throw FormatError("taxonomy: genre " + std::to_string(id) + " reaches dangling parent " + std::to_string(cur));
    }
    if (it->second.parent == 0) return cur;
    cur = it->second.parent;
  }
  throw FormatError("taxonomy: parent cycle starting at genre " + std::to_string(id));
}

int GenreTaxonomy::class_index(int root_id) const {
  const auto it = std::lower_bound(roots_.begin(), roots_.end(), root_id);
  if (it == roots_.end() || *it != root_id) throw FormatError("taxonomy: " + std::to_string(root_id) + " is not a root");
  return static_cast<int>(it - roots_.begin());
}

GenreTaxonomy parse_taxonomy(const std::string& text) {
  const auto lines = lines_of(text);
  std::vector<Genre> genres;
  std::vector<std::string> errors;
  std::set<int> seen;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const auto cols = split_on(lines[i], '\t');
    Genre g;
    if (cols.size() != 3 || !parse_int(cols[0], g.id) || !parse_int(cols[1], g.parent) || g.id <= 0 || g.parent < 0) {
      errors.push_back("line " + std::to_string(i + 1) + ": expected genre_id<TAB>parent_id<TAB>name");
      continue;
    }
    if (!seen.insert(g.id).second) {
      errors.push_back("line " + std::to_string(i + 1) + ": duplicate genre id " + std::to_string(g.id));
      continue;
    }
    g.name = cols[2];
    genres.push_back(std::move(g));
  }
  if (!errors.empty()) throw_errors("taxonomy", errors);
  GenreTaxonomy tax(std::move(genres));
  // Reject dangling parents and cycles up front.
  for (const auto& [id, g] : tax.genres()) tax.root_of(id);
  return tax;
}

GenreTaxonomy read_taxonomy(const std::filesystem::path& path) { return parse_taxonomy(read_text(path)); }

std::string format_taxonomy(const GenreTaxonomy& taxonomy) {
  std::string out = "genre_id\tparent_id\tname\n";
  for (const auto& [id, g] : taxonomy.genres())
    out += std::to_string(id) + "\t" + std::to_string(g.parent) + "\t" + g.name + "\n";
  return out;
}

std::vector<TrackMetadata> parse_track_metadata(const std::string& text, const GenreTaxonomy* taxonomy) {
  const auto lines = lines_of(text);
  std::vector<TrackMetadata> tracks;
  if (lines.empty()) return tracks;
  const auto header = split_on(lines[0], '\t');
  if (header.size() < 4 || header[0] != "track_id" || header[1] != "artist_id" || header[2] != "genre_ids" ||
      header[3] != "path") {
    throw FormatError("metadata: line 1: header must start with track_id<TAB>artist_id<TAB>genre_ids<TAB>path");
  }
  std::vector<std::string> errors;
  std::set<std::string> ids;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const std::string where = "line " + std::to_string(i + 1) + ": ";
    const auto cols = split_on(lines[i], '\t');
    if (cols.size() != 4 && cols.size() != 5) {
      errors.push_back(where + "expected 4 or 5 tab-separated columns, got " + std::to_string(cols.size()));
      continue;
    }
    TrackMetadata t;
    t.track_id = cols[0];
    t.artist_id = cols[1];
    t.path = cols[3];
    if (t.track_id.empty() || t.artist_id.empty() || t.path.empty()) {
      errors.push_back(where + "empty track_id, artist_id or path");
      continue;
    }
    bool ok = true;
    for (const auto& g : split_on(cols[2], ',')) {
      int id = 0;
      if (!parse_int(g, id) || id <= 0) {
        errors.push_back(where + "bad genre id '" + g + "'");
        ok = false;
        break;
      }
      if (taxonomy != nullptr && !taxonomy->contains(id)) {
        errors.push_back(where + "unknown genre id " + std::to_string(id));
        ok = false;
        break;
      }
      t.genre_ids.push_back(id);
    }
    if (!ok) continue;
    if (cols.size() == 5 && !cols[4].empty() && (!parse_double(cols[4], t.duration_s) || t.duration_s < 0.0)) {
      errors.push_back(where + "bad duration '" + cols[4] + "'");
      continue;
    }
    if (!ids.insert(t.track_id).second) {
      errors.push_back(where + "duplicate track id '" + t.track_id + "'");
      continue;
    }
    tracks.push_back(std::move(t));
  }
  if (!errors.empty()) throw_errors("metadata", errors);
  return tracks;
}

std::vector<TrackMetadata> read_track_metadata(const std::filesystem::path& path, const GenreTaxonomy* taxonomy) {
  return parse_track_metadata(read_text(path), taxonomy);
}

std::string format_track_metadata(const std::vector<TrackMetadata>& tracks) {
  std::string out = "track_id\tartist_id\tgenre_ids\tpath\tduration_s\n";
  for (const auto& t : tracks) {
    out += t.track_id + "\t" + t.artist_id + "\t";
    for (std::size_t i = 0; i < t.genre_ids.size(); ++i) out += (i ? "," : "") + std::to_string(t.genre_ids[i]);
    out += "\t" + t.path + "\t" + format_double(t.duration_s) + "\n";
  }
  return out;
}

std::optional<int> resolve_top_level_genre(const TrackMetadata& track, const GenreTaxonomy& taxonomy,
                                           MultiRootPolicy policy) {
  if (track.genre_ids.empty()) throw FormatError("track '" + track.track_id + "' has no genre ids");
  const int first = taxonomy.root_of(track.genre_ids.front());
  for (std::size_t i = 1; i < track.genre_ids.size(); ++i) {
    if (taxonomy.root_of(track.genre_ids[i]) != first) {
      if (policy == MultiRootPolicy::FirstGenre) return first;
      return std::nullopt;
    }
  }
  return first;
}

ResolvedTracks resolve_tracks(std::vector<TrackMetadata> tracks, const GenreTaxonomy& taxonomy,
                              MultiRootPolicy policy) {
  ResolvedTracks out;
  for (auto& t : tracks) {
    const auto root = resolve_top_level_genre(t, taxonomy, policy);
    if (!root) {
      out.warnings.push_back("track '" + t.track_id + "' rejected: genres span several top-level genres");
      continue;
    }
    t.top_level = taxonomy.class_index(*root);
    out.accepted.push_back(std::move(t));
  }
  return out;
}

const char* segment_name(Segment s) {
  switch (s) {
    case Segment::Train: return "train";
    case Segment::Validation: return "validation";
    case Segment::Test: return "test";
  }
  return "?";
}

std::vector<std::string> DatasetSplit::tracks_in(Segment s) const {
  std::vector<std::string> out;
  for (const auto& [id, seg] : assignment)
    if (seg == s) out.push_back(id);
  return out;
}

DatasetSplit make_split(const std::vector<TrackMetadata>& tracks, SplitRatios ratios, std::uint64_t seed) {
  const double rsum = ratios.train + ratios.validation + ratios.test;
  if (ratios.train < 0 || ratios.validation < 0 || ratios.test < 0 || std::abs(rsum - 1.0) > 1e-9)
    throw ConfigError("split ratios must be non-negative and sum to 1");
  const std::array<double, 3> r{ratios.train, ratios.validation, ratios.test};

  int n_classes = 0;
  for (const auto& t : tracks) {
    if (t.top_level < 0) throw ConfigError("make_split: track '" + t.track_id + "' has no resolved genre");
    n_classes = std::max(n_classes, t.top_level + 1);
  }

  struct Artist {
    std::string id;
    std::vector<const TrackMetadata*> tracks;
    std::vector<double> per_genre;
  };
  std::map<std::string, Artist> by_id;
  for (const auto& t : tracks) {
    Artist& a = by_id[t.artist_id];
    a.id = t.artist_id;
    a.tracks.push_back(&t);
  }
  std::vector<Artist> artists;
  std::vector<double> genre_total(n_classes, 0.0);
  std::map<int, std::set<std::string>> genre_artists;
  for (auto& [id, a] : by_id) {
    a.per_genre.assign(n_classes, 0.0);
    for (const auto* t : a.tracks) {
      a.per_genre[t->top_level] += 1.0;
      genre_total[t->top_level] += 1.0;
      genre_artists[t->top_level].insert(id);
    }
    artists.push_back(std::move(a));
  }


  const double n_total = static_cast<double>(tracks.size());
  std::array<std::vector<double>, 3> count;
  std::array<double, 3> size{0, 0, 0};
  for (auto& c : count) c.assign(n_classes, 0.0);


  std::array<std::vector<double>, 3> target;
  std::array<double, 3> target_size{};
  for (std::size_t s = 0; s < 3; ++s) {
    target[s].resize(n_classes);
    for (int g = 0; g < n_classes; ++g) target[s][g] = r[s] * genre_total[g];
    target_size[s] = r[s] * n_total;
  }
  const auto seg_cost = [&](std::size_t s) {
    double c = 0.0;
    for (int g = 0; g < n_classes; ++g) c += (count[s][g] - target[s][g]) * (count[s][g] - target[s][g]);
    // Half weight on the size term lets per-genre fixes pass through size plateaus.
    return c + 0.5 * (size[s] - target_size[s]) * (size[s] - target_size[s]);
  };
  // Tie-breaker: squared deviation of segment composition from the global mix.
  const auto mix_error = [&](std::size_t s) {
    if (size[s] == 0.0) return 0.0;
    double e = 0.0;
    for (int g = 0; g < n_classes; ++g) {
      const double d = count[s][g] / size[s] - genre_total[g] / n_total;
      e += d * d;
    }
    return e;
  };
  const auto improves = [](double cost_before, double mix_before, double cost_after, double mix_after) {
    return cost_after < cost_before - 1e-9 || (cost_after <= cost_before + 1e-9 && mix_after < mix_before - 1e-12);
  };
  const auto shift = [&](const Artist& a, std::size_t s, double sign) {
    for (int g = 0; g < n_classes; ++g) count[s][g] += sign * a.per_genre[g];
    size[s] += sign * static_cast<double>(a.tracks.size());
  };

  // Each attempt reshuffles the order among equally sized artists; the
  // cheapest packing wins. All shuffles derive from the seed.
  std::mt19937_64 rng(seed);
  std::vector<Artist> best_order;
  std::vector<std::size_t> best_seg;
  double best_cost = std::numeric_limits<double>::infinity(), best_mix = best_cost;
  const int attempts = artists.size() <= 2000 ? 64 : 4;
  for (int attempt = 0; attempt < attempts; ++attempt) {
    std::shuffle(artists.begin(), artists.end(), rng);
    std::stable_sort(artists.begin(), artists.end(),
                     [](const Artist& a, const Artist& b) { return a.tracks.size() > b.tracks.size(); });
    for (auto& c : count) std::fill(c.begin(), c.end(), 0.0);
    size = {0, 0, 0};

    // Greedy pass: each artist goes where the cost rises least.
    std::vector<std::size_t> seg_of(artists.size());
    for (std::size_t i = 0; i < artists.size(); ++i) {
      std::size_t best = 3;
      double best_delta = 0.0, best_deficit = 0.0;
      for (std::size_t s = 0; s < 3; ++s) {
        if (r[s] == 0.0) continue;
        const double before = seg_cost(s);
        shift(artists[i], s, 1.0);
        const double delta = seg_cost(s) - before;
        shift(artists[i], s, -1.0);
        const double deficit = target_size[s] - size[s];
        if (best == 3 || delta < best_delta - 1e-9 || (std::abs(delta - best_delta) <= 1e-9 && deficit > best_deficit)) {
          best = s;
          best_delta = delta;
          best_deficit = deficit;
        }
      }
      seg_of[i] = best;
      shift(artists[i], best, 1.0);
    }

    // Repair pass: single moves, then pairwise swaps, while the cost drops.
    const bool try_swaps = artists.size() <= 2000;
    for (int pass = 0; pass < 50; ++pass) {
      bool improved = false;
      for (std::size_t i = 0; i < artists.size(); ++i) {
        const std::size_t from = seg_of[i];
        for (std::size_t to = 0; to < 3; ++to) {
          if (to == from || r[to] == 0.0) continue;
          const double before = seg_cost(from) + seg_cost(to), mix_before = mix_error(from) + mix_error(to);
          shift(artists[i], from, -1.0);
          shift(artists[i], to, 1.0);
          if (improves(before, mix_before, seg_cost(from) + seg_cost(to), mix_error(from) + mix_error(to))) {
            seg_of[i] = to;
            improved = true;
            break;
          }
          shift(artists[i], to, -1.0);
          shift(artists[i], from, 1.0);
        }
      }
      if (try_swaps) {
        for (std::size_t i = 0; i < artists.size(); ++i) {
          for (std::size_t j = i + 1; j < artists.size(); ++j) {
            const std::size_t si = seg_of[i], sj = seg_of[j];
            if (si == sj) continue;
            const double before = seg_cost(si) + seg_cost(sj), mix_before = mix_error(si) + mix_error(sj);
            shift(artists[i], si, -1.0);
            shift(artists[i], sj, 1.0);
            shift(artists[j], sj, -1.0);
            shift(artists[j], si, 1.0);
            if (improves(before, mix_before, seg_cost(si) + seg_cost(sj), mix_error(si) + mix_error(sj))) {
              std::swap(seg_of[i], seg_of[j]);
              improved = true;
              continue;
            }
            shift(artists[j], si, -1.0);
            shift(artists[j], sj, 1.0);
            shift(artists[i], sj, -1.0);
            shift(artists[i], si, 1.0);
          }
        }
      }
      if (!improved) break;
    }

    const double cost = seg_cost(0) + seg_cost(1) + seg_cost(2);
    const double mix = mix_error(0) + mix_error(1) + mix_error(2);
    if (improves(best_cost, best_mix, cost, mix)) {
      best_cost = cost;
      best_mix = mix;
      best_order = artists;
      best_seg = seg_of;
    }
  }
  artists = std::move(best_order);
  const std::vector<std::size_t> seg_of = std::move(best_seg);

  DatasetSplit split;
  split.ratios = ratios;
  split.seed = seed;
  for (std::size_t i = 0; i < artists.size(); ++i)
    for (const auto* t : artists[i].tracks) split.assignment[t->track_id] = static_cast<Segment>(seg_of[i]);
  for (const auto& [g, as] : genre_artists) {
    if (as.size() == 1 && genre_total[g] > 1) {
      split.warnings.push_back("genre " + std::to_string(g) + ": every track belongs to artist '" + *as.begin() +
                               "'; it cannot be stratified");
    }
  }
  return split;
}

bool SplitReport::hard_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const SplitCheck& c) { return !c.hard || c.passed; });
}

bool SplitReport::soft_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const SplitCheck& c) { return c.hard || c.passed; });
}

std::string SplitReport::to_json() const {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& c : checks)
    j.push_back({{"check", c.name}, {"hard", c.hard}, {"passed", c.passed}, {"detail", c.detail}});
  return nlohmann::json{{"hard_passed", hard_passed()}, {"soft_passed", soft_passed()}, {"checks", j}}.dump(2);
}

SplitReport verify_split(const DatasetSplit& split, const std::vector<TrackMetadata>& tracks, double tolerance,
                         double ratio_tolerance) {
  SplitReport report;

  SplitCheck coverage{"coverage", true, true, ""};
  std::set<std::string> ids;
  for (const auto& t : tracks) {
    ids.insert(t.track_id);
    if (!split.assignment.count(t.track_id)) {
      coverage.passed = false;
      coverage.detail += "unassigned track '" + t.track_id + "'; ";
    }
  }
  for (const auto& [id, seg] : split.assignment) {
    if (!ids.count(id)) {
      coverage.passed = false;
      coverage.detail += "unknown track '" + id + "'; ";
    }
  }
  report.checks.push_back(coverage);

  SplitCheck disjoint{"artist_disjoint", true, true, ""};
  std::map<std::string, std::set<Segment>> artist_segments;
  for (const auto& t : tracks) {
    const auto it = split.assignment.find(t.track_id);
    if (it != split.assignment.end()) artist_segments[t.artist_id].insert(it->second);
  }
  for (const auto& [artist, segs] : artist_segments) {
    if (segs.size() > 1) {
      disjoint.passed = false;
      disjoint.detail += "artist '" + artist + "' appears in";
      for (Segment s : segs) disjoint.detail += std::string(" ") + segment_name(s);
      disjoint.detail += "; ";
    }
  }
  report.checks.push_back(disjoint);

  // Segment composition against the global genre distribution.
  std::map<int, double> global;
  std::array<std::map<int, double>, 3> per;
  std::array<double, 3> size{0, 0, 0};
  double n = 0;
  for (const auto& t : tracks) {
    const auto it = split.assignment.find(t.track_id);
    if (it == split.assignment.end()) continue;
    const auto s = static_cast<std::size_t>(it->second);
    global[t.top_level] += 1;
    per[s][t.top_level] += 1;
    size[s] += 1;
    n += 1;
  }
  SplitCheck strat{"stratification", false, true, ""};
  double worst = 0.0;
  for (std::size_t s = 0; s < 3; ++s) {
    if (size[s] == 0) continue;
    for (const auto& [g, cnt] : global) {
      const double dev = per[s][g] / size[s] - cnt / n;
      worst = std::max(worst, std::abs(dev));
      if (std::abs(dev) > tolerance + 1e-12) {
        strat.passed = false;
        strat.detail += "genre " + std::to_string(g) + " in " + segment_name(static_cast<Segment>(s)) + " off by " +
                        format_double(std::round(dev * 1000.0) / 10.0) + " pts; ";
      }
    }
  }
  if (strat.passed) strat.detail = "max deviation " + format_double(std::round(worst * 1000.0) / 10.0) + " pts";
  report.checks.push_back(strat);

  SplitCheck ratio{"ratios", false, true, ""};
  const std::array<double, 3> target{split.ratios.train, split.ratios.validation, split.ratios.test};
  for (std::size_t s = 0; s < 3; ++s) {
    const double frac = n == 0 ? 0.0 : size[s] / n;
    ratio.detail += std::string(segment_name(static_cast<Segment>(s))) + "=" + std::to_string(static_cast<int>(size[s])) + " ";
    if (std::abs(frac - target[s]) > ratio_tolerance + 1e-12) ratio.passed = false;
  }
  report.checks.push_back(ratio);
  return report;
}

std::string format_split(const DatasetSplit& split) {
  std::string out = "track_id\tsegment\n";
  for (const auto& [id, seg] : split.assignment) out += id + "\t" + segment_name(seg) + "\n";
  return out;
}

DatasetSplit parse_split(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty() || lines[0] != "track_id\tsegment") throw FormatError("split: missing header");
  DatasetSplit split;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto cols = split_on(lines[i], '\t');
    Segment seg;
    if (cols.size() != 2) throw FormatError("split: line " + std::to_string(i + 1) + ": expected 2 columns");
    if (cols[1] == "train") seg = Segment::Train;
    else if (cols[1] == "validation") seg = Segment::Validation;
    else if (cols[1] == "test") seg = Segment::Test;
    else throw FormatError("split: line " + std::to_string(i + 1) + ": unknown segment '" + cols[1] + "'");
    if (!split.assignment.emplace(cols[0], seg).second)
      throw FormatError("split: line " + std::to_string(i + 1) + ": duplicate track '" + cols[0] + "'");
  }
  return split;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw FormatError("csv: unterminated quoted field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace vqmir::data
