#include "vqmir/evalkit/metrics.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "vqmir/error.hpp"

namespace vqmir::eval {

using nlohmann::json;

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

ConfusionMatrix confusion_matrix(std::span<const int> truths, std::span<const int> preds, std::size_t k) {
  if (truths.size() != preds.size()) {
    throw ShapeError("confusion_matrix: " + std::to_string(truths.size()) + " truths but " +
                     std::to_string(preds.size()) + " predictions");
  }
  ConfusionMatrix cm;
  cm.k = k;
  cm.counts.assign(k * k, 0);
  for (std::size_t i = 0; i < truths.size(); ++i) {
    for (int label : {truths[i], preds[i]}) {
      if (label < 0 || static_cast<std::size_t>(label) >= k) {
        throw ShapeError("confusion_matrix: label " + std::to_string(label) + " outside [0, " + std::to_string(k) +
                         ") at position " + std::to_string(i));
      }
    }
    ++cm.counts[static_cast<std::size_t>(truths[i]) * k + static_cast<std::size_t>(preds[i])];
  }
  return cm;
}

std::vector<ClassScore> class_scores(const ConfusionMatrix& cm) {
  std::vector<ClassScore> out(cm.k);
  for (std::size_t c = 0; c < cm.k; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < cm.k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const double tp = static_cast<double>(cm.at(c, c));
    ClassScore& s = out[c];
    s.support = row;
    s.precision = col == 0 ? 0.0 : tp / static_cast<double>(col);
    s.recall = row == 0 ? 0.0 : tp / static_cast<double>(row);
    s.f1 = s.precision + s.recall == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
  }
  return out;
}

double macro_f1(const ConfusionMatrix& cm) {
  if (cm.k < 2) throw ConfigError("macro_f1 needs at least 2 classes");
  double sum = 0.0;
  for (const ClassScore& s : class_scores(cm)) sum += s.f1;
  return sum / static_cast<double>(cm.k);
}

ChanceBaseline chance_baseline(std::size_t k, std::span<const std::uint64_t> class_counts, std::size_t trials,
                               std::uint64_t seed) {
  if (k < 2) throw ConfigError("chance baseline needs at least 2 classes");
  if (class_counts.size() != k) throw ShapeError("chance baseline: class_counts must have k entries");
  if (trials < 1000) throw ConfigError("chance baseline needs at least 1000 trials, got " + std::to_string(trials));
  std::vector<int> truths;
  for (std::size_t c = 0; c < k; ++c) truths.insert(truths.end(), class_counts[c], static_cast<int>(c));
  if (truths.empty()) throw ConfigError("chance baseline: no ground-truth items");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(k) - 1);
  std::vector<int> preds(truths.size());
  double sum = 0.0, sq = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    for (int& p : preds) p = pick(rng);
    const double f = macro_f1(confusion_matrix(truths, preds, k));
    sum += f;
    sq += f * f;
  }
  const double n = static_cast<double>(trials);
  ChanceBaseline b;
  b.trials = trials;
  b.mean = sum / n;
  const double var = std::max(0.0, (sq - n * b.mean * b.mean) / (n - 1.0));
  b.std_error = std::sqrt(var / n);
  return b;
}

std::string history_tsv(std::span<const HistoryRecord> history) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (const auto& r : history) os << r.epoch << '\t' << r.split << '\t' << r.metric << '\t' << r.value << '\n';
  return os.str();
}

std::vector<HistoryRecord> parse_history_tsv(const std::string& text) {
  std::vector<HistoryRecord> out;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    HistoryRecord r;
    std::string value;
    if (!(ls >> r.epoch) || ls.get() != '\t' || !std::getline(ls, r.split, '\t') || !std::getline(ls, r.metric, '\t') ||
        !std::getline(ls, value)) {
      throw FormatError("history line " + std::to_string(line_no) + ": expected epoch, split, metric, value");
    }
    try {
      std::size_t used = 0;
      r.value = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
    } catch (const std::exception&) {
      throw FormatError("history line " + std::to_string(line_no) + ": bad value '" + value + "'");
    }
    out.push_back(std::move(r));
  }
  return out;
}

MetricsReport build_report(std::string run_name, std::string variant, bool pretrained, ConfusionMatrix confusion,
                           std::vector<HistoryRecord> history, std::size_t best_epoch, ChanceBaseline chance,
                           std::string config_fingerprint, std::string split_fingerprint) {
  if (history.empty()) throw Error("cannot build a metrics report without a training history");
  MetricsReport r;
  r.run_name = std::move(run_name);
  r.variant = std::move(variant);
  r.pretrained = pretrained;
  r.per_class = class_scores(confusion);
  r.macro_f1 = macro_f1(confusion);
  r.confusion = std::move(confusion);
  r.best_epoch = best_epoch;
  r.chance = chance;
  double train_loss = NAN, val_loss = NAN;
  for (const auto& h : history) {
    if (h.epoch != best_epoch || h.metric != "finetune_loss") continue;
    if (h.split == "train") train_loss = h.value;
    if (h.split == "validation") val_loss = h.value;
  }
  r.overfit_gap = std::isnan(train_loss) || std::isnan(val_loss) ? 0.0 : val_loss - train_loss;
  r.history = std::move(history);
  r.config_fingerprint = std::move(config_fingerprint);
  r.split_fingerprint = std::move(split_fingerprint);
  return r;
}

std::string report_to_json(const MetricsReport& r) {
  json j;
  j["schema_version"] = MetricsReport::kSchemaVersion;
  j["run_name"] = r.run_name;
  j["variant"] = r.variant;
  j["pretrained"] = r.pretrained;
  j["macro_f1"] = r.macro_f1;
  j["best_epoch"] = r.best_epoch;
  j["overfit_gap"] = r.overfit_gap;
  j["confusion"] = {{"k", r.confusion.k}, {"class_names", r.confusion.class_names}, {"counts", r.confusion.counts}};
  json pc = json::array();
  for (const auto& s : r.per_class) {
    pc.push_back({{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"support", s.support}});
  }
  j["per_class"] = pc;
  j["chance_baseline"] = {{"monte_carlo_mean", r.chance.mean},
                          {"std_error", r.chance.std_error},
                          {"trials", r.chance.trials},
                          {"quoted_reference", r.chance.quoted_reference}};
  json h = json::array();
  for (const auto& x : r.history) h.push_back({{"epoch", x.epoch}, {"split", x.split}, {"metric", x.metric}, {"value", x.value}});
  j["history"] = h;
  j["config_fingerprint"] = r.config_fingerprint;
  j["split_fingerprint"] = r.split_fingerprint;
  j["split_sizes"] = r.split_sizes;
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    const int version = j.at("schema_version").get<int>();
    if (version != MetricsReport::kSchemaVersion) {
      throw FormatError("metrics report schema " + std::to_string(version) + ", this build reads schema " +
                        std::to_string(MetricsReport::kSchemaVersion));
    }
    MetricsReport r;
    r.run_name = j.at("run_name").get<std::string>();
    r.variant = j.at("variant").get<std::string>();
    r.pretrained = j.at("pretrained").get<bool>();
    r.macro_f1 = j.at("macro_f1").get<double>();
    r.best_epoch = j.at("best_epoch").get<std::size_t>();
    r.overfit_gap = j.at("overfit_gap").get<double>();
    const json& c = j.at("confusion");
    r.confusion.k = c.at("k").get<std::size_t>();
    r.confusion.class_names = c.at("class_names").get<std::vector<std::string>>();
    r.confusion.counts = c.at("counts").get<std::vector<std::uint64_t>>();
    if (r.confusion.counts.size() != r.confusion.k * r.confusion.k) throw FormatError("confusion counts are not k x k");
    for (const json& s : j.at("per_class")) {
      r.per_class.push_back({s.at("precision").get<double>(), s.at("recall").get<double>(), s.at("f1").get<double>(),
                             s.at("support").get<std::uint64_t>()});
    }
    const json& cb = j.at("chance_baseline");
    r.chance.mean = cb.at("monte_carlo_mean").get<double>();
    r.chance.std_error = cb.at("std_error").get<double>();
    r.chance.trials = cb.at("trials").get<std::size_t>();
    r.chance.quoted_reference = cb.at("quoted_reference").get<double>();
    for (const json& h : j.at("history")) {
      r.history.push_back({h.at("epoch").get<std::size_t>(), h.at("split").get<std::string>(),
                           h.at("metric").get<std::string>(), h.at("value").get<double>()});
    }
    r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    r.split_fingerprint = j.at("split_fingerprint").get<std::string>();
    r.split_sizes = j.at("split_sizes").get<std::map<std::string, std::size_t>>();
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed metrics report: ") + e.what());
  }
}

void write_report(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << report_to_json(report);
  if (!out) throw FormatError("failed writing " + path.string());
}

MetricsReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("metrics report not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return report_from_json(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string confusion_table(const ConfusionMatrix& cm) {
  std::vector<std::string> names = cm.class_names;
  names.resize(cm.k);
  for (std::size_t i = 0; i < cm.k; ++i) {
    if (names[i].empty()) names[i] = std::to_string(i);
  }
  std::size_t w = 4;
  for (const auto& n : names) w = std::max(w, n.size());
  for (auto c : cm.counts) w = std::max(w, std::to_string(c).size());
  std::ostringstream os;
  os << std::setw(static_cast<int>(w)) << "t\\p";
  for (const auto& n : names) os << ' ' << std::setw(static_cast<int>(w)) << n;
  os << '\n';
  for (std::size_t t = 0; t < cm.k; ++t) {
    os << std::setw(static_cast<int>(w)) << names[t];
    for (std::size_t p = 0; p < cm.k; ++p) os << ' ' << std::setw(static_cast<int>(w)) << cm.at(t, p);
    os << '\n';
  }
  return os.str();
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw Error("SHA-256 computation failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string fingerprint(const std::map<std::string, std::string>& fields) {
  std::string canonical;
  for (const auto& [k, v] : fields) canonical += k + "=" + v + "\n";
  return sha256_hex(canonical);
}

}  // namespace vqmir::eval
