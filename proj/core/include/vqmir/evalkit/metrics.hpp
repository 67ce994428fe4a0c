#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace vqmir::eval {

// Rows are ground truth, columns are predictions.
struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::uint64_t> counts;  // k * k, row-major
  std::vector<std::string> class_names;

  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * k + pred]; }
  std::uint64_t total() const;
  bool operator==(const ConfusionMatrix&) const = default;
};

ConfusionMatrix confusion_matrix(std::span<const int> truths, std::span<const int> preds, std::size_t k);

struct ClassScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::uint64_t support = 0;
  bool operator==(const ClassScore&) const = default;
};

// Zero denominators give 0 for the affected quantity.
std::vector<ClassScore> class_scores(const ConfusionMatrix& cm);
// Unweighted mean of per-class F1 over all k classes.
double macro_f1(const ConfusionMatrix& cm);

// The figure quoted for a 16-way random guess.
inline constexpr double kQuotedChanceF1 = 0.11;

struct ChanceBaseline {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t trials = 0;
  double quoted_reference = kQuotedChanceF1;
  bool operator==(const ChanceBaseline&) const = default;
};

// Macro-F1 of a predictor drawing labels uniformly from k classes, for the
// given ground-truth class counts, estimated over `trials` Monte-Carlo draws.
ChanceBaseline chance_baseline(std::size_t k, std::span<const std::uint64_t> class_counts, std::size_t trials,
                               std::uint64_t seed);

// One line of a loss or metric curve.
struct HistoryRecord {
  std::size_t epoch = 0;
  std::string split;   // train | validation | test
  std::string metric;  // e.g. pretrain_loss, finetune_loss, macro_f1
  double value = 0.0;
  bool operator==(const HistoryRecord&) const = default;
};

// Tab-separated "epoch split metric value" lines.
std::string history_tsv(std::span<const HistoryRecord> history);
std::vector<HistoryRecord> parse_history_tsv(const std::string& text);

struct MetricsReport {
  static constexpr int kSchemaVersion = 1;

  std::string run_name;
  std::string variant;
  bool pretrained = false;
  ConfusionMatrix confusion;  // validation set at the best epoch
  std::vector<ClassScore> per_class;
  double macro_f1 = 0.0;
  std::size_t best_epoch = 0;
  ChanceBaseline chance;
  // validation loss - train loss at the best epoch; positive means overfitting.
  double overfit_gap = 0.0;
  std::vector<HistoryRecord> history;
  std::string config_fingerprint;
  std::string split_fingerprint;
  std::map<std::string, std::size_t> split_sizes;

  bool operator==(const MetricsReport&) const = default;
};

// Fills per-class scores, macro-F1, best epoch and overfit gap from the
// confusion matrix and history. Throws when the history is empty.
MetricsReport build_report(std::string run_name, std::string variant, bool pretrained, ConfusionMatrix confusion,
                           std::vector<HistoryRecord> history, std::size_t best_epoch, ChanceBaseline chance,
                           std::string config_fingerprint, std::string split_fingerprint);

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);
void write_report(const std::filesystem::path& path, const MetricsReport& report);
MetricsReport read_report(const std::filesystem::path& path);

// Aligned plain-text confusion table with row/column class labels.
std::string confusion_table(const ConfusionMatrix& cm);

// Lower-case hex SHA-256.
std::string sha256_hex(const std::string& bytes);
// SHA-256 of the sorted "key=value\n" lines.
std::string fingerprint(const std::map<std::string, std::string>& fields);

}  // namespace vqmir::eval
