#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "vqmir/error.hpp"
#include "vqmir/evalkit/metrics.hpp"

using namespace vqmir;
using namespace vqmir::eval;

namespace {

ConfusionMatrix from_rows(std::vector<std::vector<std::uint64_t>> rows) {
  ConfusionMatrix cm;
  cm.k = rows.size();
  for (const auto& r : rows) cm.counts.insert(cm.counts.end(), r.begin(), r.end());
  return cm;
}

// Expands the matrix into (truth, pred) pairs and tallies TP/FP/FN by scanning them.
double brute_force_macro_f1(const ConfusionMatrix& cm) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t t = 0; t < cm.k; ++t)
    for (std::size_t p = 0; p < cm.k; ++p)
      for (std::uint64_t n = 0; n < cm.at(t, p); ++n) pairs.emplace_back(t, p);
  double sum = 0.0;
  for (std::size_t c = 0; c < cm.k; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (const auto& [t, p] : pairs) {
      if (t == c && p == c) tp += 1;
      if (t != c && p == c) fp += 1;
      if (t == c && p != c) fn += 1;
    }
    // F1 = 2TP / (2TP + FP + FN), which is 0 whenever TP = 0.
    sum += tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
  }
  return sum / static_cast<double>(cm.k);
}

// Expected macro-F1 of a uniform predictor by enumerating every prediction vector.
double exact_chance(std::size_t k, const std::vector<std::uint64_t>& counts) {
  std::vector<int> truths;
  for (std::size_t c = 0; c < k; ++c) truths.insert(truths.end(), counts[c], static_cast<int>(c));
  const std::size_t n = truths.size();
  std::vector<int> preds(n, 0);
  double total = 0.0;
  std::size_t combos = 0;
  while (true) {
    total += macro_f1(confusion_matrix(truths, preds, k));
    ++combos;
    std::size_t i = 0;
    while (i < n && ++preds[i] == static_cast<int>(k)) preds[i++] = 0;
    if (i == n) break;
  }
  return total / static_cast<double>(combos);
}

}  // namespace

TEST_CASE("confusion matrix tallies") {
  const std::vector<int> t{0, 0, 1, 1}, p{0, 1, 1, 1};
  const ConfusionMatrix cm = confusion_matrix(t, p, 2);
  CHECK(cm.counts == std::vector<std::uint64_t>{1, 1, 0, 2});
  CHECK(cm.total() == 4);
  const ConfusionMatrix perfect = confusion_matrix(t, t, 3);
  CHECK(perfect.counts == std::vector<std::uint64_t>{2, 0, 0, 0, 2, 0, 0, 0, 0});
  const ConfusionMatrix empty = confusion_matrix({}, {}, 4);
  CHECK(empty.counts == std::vector<std::uint64_t>(16, 0));
  const std::vector<int> short_p{0, 1};
  CHECK_THROWS_AS(confusion_matrix(t, short_p, 2), ShapeError);
  const std::vector<int> bad{0, 0, 2, 1};
  CHECK_THROWS_AS(confusion_matrix(t, bad, 2), ShapeError);
}

TEST_CASE("macro F1 reference values") {
  const ConfusionMatrix cm = from_rows({{1, 1}, {0, 2}});
  const auto s = class_scores(cm);
  CHECK(s[0].f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(s[1].f1 == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(macro_f1(cm) == doctest::Approx(0.7333333333333333).epsilon(1e-15));
  CHECK(macro_f1(from_rows({{3, 0, 0}, {0, 5, 0}, {0, 0, 1}})) == 1.0);

  // Everything predicted as class 0, 16 balanced classes: F1_0 = 2/17, the rest 0.
  ConfusionMatrix one(from_rows(std::vector<std::vector<std::uint64_t>>(16, std::vector<std::uint64_t>(16, 0))));
  for (std::size_t t = 0; t < 16; ++t) one.counts[t * 16] = 5;
  CHECK(macro_f1(one) == doctest::Approx(2.0 / 17.0 / 16.0).epsilon(1e-14));
  CHECK(2.0 / 17.0 / 16.0 == doctest::Approx(0.00735294117647).epsilon(1e-10));

  // Zero support and zero predictions for class 2: it counts as F1 0.
  CHECK(macro_f1(from_rows({{2, 0, 0}, {0, 2, 0}, {0, 0, 0}})) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(macro_f1(from_rows({{4}})), ConfigError);
}

TEST_CASE("macro F1 equals a brute-force oracle on 1000 random matrices") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 8)(rng);
    ConfusionMatrix cm;
    cm.k = k;
    cm.counts.resize(k * k);
    for (auto& c : cm.counts) c = std::uniform_int_distribution<std::uint64_t>(0, 20)(rng);
    const double f = macro_f1(cm);
    CHECK(std::abs(f - brute_force_macro_f1(cm)) <= 1e-12);

    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    ConfusionMatrix permuted = cm;
    for (std::size_t t = 0; t < k; ++t)
      for (std::size_t p = 0; p < k; ++p) permuted.counts[perm[t] * k + perm[p]] = cm.at(t, p);
    CHECK(std::abs(macro_f1(permuted) - f) <= 1e-12);

    ConfusionMatrix scaled = cm;
    for (auto& c : scaled.counts) c *= 7;
    CHECK(std::abs(macro_f1(scaled) - f) <= 1e-12);
  }
}

TEST_CASE("chance baseline agrees with exhaustive enumeration") {
  for (const auto& [k, counts] : std::vector<std::pair<std::size_t, std::vector<std::uint64_t>>>{
           {2, {2, 2}}, {2, {3, 3}}, {3, {2, 1, 1}}, {4, {2, 2, 1, 1}}}) {
    const double exact = exact_chance(k, counts);
    const ChanceBaseline mc = chance_baseline(k, counts, 40000, 5);
    INFO("k=", k, " exact=", exact, " mc=", mc.mean, " se=", mc.std_error);
    CHECK(std::abs(mc.mean - exact) < 4.0 * mc.std_error);
  }
  CHECK_THROWS_AS(chance_baseline(2, std::vector<std::uint64_t>{2, 2}, 999, 0), ConfigError);
}

TEST_CASE("chance baseline for 16 genres sits beside the 0.11 reference") {
  const std::vector<std::uint64_t> counts(16, 20);
  const ChanceBaseline b = chance_baseline(16, counts, 10000, 1);
  MESSAGE("K=16 chance macro-F1 ", b.mean, " +/- ", b.std_error, " (reference ", b.quoted_reference, ")");
  CHECK(b.quoted_reference == 0.11);
  CHECK(b.trials == 10000);
  // Large balanced samples approach 1/K.
  CHECK(b.mean == doctest::Approx(1.0 / 16.0).epsilon(0.05));
}

TEST_CASE("chance baseline standard error scales as 1/sqrt(trials)") {
  const std::vector<std::uint64_t> counts{5, 10, 15, 20};
  const ChanceBaseline a = chance_baseline(4, counts, 4000, 2);
  const ChanceBaseline b = chance_baseline(4, counts, 8000, 3);
  const ChanceBaseline c = chance_baseline(4, counts, 16000, 4);
  CHECK(b.std_error / a.std_error == doctest::Approx(std::sqrt(0.5)).epsilon(0.1));
  CHECK(c.std_error / a.std_error == doctest::Approx(0.5).epsilon(0.1));
}

TEST_CASE("history lines round trip") {
  const std::vector<HistoryRecord> h{{1, "train", "pretrain_loss", 7.25}, {1, "validation", "macro_f1", 0.1 + 0.2}};
  const std::string tsv = history_tsv(h);
  CHECK(tsv.find("1\ttrain\tpretrain_loss\t7.25\n") == 0);
  CHECK(parse_history_tsv(tsv) == h);
  CHECK_THROWS_AS(parse_history_tsv("1\ttrain\tloss\n"), FormatError);
  CHECK_THROWS_AS(parse_history_tsv("1\ttrain\tloss\tabc\n"), FormatError);
}

TEST_CASE("metrics report consistency and round trip") {
  ConfusionMatrix cm = from_rows({{3, 1, 0}, {0, 2, 2}, {1, 0, 3}});
  cm.class_names = {"rock", "jazz", "electronic"};
  std::vector<HistoryRecord> h{{1, "train", "finetune_loss", 1.0}, {1, "validation", "finetune_loss", 1.3},
                               {1, "validation", "macro_f1", 0.66}};
  MetricsReport r = build_report("run", "spectro", true, cm, h, 1, chance_baseline(3, std::vector<std::uint64_t>{4, 4, 4}, 1000, 0),
                                 "abc", "def");
  CHECK(r.macro_f1 == macro_f1(cm));
  double mean = 0.0;
  for (const auto& s : r.per_class) mean += s.f1 / 3.0;
  CHECK(r.macro_f1 == doctest::Approx(mean).epsilon(1e-15));
  CHECK(r.overfit_gap == doctest::Approx(0.3).epsilon(1e-12));
  r.split_sizes = {{"train", 10}, {"validation", 12}};

  const std::string js = report_to_json(r);
  CHECK(js.find("schema_version") != std::string::npos);
  CHECK(js.find("time") == std::string::npos);
  const MetricsReport back = report_from_json(js);
  CHECK(back == r);
  CHECK(report_to_json(back) == js);
  CHECK(back.macro_f1 == macro_f1(back.confusion));

  std::string wrong = js;
  wrong.replace(wrong.find("\"schema_version\": 1"), 19, "\"schema_version\": 9");
  CHECK_THROWS_AS(report_from_json(wrong), FormatError);
  CHECK_THROWS_AS(report_from_json("{"), FormatError);
  CHECK_THROWS_AS(build_report("x", "token", false, cm, {}, 0, {}, "", ""), Error);
}

TEST_CASE("confusion table is aligned") {
  ConfusionMatrix cm = from_rows({{120, 3}, {0, 7}});
  cm.class_names = {"a", "electronic"};
  const std::string table = confusion_table(cm);
  std::istringstream is(table);
  std::string line;
  std::size_t width = 0, lines = 0;
  while (std::getline(is, line)) {
    if (width == 0) width = line.size();
    CHECK(line.size() == width);
    ++lines;
  }
  CHECK(lines == 3);
  CHECK(table.find("electronic") != std::string::npos);
}

TEST_CASE("sha-256 and fingerprints") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  const std::string a = fingerprint({{"lr", "2e-5"}, {"batch", "16"}});
  CHECK(a == fingerprint({{"batch", "16"}, {"lr", "2e-5"}}));
  CHECK(a != fingerprint({{"batch", "16"}, {"lr", "1e-5"}}));
  CHECK(a != fingerprint({{"batch", "16"}, {"lr", "2e-5"}, {"seed", "0"}}));
}
