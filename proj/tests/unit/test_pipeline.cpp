#include <fstream>
#include <sstream>

#include "doctest.h"
#include "support/testing.hpp"
#include "vqmir/error.hpp"
#include "vqmir/pipeline/pipeline.hpp"

using namespace vqmir;
using namespace vqmir::pipeline;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(
# small enough for a unit test
run_name = tiny
data.n_genres = 3
data.tracks_per_genre = 8
data.clip_seconds = 0.6
data.sample_rate = 8000
spectrogram.n_mels = 16
model.d_model = 16
model.n_heads = 2
model.n_layers = 1
model.max_seq_len = 24
pretrain.epochs = 2
finetune.epochs = 3
vqvae.vocab_size = 32
vqvae.code_dim = 8
vqvae.channels = 8
vqvae.compression = 16
vqvae.steps = 3
vqvae.crop_samples = 1024
eval.chance_trials = 1000
)";

ExperimentConfig tiny(const fs::path& out) {
  auto c = parse_config(kTiny);
  c.out = out;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config parses, validates and round-trips") {
  const ExperimentConfig d;
  CHECK(d.finetune_lr == 2e-5);
  CHECK(d.finetune_batch == 16);
  CHECK(d.mask.token_mask_prob == 0.30);
  CHECK(d.vqvae.vocab_size == 2048);
  CHECK(d.vqvae.compression == 128);

  const auto c = parse_config(kTiny);
  CHECK(c.synth.n_genres == 3);
  CHECK(c.model.d_model == 16);
  const auto again = parse_config(format_config(c));
  CHECK(config_to_map(again) == config_to_map(c));
  CHECK(config_fingerprint(again) == config_fingerprint(c));

  auto renamed = c;
  renamed.run_name = "other";
  renamed.out = "/elsewhere";
  CHECK(config_fingerprint(renamed) == config_fingerprint(c));

  CHECK_THROWS_WITH_AS(parse_config("model.d_modle = 4"), doctest::Contains("model.d_modle"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("seed = minus one"), doctest::Contains("seed"), ConfigError);
  CHECK_THROWS_AS(parse_config("seed"), ConfigError);
  CHECK_THROWS_AS(parse_config("seed = 1\nseed = 2"), ConfigError);
  CHECK_THROWS_AS(parse_config("model.d_model = 30\nmodel.n_heads = 4"), ConfigError);
  CHECK_THROWS_AS(parse_config("split.train = 0.9"), ConfigError);
  CHECK_THROWS_AS(parse_config("data.source = fma-import"), ConfigError);
  CHECK(parse_config("mask.spectro_pcts = 10, 20").mask.spectro_mask_pcts == std::vector<double>{10, 20});
}

TEST_CASE("stage plan prunes dependencies") {
  const auto base = tiny("/tmp/none");
  auto edited = base;
  edited.mask.token_mask_prob = 0.4;
  const auto a = plan_stages(base), b = plan_stages(edited);
  CHECK(a[0].fingerprint == b[0].fingerprint);
  CHECK(a[1].fingerprint == b[1].fingerprint);
  CHECK(a[2].fingerprint == b[2].fingerprint);
  CHECK(a[3].fingerprint != b[3].fingerprint);
  CHECK(a[4].fingerprint != b[4].fingerprint);
  CHECK(a[5].fingerprint != b[5].fingerprint);

  CHECK(a[1].required);
  CHECK_FALSE(a[2].required);
  auto tok = base;
  tok.variant = models::ModelVariant::Token;
  const auto t = plan_stages(tok);
  CHECK_FALSE(t[1].required);
  CHECK(t[2].required);
  CHECK(t[2].fingerprint == a[2].fingerprint);  // codec is shared between variants
  CHECK(t[0].fingerprint == a[0].fingerprint);

  auto scratch = base;
  scratch.pretrain = false;
  const auto s = plan_stages(scratch);
  CHECK_FALSE(s[3].required);
  CHECK(s[4].inputs.count("mask.token_prob") == 0);

  auto reseeded = base;
  reseeded.seed = 9;
  CHECK(plan_stages(reseeded)[0].fingerprint != a[0].fingerprint);

  CHECK(parse_stage_list("all").size() == kNumStages);
  CHECK(parse_stage_list("ingest,finetune") == std::vector<Stage>{Stage::Ingest, Stage::Finetune});
  CHECK_THROWS_AS(parse_stage_list("ingest,bogus"), ConfigError);
}

TEST_CASE("full run, idempotent rerun, stale refusal and pruning") {
  testing::TempDir tmp("pipeline_full");
  const auto c = tiny(tmp.path);
  const auto m = run_pipeline(c, all_stages());
  for (const auto& s : m.stages) {
    INFO(s.name);
    CHECK(s.complete == s.required);
    CHECK_FALSE(s.reused);
  }
  REQUIRE(fs::exists(m.report));
  const auto report = eval::read_report(m.report);
  CHECK(report.run_name == "tiny");
  CHECK(report.variant == "spectro");
  CHECK(report.pretrained);
  CHECK(report.confusion.k == 3);
  CHECK(report.chance.trials == 1000);
  CHECK(report.config_fingerprint == config_fingerprint(c));
  const std::string bytes = slurp(m.report);

  // Manifest round trip.
  const auto disk = read_manifest(manifest_path(c));
  CHECK(disk == m);
  CHECK(manifest_from_json(manifest_to_json(disk)) == disk);

  // Unchanged rerun: everything skipped, same report.
  const auto again = run_pipeline(c, all_stages());
  for (const auto& s : again.stages)
    if (s.required) CHECK(s.reused);
  CHECK(slurp(again.report) == bytes);

  // Edited mask probability, but only finetune requested: pretrain is stale.
  auto edited = c;
  edited.mask.token_mask_prob = 0.4;
  try {
    run_pipeline(edited, {Stage::Finetune});
    FAIL("stale pretrain output accepted");
  } catch (const ArtifactError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("stale") != std::string::npos);
    CHECK(msg.find("mask.token_prob: 0.3 -> 0.4") != std::string::npos);
    CHECK(msg.find("pretrain") != std::string::npos);
  }

  // Full rerun with the edit: only the downstream stages run.
  const auto pruned = run_pipeline(edited, all_stages());
  CHECK(pruned.stage(Stage::Ingest).reused);
  CHECK(pruned.stage(Stage::Preprocess).reused);
  CHECK_FALSE(pruned.stage(Stage::Pretrain).reused);
  CHECK_FALSE(pruned.stage(Stage::Finetune).reused);
  CHECK_FALSE(pruned.stage(Stage::Evaluate).reused);
  CHECK(pruned.stage(Stage::Pretrain).complete);
  // The earlier outputs are untouched.
  CHECK(slurp(m.report) == bytes);
}

TEST_CASE("missing upstream output and missing feature cache") {
  testing::TempDir tmp("pipeline_missing");
  const auto c = tiny(tmp.path);
  CHECK_THROWS_WITH_AS(run_pipeline(c, {Stage::Preprocess}), doctest::Contains("ingest"), ArtifactError);
  run_pipeline(c, {Stage::Ingest, Stage::Preprocess});
  const auto plans = plan_stages(c);
  fs::path victim;
  for (const auto& e : fs::directory_iterator(plans[1].dir / "mel")) {
    victim = e.path();
    break;
  }
  fs::remove(victim);
  const std::string track = victim.stem().string();
  CHECK_THROWS_WITH_AS(load_examples(c), doctest::Contains(track.c_str()), ArtifactError);
  CHECK_THROWS_WITH_AS(run_pipeline(c, {Stage::Pretrain}), doctest::Contains(track.c_str()), ArtifactError);
  // A failed stage leaves no complete output behind.
  CHECK_FALSE(fs::exists(plans[3].dir / "COMPLETE"));
}

TEST_CASE("interrupted pipeline resumes to the same report") {
  testing::TempDir a("pipeline_resume_a"), b("pipeline_resume_b");
  auto ca = tiny(a.path), cb = tiny(b.path);
  const auto straight = run_pipeline(ca, all_stages());

  PipelineHooks stop;
  stop.interrupt = [](Stage s, std::size_t epoch) { return s == Stage::Finetune && epoch == 2; };
  CHECK_THROWS_AS(run_pipeline(cb, all_stages(), stop), Interrupted);
  const auto partial = read_manifest(manifest_path(cb));
  CHECK(partial.stage(Stage::Pretrain).complete);
  CHECK_FALSE(partial.stage(Stage::Finetune).complete);
  CHECK(partial.report.empty());

  std::vector<std::string> lines;
  PipelineHooks logger;
  logger.log = [&](const std::string& s) { lines.push_back(s); };
  const auto resumed = run_pipeline(cb, all_stages(), logger);
  CHECK(resumed.stage(Stage::Pretrain).reused);
  bool saw_resume = false;
  for (const auto& l : lines) saw_resume |= l.find("resuming after epoch 2") != std::string::npos;
  CHECK(saw_resume);
  CHECK(slurp(resumed.report) == slurp(straight.report));
}

TEST_CASE("six-configuration grid and comparison guard") {
  testing::TempDir tmp("pipeline_grid");
  auto base = tiny(tmp.path);
  base.run_name = "g";
  std::vector<eval::MetricsReport> reports;
  for (const auto& c : grid_configs(base)) {
    const auto m = run_pipeline(c, all_stages());
    reports.push_back(eval::read_report(m.report));
  }
  REQUIRE(reports.size() == 6);
  const auto cmp = compare_variants(reports);
  CHECK(cmp.rows.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(cmp.rows[i].macro_f1 == reports[i].macro_f1);
  CHECK(cmp.pretrain_delta.size() == 3);
  const auto table = comparison_table(cmp);
  CHECK(table.find("g-codebook-scratch") != std::string::npos);
  CHECK(table.find("chance") != std::string::npos);

  auto other = tiny(tmp.path);
  other.seed = 5;
  other.run_name = "reseeded";
  other.pretrain = false;
  reports.push_back(eval::read_report(run_pipeline(other, all_stages()).report));
  CHECK_THROWS_WITH_AS(compare_variants(reports), doctest::Contains("reseeded"), ConfigError);
}

TEST_CASE("verification checks") {
  testing::TempDir tmp("pipeline_verify");
  const auto c = tiny(tmp.path);
  CHECK_THROWS_AS(run_verification(c), ArtifactError);
  run_pipeline(c, {Stage::Ingest});
  const auto checks = run_verification(c);
  CHECK(checks.size() >= 9);
  for (const auto& ch : checks) {
    INFO(ch.name, ": ", ch.detail);
    CHECK(ch.passed);
  }
}
