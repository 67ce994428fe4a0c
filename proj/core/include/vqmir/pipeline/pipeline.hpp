#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vqmir/datalab/dataset.hpp"
#include "vqmir/dsp/spectrogram.hpp"
#include "vqmir/evalkit/metrics.hpp"
#include "vqmir/models/transformer.hpp"
#include "vqmir/training/trainer.hpp"
#include "vqmir/vqcodec/vqvae.hpp"

namespace vqmir::pipeline {

enum class DataSource { Synthetic, FmaImport };

struct ExperimentConfig {
  std::string run_name = "run";
  std::filesystem::path out = "runs";
  std::uint64_t seed = 0;
  Precision precision = Precision::F64;

  DataSource source = DataSource::Synthetic;
  data::SynthCorpusSpec synth;  // seed comes from `seed`
  std::filesystem::path metadata_path, taxonomy_path;
  data::MultiRootPolicy multi_root = data::MultiRootPolicy::Reject;
  data::SplitRatios split;

  dsp::SpectrogramConfig spectrogram;
  vq::VqVaeConfig vqvae;
  vq::VqTrainOptions vq_train;

  models::ModelVariant variant = models::ModelVariant::Spectro;
  models::TransformerConfig model;
  models::MaskConfig mask;
  AdamConfig adam;

  bool pretrain = true;
  std::size_t pretrain_epochs = 20;
  std::size_t pretrain_batch = 16;
  double pretrain_peak_lr = 1e-3;
  double warmup_fraction = 0.1;

  std::size_t finetune_epochs = 100;
  std::size_t finetune_batch = 16;
  double finetune_lr = 2e-5;
  bool class_weighting = true;

  std::size_t chance_trials = 10000;

  ExperimentConfig();
  void validate() const;
};

// Canonical "key -> value" form. Every key is always present.
std::map<std::string, std::string> config_to_map(const ExperimentConfig& config);
// Starts from defaults; unknown keys and malformed values raise ConfigError.
ExperimentConfig config_from_map(const std::map<std::string, std::string>& values);
// "key = value" lines; '#' starts a comment.
std::map<std::string, std::string> parse_key_values(const std::string& text);
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig read_config(const std::filesystem::path& path);
std::string format_config(const ExperimentConfig& config);
// Fingerprint of everything except run_name and out.
std::string config_fingerprint(const ExperimentConfig& config);

enum class Stage { Ingest, Preprocess, TrainVqvae, Pretrain, Finetune, Evaluate };
inline constexpr std::size_t kNumStages = 6;
const char* stage_name(Stage s);
Stage parse_stage(const std::string& s);
// Comma-separated names, or "all".
std::vector<Stage> parse_stage_list(const std::string& s);
std::vector<Stage> all_stages();

struct StageRecord {
  std::string name;
  bool required = true;  // false: not used by this variant / pretraining off
  std::string fingerprint;
  std::filesystem::path dir;
  bool complete = false;
  bool reused = false;  // skipped because a matching complete output existed
  std::string started, finished;
  bool operator==(const StageRecord&) const = default;
};

struct RunManifest {
  static constexpr int kSchemaVersion = 1;
  std::string run_name;
  std::string config_fingerprint;
  std::map<std::string, std::string> config;
  std::vector<StageRecord> stages;  // always kNumStages entries, in order
  std::filesystem::path report;     // empty until evaluate completes
  bool operator==(const RunManifest&) const = default;

  const StageRecord& stage(Stage s) const { return stages.at(static_cast<std::size_t>(s)); }
};

std::string manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const std::string& text);
std::filesystem::path manifest_path(const ExperimentConfig& config);
RunManifest read_manifest(const std::filesystem::path& path);

// Stage layout: <out>/stages/<stage>/<fingerprint prefix>/ with a COMPLETE
// marker. Work happens in a ".partial" sibling that is renamed on success.
struct StagePlan {
  Stage stage;
  bool required = true;
  std::string fingerprint;
  std::map<std::string, std::string> inputs;  // config keys this stage depends on, transitively
  std::filesystem::path dir;
};
std::vector<StagePlan> plan_stages(const ExperimentConfig& config);

struct PipelineHooks {
  std::function<void(const std::string&)> log;
  // Called after each training epoch (1-based count); returning true aborts the run.
  std::function<bool(Stage, std::size_t epoch)> interrupt;
};

class Interrupted : public Error {
 public:
  using Error::Error;
};

// Runs the requested stages in pipeline order. Complete stages with a matching
// fingerprint are skipped. A required upstream stage that is neither complete
// nor requested raises ArtifactError; when the run manifest shows it was built
// from different settings, the message lists the changed keys.
RunManifest run_pipeline(const ExperimentConfig& config, const std::vector<Stage>& stages,
                         const PipelineHooks& hooks = {});

// Inputs of the training stages, loaded from complete stage outputs.
struct LoadedData {
  std::vector<std::string> class_names;
  std::vector<train::Example> train, validation, test;
  models::InputDims dims;
};
// Throws ArtifactError naming the track when a feature cache is missing.
LoadedData load_examples(const ExperimentConfig& config);

struct ComparisonRow {
  std::string run_name;
  std::string variant;
  bool pretrained = false;
  double macro_f1 = 0.0;
  std::size_t best_epoch = 0;
};

struct Comparison {
  std::vector<ComparisonRow> rows;
  eval::ChanceBaseline chance;
  // variant -> pretrained minus scratch macro-F1, when both runs exist
  std::map<std::string, double> pretrain_delta;
  std::string split_fingerprint;
};

// Refuses reports whose split fingerprints differ, naming the runs.
Comparison compare_variants(const std::vector<eval::MetricsReport>& reports);
std::string comparison_table(const Comparison& c);

// Six configurations: spectro, token, codebook, each pretrained and scratch.
// Run names are "<base run_name>-<variant>-<pretrained|scratch>".
std::vector<ExperimentConfig> grid_configs(const ExperimentConfig& base);

struct VerifyCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};
// Split checks need a complete ingest stage (ArtifactError otherwise); the
// gradient and oracle checks are self-contained.
std::vector<VerifyCheck> run_verification(const ExperimentConfig& config);

}  // namespace vqmir::pipeline
