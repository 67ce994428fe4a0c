#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vqmir/error.hpp"
#include "vqmir/pipeline/pipeline.hpp"

namespace fs = std::filesystem;
using namespace vqmir;
using namespace vqmir::pipeline;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kVerify = 3, kArtifact = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string precision;
  std::string out;
  std::string stages;
  std::vector<std::string> set;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c, bool with_stages = false) {
  app->add_option("--config", c.config, "experiment config file (key = value lines)");
  app->add_option("--seed", c.seed, "seed for data, split, masking, init and batch order");
  app->add_option("--precision", c.precision, "weight storage precision")->check(CLI::IsMember({"f32", "f64"}));
  app->add_option("--out", c.out, "output directory");
  app->add_option("--set", c.set, "override one config key, key=value (repeatable)");
  app->add_flag("-q,--quiet", c.quiet, "no progress output");
  if (with_stages) app->add_option("--stages", c.stages, "comma-separated stages, or all");
}

ExperimentConfig load(const Common& c) {
  std::map<std::string, std::string> kv;
  if (!c.config.empty()) {
    std::ifstream f(c.config, std::ios::binary);
    if (!f) throw ConfigError("cannot open config file " + c.config);
    std::stringstream ss;
    ss << f.rdbuf();
    kv = parse_key_values(ss.str());
  }
  for (const auto& s : c.set) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    kv[s.substr(0, eq)] = s.substr(eq + 1);
  }
  if (c.seed) kv["seed"] = std::to_string(*c.seed);
  if (!c.precision.empty()) kv["precision"] = c.precision;
  if (!c.out.empty()) kv["out"] = c.out;
  return config_from_map(kv);
}

PipelineHooks hooks(const Common& c) {
  PipelineHooks h;
  if (!c.quiet) h.log = [](const std::string& s) { std::cerr << "[vqmir] " << s << "\n"; };
  return h;
}

int run_stages(const Common& c, const std::vector<Stage>& stages) {
  const auto cfg = load(c);
  const auto m = run_pipeline(cfg, stages, hooks(c));
  std::cout << "manifest: " << manifest_path(cfg).string() << "\n";
  if (!m.report.empty()) {
    const auto r = eval::read_report(m.report);
    std::cout << "report: " << m.report.string() << "\n"
              << "validation macro-F1 " << r.macro_f1 << " (best epoch " << r.best_epoch << "), chance "
              << r.chance.mean << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vqmir: music genre classification with spectrogram, token and codebook transformers"};
  app.require_subcommand(1);
  Common common;
  std::vector<std::pair<CLI::App*, std::vector<Stage>>> stage_cmds;

  auto* synth = app.add_subcommand("synth-data", "generate the synthetic corpus and its split");
  add_common(synth, common);
  stage_cmds.push_back({synth, {Stage::Ingest}});
  for (auto [name, stage, help] : std::vector<std::tuple<const char*, Stage, const char*>>{
           {"ingest", Stage::Ingest, "resolve genres and split the configured dataset"},
           {"preprocess", Stage::Preprocess, "build Mel spectrogram caches"},
           {"train-vqvae", Stage::TrainVqvae, "train the VQ-VAE and write token caches"},
           {"pretrain", Stage::Pretrain, "masked pretraining"},
           {"finetune", Stage::Finetune, "genre finetuning"},
           {"evaluate", Stage::Evaluate, "write the metrics report"}}) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub, common);
    stage_cmds.push_back({sub, {stage}});
  }
  auto* run = app.add_subcommand("run", "run several stages in order (default all)");
  add_common(run, common, true);

  auto* compare = app.add_subcommand("compare", "run the six-configuration grid, or compare existing reports");
  add_common(compare, common);
  std::vector<std::string> report_paths;
  compare->add_option("--reports", report_paths, "compare these report.json files instead of running the grid");

  auto* verify = app.add_subcommand("verify", "split, gradient and oracle checks");
  add_common(verify, common);

  auto* show = app.add_subcommand("show-config", "print the resolved configuration");
  add_common(show, common);

  auto* fma = app.add_subcommand("import-fma", "convert FMA csv metadata into metadata.tsv and taxonomy.tsv");
  std::string tracks_csv, genres_csv, audio_dir, fma_out, subset;
  fma->add_option("--tracks-csv", tracks_csv, "FMA tracks.csv")->required();
  fma->add_option("--genres-csv", genres_csv, "FMA genres.csv")->required();
  fma->add_option("--audio-dir", audio_dir, "root of the NNN/NNNNNN.wav tree")->required();
  fma->add_option("--out", fma_out, "output directory")->required();
  fma->add_option("--subset", subset, "small, medium, large or full");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    for (auto& [sub, stages] : stage_cmds) {
      if (!sub->parsed()) continue;
      if (sub == synth) {
        common.set.insert(common.set.begin(), "data.source=synthetic");
      }
      return run_stages(common, stages);
    }
    if (run->parsed()) return run_stages(common, parse_stage_list(common.stages));

    if (show->parsed()) {
      std::cout << format_config(load(common));
      return kOk;
    }

    if (compare->parsed()) {
      std::vector<eval::MetricsReport> reports;
      fs::path out_file;
      if (!report_paths.empty()) {
        for (const auto& p : report_paths) {
          if (!fs::exists(p)) throw ArtifactError("missing artifact: report " + p);
          reports.push_back(eval::read_report(p));
        }
      } else {
        const auto base = load(common);
        for (const auto& cfg : grid_configs(base)) {
          if (!common.quiet) std::cerr << "[vqmir] == " << cfg.run_name << " ==\n";
          const auto m = run_pipeline(cfg, all_stages(), hooks(common));
          reports.push_back(eval::read_report(m.report));
        }
        out_file = base.out / ("compare-" + base.run_name + ".txt");
      }
      const auto table = comparison_table(compare_variants(reports));
      std::cout << table;
      if (!out_file.empty()) std::ofstream(out_file, std::ios::binary) << table;
      return kOk;
    }

    if (verify->parsed()) {
      const auto checks = run_verification(load(common));
      bool ok = true;
      for (const auto& c : checks) {
        std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
        ok = ok && c.passed;
      }
      return ok ? kOk : kVerify;
    }

    if (fma->parsed()) {
      const auto r = data::import_fma(tracks_csv, genres_csv, audio_dir, fma_out, subset);
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << r.tracks << " tracks imported, " << r.skipped << " skipped\n"
                << "data.source = fma-import\n"
                << "data.metadata = " << (fs::path(fma_out) / "metadata.tsv").string() << "\n"
                << "data.taxonomy = " << (fs::path(fma_out) / "taxonomy.tsv").string() << "\n";
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ArtifactError& e) {
    std::cerr << e.what() << "\n";
    return kArtifact;
  } catch (const FormatError& e) {
    std::cerr << "unreadable artifact: " << e.what() << "\n";
    return kArtifact;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
