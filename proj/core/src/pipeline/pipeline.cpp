#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "vqmir/dsp/audio.hpp"
#include "vqmir/error.hpp"
#include "vqmir/numerics/gradcheck.hpp"
#include "vqmir/pipeline/pipeline.hpp"

namespace vqmir::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using Map = std::map<std::string, std::string>;

namespace {

constexpr const char* kStageNames[kNumStages] = {"ingest", "preprocess", "train-vqvae", "pretrain", "finetune", "evaluate"};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw ArtifactError("cannot read " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
  if (!f) throw Error("cannot write " + p.string());
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

bool is_complete(const fs::path& dir) { return fs::exists(dir / "COMPLETE"); }

Map pick(const Map& all, std::initializer_list<const char*> keys) {
  Map out;
  for (const char* k : keys) {
    const std::string key(k);
    if (key.back() == '.') {
      for (auto it = all.lower_bound(key); it != all.end() && it->first.rfind(key, 0) == 0; ++it) out.insert(*it);
    } else {
      out[key] = all.at(key);
    }
  }
  return out;
}

Stage feature_stage(const ExperimentConfig& c) {
  return c.variant == models::ModelVariant::Spectro ? Stage::Preprocess : Stage::TrainVqvae;
}

std::vector<Stage> upstream(const ExperimentConfig& c, Stage s) {
  switch (s) {
    case Stage::Ingest: return {};
    case Stage::Preprocess:
    case Stage::TrainVqvae: return {Stage::Ingest};
    case Stage::Pretrain: return {Stage::Ingest, feature_stage(c)};
    case Stage::Finetune:
      if (c.pretrain) return {Stage::Ingest, feature_stage(c), Stage::Pretrain};
      return {Stage::Ingest, feature_stage(c)};
    case Stage::Evaluate: return {Stage::Ingest, feature_stage(c), Stage::Finetune};
  }
  return {};
}

std::string tsv_of(const Map& m) {
  std::string s;
  for (const auto& [k, v] : m) s += k + " = " + v + "\n";
  return s;
}

std::string key_diff(const Map& before, const Map& after) {
  std::set<std::string> keys;
  for (const auto& kv : before) keys.insert(kv.first);
  for (const auto& kv : after) keys.insert(kv.first);
  std::string out;
  for (const auto& k : keys) {
    const auto a = before.count(k) ? before.at(k) : "<unset>";
    const auto b = after.count(k) ? after.at(k) : "<unset>";
    if (a != b) out += "\n  " + k + ": " + a + " -> " + b;
  }
  return out;
}

const StagePlan& plan_of(const std::vector<StagePlan>& plans, Stage s) { return plans[static_cast<std::size_t>(s)]; }

fs::path require_complete(const std::vector<StagePlan>& plans, Stage s) {
  const auto& p = plan_of(plans, s);
  if (!is_complete(p.dir))
    throw ArtifactError(std::string("missing artifact: stage '") + stage_name(s) + "' has no complete output at " +
                        p.dir.string());
  return p.dir;
}

// ---- ingest outputs ----

struct IngestData {
  std::vector<data::TrackMetadata> tracks;  // paths as stored (relative to the stage dir or absolute)
  std::map<std::string, int> labels;
  std::vector<std::string> class_names;
  data::DatasetSplit split;
  fs::path dir;

  fs::path audio_path(const data::TrackMetadata& t) const {
    const fs::path p(t.path);
    return p.is_absolute() ? p : dir / p;
  }
};

IngestData read_ingest(const fs::path& dir) {
  IngestData d;
  d.dir = dir;
  d.tracks = data::read_track_metadata(dir / "tracks.tsv");
  std::istringstream ls(slurp(dir / "labels.tsv"));
  std::string line;
  while (std::getline(ls, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("labels.tsv: malformed line '" + line + "'");
    d.labels[line.substr(0, tab)] = std::stoi(line.substr(tab + 1));
  }
  std::istringstream cs(slurp(dir / "classes.txt"));
  while (std::getline(cs, line))
    if (!line.empty()) d.class_names.push_back(line);
  d.split = data::parse_split(slurp(dir / "split.tsv"));
  return d;
}

std::string split_fingerprint_of(const fs::path& ingest_dir) {
  return eval::sha256_hex(slurp(ingest_dir / "split.tsv") + "\n" + slurp(ingest_dir / "labels.tsv"));
}

void log(const PipelineHooks& h, const std::string& msg) {
  if (h.log) h.log(msg);
}

// ---- stage bodies; each writes only into `work` ----

void run_ingest(const ExperimentConfig& c, const fs::path& work, const PipelineHooks& hooks) {
  fs::path meta, tax, base;
  if (c.source == DataSource::Synthetic) {
    auto spec = c.synth;
    spec.seed = c.seed;
    const auto corpus = data::generate_synthetic_corpus(spec, work / "corpus");
    meta = corpus.metadata_path;
    tax = corpus.taxonomy_path;
  } else {
    meta = c.metadata_path;
    tax = c.taxonomy_path;
  }
  base = meta.parent_path();
  const auto taxonomy = data::read_taxonomy(tax);
  auto resolved = data::resolve_tracks(data::read_track_metadata(meta, &taxonomy), taxonomy, c.multi_root);
  if (resolved.accepted.empty()) throw ConfigError("no usable tracks in " + meta.string());

  auto split = data::make_split(resolved.accepted, c.split, c.seed);
  const auto report = data::verify_split(split, resolved.accepted);
  if (!report.hard_passed()) throw Error("split verification failed: " + report.to_json());

  std::string labels;
  for (auto& t : resolved.accepted) {
    fs::path p(t.path);
    if (c.source == DataSource::Synthetic) p = fs::relative(work / "corpus" / p, work);
    else if (p.is_relative()) p = fs::absolute(base / p);
    t.path = p.generic_string();
    labels += t.track_id + "\t" + std::to_string(t.top_level) + "\n";
  }
  spit(work / "tracks.tsv", data::format_track_metadata(resolved.accepted));
  spit(work / "labels.tsv", labels);
  std::string classes;
  for (const auto& n : taxonomy.root_names()) classes += n + "\n";
  spit(work / "classes.txt", classes);
  spit(work / "split.tsv", data::format_split(split));
  spit(work / "split_report.json", report.to_json());
  std::string warnings;
  for (const auto& w : resolved.warnings) warnings += w + "\n";
  for (const auto& w : split.warnings) warnings += w + "\n";
  spit(work / "warnings.txt", warnings);
  log(hooks, "ingest: " + std::to_string(resolved.accepted.size()) + " tracks, " +
                 std::to_string(taxonomy.roots().size()) + " classes");
}

dsp::AudioClip load_audio(const IngestData& d, const data::TrackMetadata& t) {
  const auto p = d.audio_path(t);
  if (!fs::exists(p)) throw ArtifactError("missing audio for track " + t.track_id + ": " + p.string());
  return dsp::read_wav(p, t.track_id);
}

void run_preprocess(const ExperimentConfig& c, const std::vector<StagePlan>& plans, const fs::path& work,
                    const PipelineHooks& hooks) {
  const auto d = read_ingest(require_complete(plans, Stage::Ingest));
  fs::create_directories(work / "mel");
  for (const auto& t : d.tracks) {
    const auto mel = dsp::mel_spectrogram(load_audio(d, t), c.spectrogram);
    dsp::write_mel_cache(work / "mel" / (t.track_id + ".mel"), mel);
  }
  log(hooks, "preprocess: " + std::to_string(d.tracks.size()) + " mel caches");
}

void run_train_vqvae(const ExperimentConfig& c, const std::vector<StagePlan>& plans, const fs::path& work,
                     const PipelineHooks& hooks) {
  const auto d = read_ingest(require_complete(plans, Stage::Ingest));
  std::vector<dsp::AudioClip> train_clips;
  for (const auto& t : d.tracks)
    if (d.split.assignment.at(t.track_id) == data::Segment::Train) train_clips.push_back(load_audio(d, t));

  vq::VqVae model(c.vqvae, c.seed);
  auto opts = c.vq_train;
  opts.seed = c.seed;
  opts.precision = c.precision;
  const auto records = vq::train_vqvae(model, train_clips, opts);
  std::ostringstream hist;
  hist << std::setprecision(17) << "step\ttotal\trecon\tcodebook\tcommit\tcodes_reset\n";
  for (const auto& r : records)
    hist << r.step << '\t' << r.loss.total << '\t' << r.loss.recon << '\t' << r.loss.codebook << '\t'
         << r.loss.commit << '\t' << r.codes_reset << '\n';
  spit(work / "vq_history.tsv", hist.str());

  vq::save_vqvae(work / "vqvae.bin", model, c.precision);
  vq::write_codebook(work / "codebook.bin", model.codebook().vectors.value());
  fs::create_directories(work / "tokens");
  std::vector<vq::TokenSequence> seqs;
  for (const auto& t : d.tracks) {
    auto tok = model.tokenize(load_audio(d, t));
    tok.clip_id = t.track_id;
    vq::write_token_cache(work / "tokens" / (t.track_id + ".tok"), tok);
    seqs.push_back(std::move(tok));
  }
  const auto stats = vq::codebook_stats(seqs, c.vqvae.vocab_size);
  std::ostringstream st;
  st << std::setprecision(17) << "utilization\t" << stats.utilization << "\nperplexity\t" << stats.perplexity << "\n";
  spit(work / "codebook_stats.tsv", st.str());
  log(hooks, "train-vqvae: " + std::to_string(records.size()) + " steps, codebook utilization " +
                 std::to_string(stats.utilization));
}

std::size_t n_batches(std::size_t n, std::size_t b) { return (n + b - 1) / b; }

train::TrainOptions pretrain_options(const ExperimentConfig& c, std::size_t n_train) {
  train::TrainOptions o;
  o.phase = train::Phase::Pretrain;
  o.epochs = c.pretrain_epochs;
  o.batch_size = c.pretrain_batch;
  o.schedule = train::LrSchedule::warmup(c.pretrain_peak_lr, c.pretrain_epochs * n_batches(n_train, c.pretrain_batch),
                                         c.warmup_fraction);
  o.mask = c.mask;
  o.seed = c.seed;
  o.precision = c.precision;
  o.adam = c.adam;
  return o;
}

train::TrainOptions finetune_options(const ExperimentConfig& c, const LoadedData& d) {
  train::TrainOptions o;
  o.phase = train::Phase::Finetune;
  o.epochs = c.finetune_epochs;
  o.batch_size = c.finetune_batch;
  o.schedule = train::LrSchedule::constant(c.finetune_lr);
  o.mask = c.mask;
  o.seed = c.seed;
  o.precision = c.precision;
  o.adam = c.adam;
  if (c.class_weighting) {
    std::vector<std::uint64_t> counts(d.class_names.size(), 0);
    for (const auto& e : d.train) ++counts.at(static_cast<std::size_t>(e.label));
    o.class_weights = train::compute_class_weights(counts).weights;
  }
  return o;
}

void save_model(const fs::path& p, const models::GenreTransformer& m, Precision precision) {
  std::ofstream f(p, std::ios::binary);
  m.save(f, precision);
  if (!f) throw Error("cannot write " + p.string());
}

models::GenreTransformer load_model(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw ArtifactError("cannot read model " + p.string());
  return models::GenreTransformer::load(f);
}

// Epoch loop with a checkpoint after every epoch, so an interrupted stage
// resumes from its last finished epoch.
void train_loop(train::Trainer& t, Stage stage, const fs::path& work, const PipelineHooks& hooks) {
  const auto ckpt = work / "checkpoint.bin";
  if (fs::exists(ckpt)) {
    t.load_checkpoint(ckpt);
    log(hooks, std::string(stage_name(stage)) + ": resuming after epoch " + std::to_string(t.state().epoch));
  }
  while (t.state().epoch < t.options().epochs) {
    t.run_epoch();
    t.save_checkpoint(ckpt);
    const auto e = t.state().epoch;  // 1-based, as in the history
    std::ostringstream msg;
    msg << stage_name(stage) << ": epoch " << e;
    for (const auto& h : t.state().history)
      if (h.epoch == e) msg << ' ' << h.split << '/' << h.metric << '=' << std::setprecision(4) << h.value;
    log(hooks, msg.str());
    if (hooks.interrupt && hooks.interrupt(stage, e)) throw Interrupted(std::string(stage_name(stage)) + " interrupted");
  }
}

void run_pretrain(const ExperimentConfig& c, const fs::path& work, const PipelineHooks& hooks) {
  auto d = load_examples(c);
  models::GenreTransformer model(c.variant, c.model, d.dims, d.class_names.size(), c.seed);
  train::Trainer t(model, pretrain_options(c, d.train.size()), d.train, d.validation);
  train_loop(t, Stage::Pretrain, work, hooks);
  save_model(work / "model.bin", model, c.precision);
  spit(work / "history.tsv", eval::history_tsv(t.state().history));
}

void run_finetune(const ExperimentConfig& c, const std::vector<StagePlan>& plans, const fs::path& work,
                  const PipelineHooks& hooks) {
  auto d = load_examples(c);
  auto model = c.pretrain ? load_model(require_complete(plans, Stage::Pretrain) / "model.bin")
                          : models::GenreTransformer(c.variant, c.model, d.dims, d.class_names.size(), c.seed);
  if (model.n_classes() != d.class_names.size())
    throw ArtifactError("pretrained model has " + std::to_string(model.n_classes()) + " classes, data has " +
                        std::to_string(d.class_names.size()));
  const auto opts = finetune_options(c, d);
  train::Trainer t(model, opts, d.train, d.validation);
  train_loop(t, Stage::Finetune, work, hooks);
  t.restore_best();
  save_model(work / "model.bin", model, c.precision);
  spit(work / "history.tsv", eval::history_tsv(t.state().history));
  json j;
  j["best_epoch"] = t.state().best_epoch;
  j["best_macro_f1"] = t.state().best_macro_f1;
  j["class_weights"] = opts.class_weights;
  spit(work / "finetune.json", j.dump(2) + "\n");
}

void run_evaluate(const ExperimentConfig& c, const std::vector<StagePlan>& plans, const fs::path& work,
                  const PipelineHooks& hooks) {
  auto d = load_examples(c);
  const auto ft = require_complete(plans, Stage::Finetune);
  auto model = load_model(ft / "model.bin");
  const json state = json::parse(slurp(ft / "finetune.json"));
  const std::size_t best_epoch = state.at("best_epoch").get<std::size_t>();
  auto history = eval::parse_history_tsv(slurp(ft / "history.tsv"));

  const auto opts = finetune_options(c, d);
  train::Trainer t(model, opts, d.train, d.validation);
  auto val = t.classify_eval(d.validation);
  val.confusion.class_names = d.class_names;
  if (!d.test.empty()) {
    const auto test = t.classify_eval(d.test);
    history.push_back({best_epoch, "test", "finetune_loss", test.loss});
    history.push_back({best_epoch, "test", "macro_f1", test.macro_f1});
  }

  std::vector<std::uint64_t> counts(d.class_names.size(), 0);
  for (const auto& e : d.validation) ++counts.at(static_cast<std::size_t>(e.label));
  const auto chance = eval::chance_baseline(d.class_names.size(), counts, c.chance_trials, c.seed);
  const auto report = eval::build_report(c.run_name, models::variant_name(c.variant), c.pretrain, val.confusion,
                                         history, best_epoch, chance, config_fingerprint(c),
                                         split_fingerprint_of(require_complete(plans, Stage::Ingest)));
  eval::write_report(work / "report.json", report);
  spit(work / "confusion.txt", eval::confusion_table(report.confusion));
  std::ostringstream msg;
  msg << "evaluate: validation macro-F1 " << std::setprecision(4) << report.macro_f1 << " at epoch " << best_epoch
      << ", chance " << chance.mean;
  log(hooks, msg.str());
}

void run_stage(const ExperimentConfig& c, const std::vector<StagePlan>& plans, const StagePlan& p,
               const PipelineHooks& hooks) {
  fs::path work = p.dir;
  work += ".partial";
  const bool resumable = p.stage == Stage::Pretrain || p.stage == Stage::Finetune;
  if (fs::exists(work) && !(resumable && fs::exists(work / "checkpoint.bin"))) fs::remove_all(work);
  fs::create_directories(work);
  spit(work / "inputs.txt", tsv_of(p.inputs));

  switch (p.stage) {
    case Stage::Ingest: run_ingest(c, work, hooks); break;
    case Stage::Preprocess: run_preprocess(c, plans, work, hooks); break;
    case Stage::TrainVqvae: run_train_vqvae(c, plans, work, hooks); break;
    case Stage::Pretrain: run_pretrain(c, work, hooks); break;
    case Stage::Finetune: run_finetune(c, plans, work, hooks); break;
    case Stage::Evaluate: run_evaluate(c, plans, work, hooks); break;
  }
  spit(work / "COMPLETE", p.fingerprint + "\n");
  if (fs::exists(p.dir)) fs::remove_all(p.dir);  // incomplete leftovers only; complete dirs are skipped earlier
  fs::rename(work, p.dir);
}

Map read_inputs(const fs::path& dir) {
  try {
    return parse_key_values(slurp(dir / "inputs.txt"));
  } catch (const Error&) {
    return {};
  }
}

void write_manifest(const fs::path& path, const RunManifest& m) {
  fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  spit(tmp, manifest_to_json(m));
  fs::rename(tmp, path);
}

}  // namespace

const char* stage_name(Stage s) { return kStageNames[static_cast<std::size_t>(s)]; }

Stage parse_stage(const std::string& s) {
  for (std::size_t i = 0; i < kNumStages; ++i)
    if (s == kStageNames[i]) return static_cast<Stage>(i);
  if (s == "synth-data" || s == "synth" || s == "import") return Stage::Ingest;
  throw ConfigError("unknown stage '" + s + "'");
}

std::vector<Stage> all_stages() {
  std::vector<Stage> v;
  for (std::size_t i = 0; i < kNumStages; ++i) v.push_back(static_cast<Stage>(i));
  return v;
}

std::vector<Stage> parse_stage_list(const std::string& s) {
  if (s.empty() || s == "all") return all_stages();
  std::vector<Stage> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_stage(item));
  if (out.empty()) throw ConfigError("empty stage list");
  return out;
}

std::vector<StagePlan> plan_stages(const ExperimentConfig& c) {
  const Map all = config_to_map(c);
  std::vector<StagePlan> plans;
  for (Stage s : all_stages()) {
    StagePlan p;
    p.stage = s;
    switch (s) {
      case Stage::Ingest:
        p.inputs = pick(all, {"seed", "data.", "split."});
        if (c.source == DataSource::FmaImport) {
          for (const char* k : {"data.metadata", "data.taxonomy"}) {
            const fs::path f = all.at(k);
            if (!fs::exists(f)) throw ArtifactError(std::string("missing artifact: ") + k + " " + f.string());
            p.inputs[std::string(k) + ".sha256"] = eval::sha256_hex(slurp(f));
          }
        } else {
          p.inputs.erase("data.metadata");
          p.inputs.erase("data.taxonomy");
          p.inputs.erase("data.multi_root");
        }
        break;
      case Stage::Preprocess:
        p.inputs = pick(all, {"spectrogram."});
        p.required = c.variant == models::ModelVariant::Spectro;
        break;
      case Stage::TrainVqvae:
        p.inputs = pick(all, {"vqvae.", "seed", "precision"});
        p.required = c.variant != models::ModelVariant::Spectro;
        break;
      case Stage::Pretrain:
        p.inputs = pick(all, {"model.", "mask.", "adam.", "pretrain.", "seed", "precision"});
        p.required = c.pretrain;
        break;
      case Stage::Finetune:
        p.inputs = pick(all, {"model.", "adam.", "finetune.", "pretrain.enabled", "seed", "precision"});
        break;
      case Stage::Evaluate:
        p.inputs = pick(all, {"eval.", "run_name"});
        break;
    }
    for (Stage u : upstream(c, s))
      for (const auto& kv : plans[static_cast<std::size_t>(u)].inputs) p.inputs.insert(kv);
    Map keyed = p.inputs;
    keyed["@stage"] = stage_name(s);
    p.fingerprint = eval::fingerprint(keyed);
    p.dir = c.out / "stages" / stage_name(s) / p.fingerprint.substr(0, 16);
    plans.push_back(std::move(p));
  }
  return plans;
}

fs::path manifest_path(const ExperimentConfig& c) { return c.out / "runs" / c.run_name / "manifest.json"; }

std::string manifest_to_json(const RunManifest& m) {
  json j;
  j["schema_version"] = RunManifest::kSchemaVersion;
  j["run_name"] = m.run_name;
  j["config_fingerprint"] = m.config_fingerprint;
  j["config"] = m.config;
  j["report"] = m.report.generic_string();
  json stages = json::array();
  for (const auto& s : m.stages)
    stages.push_back({{"name", s.name},
                      {"required", s.required},
                      {"fingerprint", s.fingerprint},
                      {"dir", s.dir.generic_string()},
                      {"complete", s.complete},
                      {"reused", s.reused},
                      {"started", s.started},
                      {"finished", s.finished}});
  j["stages"] = stages;
  return j.dump(2) + "\n";
}

RunManifest manifest_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.at("schema_version").get<int>() != RunManifest::kSchemaVersion)
      throw FormatError("manifest schema version " + std::to_string(j.at("schema_version").get<int>()) +
                        ", expected " + std::to_string(RunManifest::kSchemaVersion));
    RunManifest m;
    m.run_name = j.at("run_name").get<std::string>();
    m.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    m.config = j.at("config").get<Map>();
    m.report = j.at("report").get<std::string>();
    for (const auto& s : j.at("stages")) {
      StageRecord r;
      r.name = s.at("name").get<std::string>();
      r.required = s.at("required").get<bool>();
      r.fingerprint = s.at("fingerprint").get<std::string>();
      r.dir = s.at("dir").get<std::string>();
      r.complete = s.at("complete").get<bool>();
      r.reused = s.at("reused").get<bool>();
      r.started = s.at("started").get<std::string>();
      r.finished = s.at("finished").get<std::string>();
      m.stages.push_back(std::move(r));
    }
    if (m.stages.size() != kNumStages) throw FormatError("manifest lists " + std::to_string(m.stages.size()) + " stages");
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
}

RunManifest read_manifest(const fs::path& path) { return manifest_from_json(slurp(path)); }

RunManifest run_pipeline(const ExperimentConfig& c, const std::vector<Stage>& stages, const PipelineHooks& hooks) {
  c.validate();
  const auto plans = plan_stages(c);
  const auto mpath = manifest_path(c);
  std::optional<RunManifest> previous;
  if (fs::exists(mpath)) previous = read_manifest(mpath);

  RunManifest m;
  m.run_name = c.run_name;
  m.config_fingerprint = config_fingerprint(c);
  m.config = config_to_map(c);
  for (const auto& p : plans) {
    StageRecord r;
    r.name = stage_name(p.stage);
    r.required = p.required;
    r.fingerprint = p.fingerprint;
    r.dir = p.dir;
    r.complete = is_complete(p.dir);
    if (previous && previous->stages.size() == kNumStages) {
      const auto& old = previous->stages[static_cast<std::size_t>(p.stage)];
      if (old.fingerprint == p.fingerprint) {
        r.started = old.started;
        r.finished = old.finished;
      }
    }
    m.stages.push_back(std::move(r));
  }
  if (is_complete(plan_of(plans, Stage::Evaluate).dir)) m.report = plan_of(plans, Stage::Evaluate).dir / "report.json";

  const std::set<Stage> wanted(stages.begin(), stages.end());
  for (const auto& p : plans) {
    auto& rec = m.stages[static_cast<std::size_t>(p.stage)];
    if (!wanted.count(p.stage)) continue;
    if (!p.required) {
      log(hooks, std::string(stage_name(p.stage)) + ": not used by this configuration");
      continue;
    }
    if (rec.complete) {
      rec.reused = true;
      log(hooks, std::string(stage_name(p.stage)) + ": up to date, skipped");
      continue;
    }
    for (Stage u : upstream(c, p.stage)) {
      const auto& up = plan_of(plans, u);
      if (is_complete(up.dir)) continue;
      std::string msg = std::string("missing artifact: stage '") + stage_name(p.stage) + "' needs '" + stage_name(u) +
                        "' output " + up.dir.string();
      if (previous) {
        const auto& old = previous->stages[static_cast<std::size_t>(u)];
        if (old.complete && old.fingerprint != up.fingerprint) {
          msg = std::string("stale artifact: '") + stage_name(u) + "' for run '" + c.run_name +
                "' was built from different settings; rerun stage '" + stage_name(u) + "'. Changed keys:" +
                key_diff(read_inputs(old.dir), up.inputs);
        }
      }
      write_manifest(mpath, m);
      throw ArtifactError(msg);
    }
    rec.started = now_iso();
    log(hooks, std::string(stage_name(p.stage)) + ": running");
    run_stage(c, plans, p, hooks);
    rec.finished = now_iso();
    rec.complete = true;
    rec.reused = false;
    if (p.stage == Stage::Evaluate) m.report = p.dir / "report.json";
    write_manifest(mpath, m);
  }
  write_manifest(mpath, m);
  return m;
}

LoadedData load_examples(const ExperimentConfig& c) {
  const auto plans = plan_stages(c);
  const auto d = read_ingest(require_complete(plans, Stage::Ingest));
  const auto fdir = require_complete(plans, feature_stage(c));
  LoadedData out;
  out.class_names = d.class_names;
  out.dims.n_mels = c.spectrogram.n_mels;
  out.dims.vocab_size = c.vqvae.vocab_size;
  out.dims.code_dim = c.vqvae.code_dim;
  Tensor codebook;
  if (c.variant == models::ModelVariant::Codebook) codebook = vq::read_codebook(fdir / "codebook.bin");

  for (const auto& t : d.tracks) {
    train::Example e;
    e.track_id = t.track_id;
    e.label = d.labels.at(t.track_id);
    const fs::path cache = c.variant == models::ModelVariant::Spectro ? fdir / "mel" / (t.track_id + ".mel")
                                                                      : fdir / "tokens" / (t.track_id + ".tok");
    if (!fs::exists(cache))
      throw ArtifactError("missing feature cache for track " + t.track_id + ": " + cache.string());
    if (c.variant == models::ModelVariant::Spectro) {
      e.input.features = dsp::normalize_db(dsp::read_mel_cache(cache), c.spectrogram.db_floor);
    } else {
      e.input.ids = vq::read_token_cache(cache).tokens;
      if (c.variant == models::ModelVariant::Codebook) {
        const std::size_t dim = codebook.shape()[1];
        e.input.features = Tensor(Shape{e.input.ids.size(), dim});
        for (std::size_t r = 0; r < e.input.ids.size(); ++r)
          std::copy_n(codebook.row(static_cast<std::size_t>(e.input.ids[r])).begin(), dim, e.input.features.row(r).begin());
      }
    }
    switch (d.split.assignment.at(t.track_id)) {
      case data::Segment::Train: out.train.push_back(std::move(e)); break;
      case data::Segment::Validation: out.validation.push_back(std::move(e)); break;
      case data::Segment::Test: out.test.push_back(std::move(e)); break;
    }
  }
  return out;
}

Comparison compare_variants(const std::vector<eval::MetricsReport>& reports) {
  if (reports.empty()) throw ConfigError("compare: no reports");
  Comparison c;
  c.split_fingerprint = reports.front().split_fingerprint;
  c.chance = reports.front().chance;
  std::string mismatched;
  for (const auto& r : reports)
    if (r.split_fingerprint != c.split_fingerprint) mismatched += " '" + r.run_name + "'";
  if (!mismatched.empty())
    throw ConfigError("compare: runs" + mismatched + " use a different dataset split than '" +
                      reports.front().run_name + "'");
  std::map<std::string, std::pair<std::optional<double>, std::optional<double>>> by_variant;
  for (const auto& r : reports) {
    c.rows.push_back({r.run_name, r.variant, r.pretrained, r.macro_f1, r.best_epoch});
    auto& slot = by_variant[r.variant];
    (r.pretrained ? slot.first : slot.second) = r.macro_f1;
  }
  for (const auto& [v, pair] : by_variant)
    if (pair.first && pair.second) c.pretrain_delta[v] = *pair.first - *pair.second;
  return c;
}

std::string comparison_table(const Comparison& c) {
  std::ostringstream os;
  std::size_t w = 6;
  for (const auto& r : c.rows) w = std::max(w, r.run_name.size());
  os << std::left << std::setw(static_cast<int>(w)) << "run" << "  " << std::setw(9) << "variant" << "  "
     << std::setw(10) << "init" << "  " << std::setw(8) << "macroF1" << "  best_epoch\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& r : c.rows)
    os << std::setw(static_cast<int>(w)) << r.run_name << "  " << std::setw(9) << r.variant << "  " << std::setw(10)
       << (r.pretrained ? "pretrained" : "scratch") << "  " << std::setw(8) << r.macro_f1 << "  " << r.best_epoch
       << "\n";
  os << std::setw(static_cast<int>(w)) << "chance" << "  " << std::setw(9) << "-" << "  " << std::setw(10) << "uniform"
     << "  " << std::setw(8) << c.chance.mean << "  (+/- " << c.chance.std_error << ", " << c.chance.trials
     << " trials; 16-way figure quoted as " << std::setprecision(2) << c.chance.quoted_reference << ")\n";
  if (!c.pretrain_delta.empty()) {
    os << std::setprecision(4) << "pretrained - scratch:";
    for (const auto& [v, d] : c.pretrain_delta) os << ' ' << v << ' ' << std::showpos << d << std::noshowpos;
    os << "\n";
  }
  return os.str();
}

std::vector<ExperimentConfig> grid_configs(const ExperimentConfig& base) {
  std::vector<ExperimentConfig> out;
  for (auto v : {models::ModelVariant::Spectro, models::ModelVariant::Token, models::ModelVariant::Codebook})
    for (bool pre : {true, false}) {
      auto c = base;
      c.variant = v;
      c.pretrain = pre;
      c.run_name = base.run_name + "-" + models::variant_name(v) + "-" + (pre ? "pretrained" : "scratch");
      out.push_back(std::move(c));
    }
  return out;
}

std::vector<VerifyCheck> run_verification(const ExperimentConfig& c) {
  std::vector<VerifyCheck> out;
  const auto plans = plan_stages(c);
  {
    const auto d = read_ingest(require_complete(plans, Stage::Ingest));
    const auto report = data::verify_split(d.split, d.tracks);
    for (const auto& ch : report.checks) {
      VerifyCheck v{"split/" + ch.name, ch.passed || !ch.hard, ch.detail};
      if (!ch.passed && !ch.hard) v.detail = "warning: " + ch.detail;
      out.push_back(std::move(v));
    }
  }

  for (auto v : {models::ModelVariant::Spectro, models::ModelVariant::Token, models::ModelVariant::Codebook}) {
    models::TransformerConfig tc;
    tc.d_model = 16;
    tc.n_heads = 2;
    tc.n_layers = 2;
    tc.ffn_mult = 2;
    tc.max_seq_len = 32;
    tc.dropout = 0.0;
    models::InputDims dims{12, 32, 6};
    models::GenreTransformer m(v, tc, dims, 4, c.seed);
    std::mt19937_64 rng(c.seed + 1);
    std::normal_distribution<double> g(0.0, 0.5);
    std::uniform_int_distribution<int> id(0, 31);
    models::ModelInput in;
    const std::size_t len = 20;
    if (v != models::ModelVariant::Spectro) {
      in.ids.resize(len);
      for (auto& x : in.ids) x = id(rng);
    }
    if (v != models::ModelVariant::Token) {
      in.features = Tensor(Shape{len, v == models::ModelVariant::Spectro ? dims.n_mels : dims.code_dim});
      for (std::size_t i = 0; i < in.features.numel(); ++i) in.features[i] = g(rng);
    }
    const auto batch = models::apply_pretrain_mask(v, in, rng, c.mask, dims.vocab_size, 30.0);
    GradCheckOptions opt;
    opt.seed = c.seed;
    const auto r = check_gradients([&](Tape& t) { return m.pretrain_objective(t, batch); }, m.parameters(), opt);
    std::ostringstream d;
    d << r.checked << " coordinates, max relative error " << std::setprecision(3) << r.max_rel_error;
    out.push_back({std::string("gradients/") + models::variant_name(v), r.passed(), d.str()});
  }

  {
    std::mt19937_64 rng(c.seed + 2);
    std::size_t bad = 0;
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t k = 2 + rng() % 15;
      eval::ConfusionMatrix cm;
      cm.k = k;
      cm.counts.resize(k * k);
      for (auto& x : cm.counts) x = rng() % 12;
      double sum = 0;
      for (std::size_t i = 0; i < k; ++i) {
        double tp = static_cast<double>(cm.at(i, i)), row = 0, col = 0;
        for (std::size_t j = 0; j < k; ++j) row += static_cast<double>(cm.at(i, j)), col += static_cast<double>(cm.at(j, i));
        const double p = col > 0 ? tp / col : 0, rc = row > 0 ? tp / row : 0;
        sum += p + rc > 0 ? 2 * p * rc / (p + rc) : 0;
      }
      if (std::abs(sum / static_cast<double>(k) - eval::macro_f1(cm)) > 1e-12) ++bad;
    }
    out.push_back({"oracle/macro_f1", bad == 0, std::to_string(200 - bad) + "/200 matrices match the direct formula"});
  }

  {
    std::mt19937_64 rng(c.seed + 3);
    std::normal_distribution<double> g(0.0, 1.0);
    Tensor lat(Shape{1000, 8}), cb(Shape{256, 8});
    for (std::size_t i = 0; i < lat.numel(); ++i) lat[i] = g(rng);
    for (std::size_t i = 0; i < cb.numel(); ++i) cb[i] = g(rng);
    const auto q = vq::quantize(lat, cb);
    std::size_t bad = 0;
    for (std::size_t r = 0; r < 1000; ++r) {
      std::size_t best = 0;
      double bd = INFINITY;
      for (std::size_t k = 0; k < 256; ++k) {
        double dd = 0;
        for (std::size_t j = 0; j < 8; ++j) dd += (lat.at(r, j) - cb.at(k, j)) * (lat.at(r, j) - cb.at(k, j));
        if (dd < bd) bd = dd, best = k;
      }
      if (q.tokens.tokens[r] != static_cast<int>(best)) ++bad;
    }
    out.push_back({"oracle/quantize", bad == 0, std::to_string(1000 - bad) + "/1000 latents match exhaustive search"});
  }

  {
    std::size_t bad = 0;
    for (std::size_t n = 1; n <= 1280; ++n)
      if (vq::token_length(n, 128) != (n + 127) / 128) ++bad;
    out.push_back({"oracle/token_length", bad == 0, "lengths 1..1280 at compression 128"});
  }
  return out;
}

}  // namespace vqmir::pipeline
