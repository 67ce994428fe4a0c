#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "vqmir/error.hpp"
#include "vqmir/pipeline/pipeline.hpp"

namespace vqmir::pipeline {

ExperimentConfig::ExperimentConfig() {
  // Desk-scale shape: a few minutes per run on one CPU core.
  model.d_model = 64;
  model.n_heads = 4;
  model.n_layers = 4;
  model.max_seq_len = 64;
  vq_train.steps = 150;
  vq_train.batch_clips = 4;
  vq_train.crop_samples = 8192;
}

void ExperimentConfig::validate() const {
  if (run_name.empty() || run_name.find_first_of("/\\ \t") != std::string::npos)
    throw ConfigError("run_name must be a non-empty name without slashes or spaces");
  if (out.empty()) throw ConfigError("out must be set");
  if (source == DataSource::Synthetic) {
    auto s = synth;
    s.seed = seed;
    s.validate();
  } else if (metadata_path.empty() || taxonomy_path.empty()) {
    throw ConfigError("data.source = fma-import needs data.metadata and data.taxonomy");
  }
  const double r = split.train + split.validation + split.test;
  if (split.train <= 0 || split.validation <= 0 || split.test < 0 || std::abs(r - 1.0) > 1e-9)
    throw ConfigError("split ratios must be positive and sum to 1");
  spectrogram.validate();
  vqvae.validate();
  model.validate();
  mask.validate();
  if (pretrain_epochs == 0 && pretrain) throw ConfigError("pretrain.epochs must be positive");
  if (finetune_epochs == 0) throw ConfigError("finetune.epochs must be positive");
  if (pretrain_batch == 0 || finetune_batch == 0) throw ConfigError("batch sizes must be positive");
  if (!(pretrain_peak_lr > 0) || !(finetune_lr > 0)) throw ConfigError("learning rates must be positive");
  if (!(warmup_fraction > 0) || warmup_fraction >= 1) throw ConfigError("pretrain.warmup_fraction must lie in (0, 1)");
  if (vq_train.steps == 0 || vq_train.batch_clips == 0) throw ConfigError("vqvae.steps and vqvae.batch_clips must be positive");
  if (chance_trials < 1000) throw ConfigError("eval.chance_trials must be at least 1000");
}

namespace {

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string fmt(std::uint64_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

std::string fmt_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const char* what) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + what);
}

std::uint64_t to_u64(const std::string& k, const std::string& v) {
  std::uint64_t x = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad(k, v, "an unsigned integer");
  return x;
}

double to_double(const std::string& k, const std::string& v) {
  double x = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad(k, v, "a number");
  return x;
}

bool to_bool(const std::string& k, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad(k, v, "a boolean");
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<double> to_list(const std::string& k, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(k, trim(item)));
  if (out.empty()) bad(k, v, "a comma-separated list");
  return out;
}

}  // namespace

std::map<std::string, std::string> config_to_map(const ExperimentConfig& c) {
  std::map<std::string, std::string> m;
  m["run_name"] = c.run_name;
  m["out"] = c.out.string();
  m["seed"] = fmt(c.seed);
  m["precision"] = precision_name(c.precision);

  m["data.source"] = c.source == DataSource::Synthetic ? "synthetic" : "fma-import";
  m["data.n_genres"] = fmt(std::uint64_t{c.synth.n_genres});
  m["data.tracks_per_genre"] = fmt(std::uint64_t{c.synth.tracks_per_genre});
  m["data.clip_seconds"] = fmt(c.synth.clip_seconds);
  m["data.sample_rate"] = fmt(std::uint64_t{c.synth.sample_rate});
  m["data.metadata"] = c.metadata_path.string();
  m["data.taxonomy"] = c.taxonomy_path.string();
  m["data.multi_root"] = c.multi_root == data::MultiRootPolicy::Reject ? "reject" : "first-genre";
  m["split.train"] = fmt(c.split.train);
  m["split.validation"] = fmt(c.split.validation);
  m["split.test"] = fmt(c.split.test);

  m["spectrogram.frame_size"] = fmt(std::uint64_t{c.spectrogram.frame_size});
  m["spectrogram.hop_size"] = fmt(std::uint64_t{c.spectrogram.hop_size});
  m["spectrogram.n_mels"] = fmt(std::uint64_t{c.spectrogram.n_mels});
  m["spectrogram.db_floor"] = fmt(c.spectrogram.db_floor);

  m["vqvae.compression"] = fmt(std::uint64_t{c.vqvae.compression});
  m["vqvae.vocab_size"] = fmt(std::uint64_t{c.vqvae.vocab_size});
  m["vqvae.code_dim"] = fmt(std::uint64_t{c.vqvae.code_dim});
  m["vqvae.channels"] = fmt(std::uint64_t{c.vqvae.channels});
  m["vqvae.beta"] = fmt(c.vqvae.commitment_beta);
  m["vqvae.steps"] = fmt(std::uint64_t{c.vq_train.steps});
  m["vqvae.batch_clips"] = fmt(std::uint64_t{c.vq_train.batch_clips});
  m["vqvae.crop_samples"] = fmt(std::uint64_t{c.vq_train.crop_samples});
  m["vqvae.lr"] = fmt(c.vq_train.lr);
  m["vqvae.reset_every"] = fmt(std::uint64_t{c.vq_train.reset_every});

  m["model.variant"] = models::variant_name(c.variant);
  m["model.n_layers"] = fmt(std::uint64_t{c.model.n_layers});
  m["model.d_model"] = fmt(std::uint64_t{c.model.d_model});
  m["model.n_heads"] = fmt(std::uint64_t{c.model.n_heads});
  m["model.ffn_mult"] = fmt(std::uint64_t{c.model.ffn_mult});
  m["model.max_seq_len"] = fmt(std::uint64_t{c.model.max_seq_len});
  m["model.dropout"] = fmt(c.model.dropout);

  m["mask.token_prob"] = fmt(c.mask.token_mask_prob);
  m["mask.replace_mask"] = fmt(c.mask.replace_mask);
  m["mask.replace_random"] = fmt(c.mask.replace_random);
  m["mask.span_len"] = fmt(std::uint64_t{c.mask.spectro_span_len});
  m["mask.spectro_pcts"] = fmt_list(c.mask.spectro_mask_pcts);

  m["adam.beta1"] = fmt(c.adam.beta1);
  m["adam.beta2"] = fmt(c.adam.beta2);
  m["adam.eps"] = fmt(c.adam.eps);
  m["adam.clip_norm"] = fmt(c.adam.clip_norm);

  m["pretrain.enabled"] = fmt(c.pretrain);
  m["pretrain.epochs"] = fmt(std::uint64_t{c.pretrain_epochs});
  m["pretrain.batch_size"] = fmt(std::uint64_t{c.pretrain_batch});
  m["pretrain.peak_lr"] = fmt(c.pretrain_peak_lr);
  m["pretrain.warmup_fraction"] = fmt(c.warmup_fraction);

  m["finetune.epochs"] = fmt(std::uint64_t{c.finetune_epochs});
  m["finetune.batch_size"] = fmt(std::uint64_t{c.finetune_batch});
  m["finetune.lr"] = fmt(c.finetune_lr);
  m["finetune.class_weights"] = fmt(c.class_weighting);

  m["eval.chance_trials"] = fmt(std::uint64_t{c.chance_trials});
  return m;
}

ExperimentConfig config_from_map(const std::map<std::string, std::string>& values) {
  ExperimentConfig c;
  const auto known = config_to_map(c);
  for (const auto& [k, v] : values) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
    auto u = [&] { return static_cast<std::size_t>(to_u64(k, v)); };
    auto d = [&] { return to_double(k, v); };

    if (k == "run_name") c.run_name = v;
    else if (k == "out") c.out = v;
    else if (k == "seed") c.seed = to_u64(k, v);
    else if (k == "precision") {
      try {
        c.precision = parse_precision(v);
      } catch (const Error&) {
        bad(k, v, "f32 or f64");
      }
    }
    else if (k == "data.source") {
      if (v == "synthetic") c.source = DataSource::Synthetic;
      else if (v == "fma-import") c.source = DataSource::FmaImport;
      else bad(k, v, "synthetic or fma-import");
    }
    else if (k == "data.n_genres") c.synth.n_genres = u();
    else if (k == "data.tracks_per_genre") c.synth.tracks_per_genre = u();
    else if (k == "data.clip_seconds") c.synth.clip_seconds = d();
    else if (k == "data.sample_rate") c.synth.sample_rate = static_cast<std::uint32_t>(u());
    else if (k == "data.metadata") c.metadata_path = v;
    else if (k == "data.taxonomy") c.taxonomy_path = v;
    else if (k == "data.multi_root") {
      if (v == "reject") c.multi_root = data::MultiRootPolicy::Reject;
      else if (v == "first-genre") c.multi_root = data::MultiRootPolicy::FirstGenre;
      else bad(k, v, "reject or first-genre");
    }
    else if (k == "split.train") c.split.train = d();
    else if (k == "split.validation") c.split.validation = d();
    else if (k == "split.test") c.split.test = d();
    else if (k == "spectrogram.frame_size") c.spectrogram.frame_size = u();
    else if (k == "spectrogram.hop_size") c.spectrogram.hop_size = u();
    else if (k == "spectrogram.n_mels") c.spectrogram.n_mels = u();
    else if (k == "spectrogram.db_floor") c.spectrogram.db_floor = d();
    else if (k == "vqvae.compression") c.vqvae.compression = u();
    else if (k == "vqvae.vocab_size") c.vqvae.vocab_size = u();
    else if (k == "vqvae.code_dim") c.vqvae.code_dim = u();
    else if (k == "vqvae.channels") c.vqvae.channels = u();
    else if (k == "vqvae.beta") c.vqvae.commitment_beta = d();
    else if (k == "vqvae.steps") c.vq_train.steps = u();
    else if (k == "vqvae.batch_clips") c.vq_train.batch_clips = u();
    else if (k == "vqvae.crop_samples") c.vq_train.crop_samples = u();
    else if (k == "vqvae.lr") c.vq_train.lr = d();
    else if (k == "vqvae.reset_every") c.vq_train.reset_every = u();
    else if (k == "model.variant") {
      try {
        c.variant = models::parse_variant(v);
      } catch (const Error&) {
        bad(k, v, "spectro, token or codebook");
      }
    }
    else if (k == "model.n_layers") c.model.n_layers = u();
    else if (k == "model.d_model") c.model.d_model = u();
    else if (k == "model.n_heads") c.model.n_heads = u();
    else if (k == "model.ffn_mult") c.model.ffn_mult = u();
    else if (k == "model.max_seq_len") c.model.max_seq_len = u();
    else if (k == "model.dropout") c.model.dropout = d();
    else if (k == "mask.token_prob") c.mask.token_mask_prob = d();
    else if (k == "mask.replace_mask") c.mask.replace_mask = d();
    else if (k == "mask.replace_random") c.mask.replace_random = d();
    else if (k == "mask.span_len") c.mask.spectro_span_len = u();
    else if (k == "mask.spectro_pcts") c.mask.spectro_mask_pcts = to_list(k, v);
    else if (k == "adam.beta1") c.adam.beta1 = d();
    else if (k == "adam.beta2") c.adam.beta2 = d();
    else if (k == "adam.eps") c.adam.eps = d();
    else if (k == "adam.clip_norm") c.adam.clip_norm = d();
    else if (k == "pretrain.enabled") c.pretrain = to_bool(k, v);
    else if (k == "pretrain.epochs") c.pretrain_epochs = u();
    else if (k == "pretrain.batch_size") c.pretrain_batch = u();
    else if (k == "pretrain.peak_lr") c.pretrain_peak_lr = d();
    else if (k == "pretrain.warmup_fraction") c.warmup_fraction = d();
    else if (k == "finetune.epochs") c.finetune_epochs = u();
    else if (k == "finetune.batch_size") c.finetune_batch = u();
    else if (k == "finetune.lr") c.finetune_lr = d();
    else if (k == "finetune.class_weights") c.class_weighting = to_bool(k, v);
    else if (k == "eval.chance_trials") c.chance_trials = u();
  }
  c.synth.seed = c.seed;
  c.vq_train.seed = c.seed;
  c.vq_train.precision = c.precision;
  c.validate();
  return c;
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> m;
  std::istringstream is(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(n) + ": empty key");
    if (m.count(key)) throw ConfigError("config line " + std::to_string(n) + ": duplicate key '" + key + "'");
    m[key] = trim(line.substr(eq + 1));
  }
  return m;
}

ExperimentConfig parse_config(const std::string& text) { return config_from_map(parse_key_values(text)); }

ExperimentConfig read_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const ExperimentConfig& config) {
  std::string s;
  for (const auto& [k, v] : config_to_map(config)) s += k + " = " + v + "\n";
  return s;
}

std::string config_fingerprint(const ExperimentConfig& config) {
  auto m = config_to_map(config);
  m.erase("run_name");
  m.erase("out");
  return eval::fingerprint(m);
}

}  // namespace vqmir::pipeline
