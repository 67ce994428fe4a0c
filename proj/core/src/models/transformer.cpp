#include "vqmir/models/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

#include "vqmir/binary_io.hpp"
#include "vqmir/error.hpp"

namespace vqmir::models {
namespace {

constexpr char kModelMagic[] = "VQMIRTFM";
constexpr std::uint32_t kModelVersion = 1;
constexpr double kInitStd = 0.02;
constexpr double kMaskedScore = -1e30;

Parameter normal_param(std::string name, Shape shape, double std, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> normal(0.0, std);
  for (double& x : t.data()) x = normal(rng);
  return Parameter(std::move(name), std::move(t));
}

Parameter const_param(std::string name, Shape shape, double value) {
  return Parameter(std::move(name), Tensor(std::move(shape), value));
}

bool is_valid(const ops::RowMask& valid, std::size_t i) { return valid.empty() || valid[i] != 0; }

}  // namespace

const char* variant_name(ModelVariant v) {
  switch (v) {
    case ModelVariant::Spectro:
      return "spectro";
    case ModelVariant::Token:
      return "token";
    case ModelVariant::Codebook:
      return "codebook";
  }
  return "?";
}

ModelVariant parse_variant(const std::string& s) {
  if (s == "spectro") return ModelVariant::Spectro;
  if (s == "token") return ModelVariant::Token;
  if (s == "codebook") return ModelVariant::Codebook;
  throw ConfigError("variant must be spectro, token or codebook, got '" + s + "'");
}

void TransformerConfig::validate() const {
  if (n_layers == 0) throw ConfigError("n_layers must be at least 1");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (ffn_mult == 0) throw ConfigError("ffn_mult must be positive");
  if (max_seq_len == 0) throw ConfigError("max_seq_len must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
}

TransformerConfig TransformerConfig::full_shape() {
  TransformerConfig c;
  c.d_model = 768;
  c.n_heads = 12;
  c.max_seq_len = 1024;
  return c;
}

void MaskConfig::validate() const {
  if (token_mask_prob < 0.0 || token_mask_prob >= 1.0) throw ConfigError("token_mask_prob must lie in [0, 1)");
  if (replace_mask < 0.0 || replace_random < 0.0 || replace_mask + replace_random > 1.0) {
    throw ConfigError("token replacement split must be non-negative and sum to at most 1");
  }
  if (spectro_span_len == 0) throw ConfigError("spectro_span_len must be positive");
  if (spectro_mask_pcts.empty()) throw ConfigError("spectro_mask_pcts must not be empty");
  for (double p : spectro_mask_pcts) {
    if (!(p > 0.0) || p >= 100.0) throw ConfigError("mask percentages must lie in (0, 100)");
  }
}

std::size_t ModelInput::length() const { return features.rank() == 2 ? features.shape()[0] : ids.size(); }

std::size_t ModelInput::num_valid() const {
  if (valid.empty()) return length();
  return static_cast<std::size_t>(std::count_if(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; }));
}

std::size_t MaskedInput::num_masked() const {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; }));
}

std::size_t spectro_span_count(std::size_t length, double pct, std::size_t span_len) {
  if (!(pct > 0.0) || pct >= 100.0) throw ConfigError("mask percentage must lie in (0, 100), got " + std::to_string(pct));
  if (span_len == 0) throw ConfigError("span length must be positive");
  return static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(length) / static_cast<double>(span_len)));
}

MaskedInput apply_pretrain_mask(ModelVariant variant, const ModelInput& input, std::mt19937_64& rng,
                                const MaskConfig& config, std::size_t vocab_size, double spectro_pct) {
  config.validate();
  const std::size_t len = input.length();
  if (len < 16) throw ConfigError("masked pretraining needs at least 16 positions, got " + std::to_string(len));
  MaskedInput out;
  out.input = input;
  out.mask.assign(len, 0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  if (variant == ModelVariant::Spectro) {
    if (input.features.rank() != 2) throw ShapeError("spectro masking needs a feature matrix");
    out.target_frames = input.features;
    double pct = spectro_pct;
    if (!(pct > 0.0)) {
      pct = config.spectro_mask_pcts[std::uniform_int_distribution<std::size_t>(0, config.spectro_mask_pcts.size() - 1)(rng)];
    }
    out.spectro_pct = pct;
    // Spans stay inside the valid prefix.
    const std::size_t valid_len = input.num_valid();
    const std::size_t span = config.spectro_span_len;
    const std::size_t n = spectro_span_count(valid_len, pct, span);
    if (n * span > valid_len) {
      throw ConfigError(std::to_string(n) + " spans of " + std::to_string(span) + " frames do not fit in " +
                        std::to_string(valid_len) + " frames");
    }
    // Stars and bars: n distinct slots among (free + n) give sorted span
    // starts with random gaps.
    const std::size_t free = valid_len - n * span;
    std::vector<std::size_t> slots(free + n);
    std::iota(slots.begin(), slots.end(), 0);
    std::vector<std::size_t> chosen;
    std::sample(slots.begin(), slots.end(), std::back_inserter(chosen), n, rng);
    const std::size_t width = input.features.shape()[1];
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      const std::size_t start = chosen[i] + i * (span - 1);
      for (std::size_t t = start; t < start + span; ++t) {
        out.mask[t] = 1;
        std::fill_n(out.input.features.data().begin() + static_cast<std::ptrdiff_t>(t * width), width, 0.0);
      }
    }
    return out;
  }

  if (input.ids.size() != len) throw ShapeError("token and codebook masking need one id per position");
  out.target_ids = input.ids;
  std::bernoulli_distribution select(config.token_mask_prob);
  std::uniform_int_distribution<int> random_id(0, static_cast<int>(vocab_size) - 1);
  for (std::size_t i = 0; i < len; ++i) {
    if (!is_valid(input.valid, i) || !select(rng)) continue;
    out.mask[i] = 1;
    if (variant == ModelVariant::Codebook) {
      if (input.features.rank() != 2) throw ShapeError("codebook masking needs a feature matrix");
      auto row = out.input.features.row(i);
      std::fill(row.begin(), row.end(), 0.0);
      continue;
    }
    const double u = unit(rng);
    if (u < config.replace_mask) {
      out.input.ids[i] = static_cast<int>(vocab_size);
    } else if (u < config.replace_mask + config.replace_random) {
      out.input.ids[i] = random_id(rng);
    }
  }
  return out;
}

GenreTransformer::GenreTransformer(ModelVariant variant, TransformerConfig config, InputDims dims,
                                   std::size_t n_classes, std::uint64_t seed)
    : variant_(variant), config_(config), dims_(dims), n_classes_(n_classes) {
  config_.validate();
  if (n_classes_ < 2) throw ConfigError("a classifier needs at least 2 classes");
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model, f = d * config_.ffn_mult;
  switch (variant_) {
    case ModelVariant::Spectro:
      in_w_ = normal_param("input.w", {dims_.n_mels, d}, kInitStd, rng);
      break;
    case ModelVariant::Token:
      in_w_ = normal_param("input.embedding", {token_vocab(), d}, kInitStd, rng);
      break;
    case ModelVariant::Codebook:
      in_w_ = normal_param("input.w", {dims_.code_dim, d}, kInitStd, rng);
      break;
  }
  in_b_ = const_param("input.b", {d}, 0.0);
  pos_ = normal_param("position", {config_.max_seq_len, d}, kInitStd, rng);
  emb_ln_g_ = const_param("embed_ln.g", {d}, 1.0);
  emb_ln_b_ = const_param("embed_ln.b", {d}, 0.0);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    layers_.push_back(Layer{
        normal_param(p + "attn.wq", {d, d}, kInitStd, rng), const_param(p + "attn.bq", {d}, 0.0),
        normal_param(p + "attn.wk", {d, d}, kInitStd, rng), const_param(p + "attn.bk", {d}, 0.0),
        normal_param(p + "attn.wv", {d, d}, kInitStd, rng), const_param(p + "attn.bv", {d}, 0.0),
        normal_param(p + "attn.wo", {d, d}, kInitStd, rng), const_param(p + "attn.bo", {d}, 0.0),
        const_param(p + "ln1.g", {d}, 1.0), const_param(p + "ln1.b", {d}, 0.0),
        normal_param(p + "ffn.w1", {d, f}, kInitStd, rng), const_param(p + "ffn.b1", {f}, 0.0),
        normal_param(p + "ffn.w2", {f, d}, kInitStd, rng), const_param(p + "ffn.b2", {d}, 0.0),
        const_param(p + "ln2.g", {d}, 1.0), const_param(p + "ln2.b", {d}, 0.0),
    });
  }
  const std::size_t out_width = variant_ == ModelVariant::Spectro ? dims_.n_mels : dims_.vocab_size;
  pre_w_ = normal_param("pretrain_head.w", {d, out_width}, kInitStd, rng);
  pre_b_ = const_param("pretrain_head.b", {out_width}, 0.0);
  cls_w_ = normal_param("classifier.w", {d, n_classes_}, kInitStd, rng);
  cls_b_ = const_param("classifier.b", {n_classes_}, 0.0);
}

std::vector<Parameter*> GenreTransformer::parameters() {
  std::vector<Parameter*> out = encoder_parameters();
  for (Parameter* p : {&pre_w_, &pre_b_, &cls_w_, &cls_b_}) out.push_back(p);
  return out;
}

std::vector<const Parameter*> GenreTransformer::parameters() const {
  auto mut = const_cast<GenreTransformer*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::vector<Parameter*> GenreTransformer::encoder_parameters() {
  std::vector<Parameter*> out{&in_w_, &in_b_, &pos_, &emb_ln_g_, &emb_ln_b_};
  for (Layer& l : layers_) {
    for (Parameter* p : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln1_g, &l.ln1_b, &l.w1, &l.b1,
                         &l.w2, &l.b2, &l.ln2_g, &l.ln2_b}) {
      out.push_back(p);
    }
  }
  return out;
}

std::size_t GenreTransformer::num_weights() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value().numel();
  return n;
}

Var GenreTransformer::maybe_dropout(Var x, std::mt19937_64* rng) const {
  if (rng == nullptr || config_.dropout == 0.0) return x;
  return ops::dropout(x, config_.dropout, *rng);
}

Var GenreTransformer::embed(Tape& tape, const ModelInput& input, std::mt19937_64* rng) {
  const std::size_t len = input.length();
  if (len == 0) throw ShapeError("cannot embed an empty sequence");
  if (len > config_.max_seq_len) {
    throw ConfigError("sequence of " + std::to_string(len) + " positions exceeds max_seq_len " +
                      std::to_string(config_.max_seq_len) +
                      "; crop it first (random window for training, center window for evaluation)");
  }
  if (!input.valid.empty() && input.valid.size() != len) throw ShapeError("valid mask length differs from the sequence");
  Var x;
  if (variant_ == ModelVariant::Token) {
    for (int id : input.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= token_vocab()) {
        throw ShapeError("token id " + std::to_string(id) + " outside [0, " + std::to_string(token_vocab()) + ")");
      }
    }
    x = ops::add_bias(ops::gather_rows(tape.param(in_w_), input.ids), tape.param(in_b_));
  } else {
    const std::size_t width = variant_ == ModelVariant::Spectro ? dims_.n_mels : dims_.code_dim;
    if (input.features.rank() != 2 || input.features.shape()[1] != width) {
      throw ShapeError(std::string(variant_name(variant_)) + " input rows must be " + std::to_string(width) +
                       " wide, got " + shape_str(input.features.shape()));
    }
    x = ops::linear(tape.constant(input.features), tape.param(in_w_), tape.param(in_b_));
  }
  std::vector<int> positions(len);
  std::iota(positions.begin(), positions.end(), 0);
  x = ops::add(x, ops::gather_rows(tape.param(pos_), positions));
  x = ops::layer_norm(x, tape.param(emb_ln_g_), tape.param(emb_ln_b_));
  return maybe_dropout(x, rng);
}

Var GenreTransformer::self_attention(Tape& tape, Var x, Layer& layer, const Tensor& key_bias) {
  const std::size_t h = config_.n_heads, dh = config_.d_model / h;
  const Var q = ops::linear(x, tape.param(layer.wq), tape.param(layer.bq));
  const Var k = ops::linear(x, tape.param(layer.wk), tape.param(layer.bk));
  const Var v = ops::linear(x, tape.param(layer.wv), tape.param(layer.bv));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  for (std::size_t i = 0; i < h; ++i) {
    Var s = ops::scale(ops::matmul_nt(ops::slice_cols(q, i * dh, dh), ops::slice_cols(k, i * dh, dh)), inv_sqrt);
    if (!key_bias.empty()) s = ops::add_constant(s, key_bias);
    heads.push_back(ops::matmul(ops::softmax(s), ops::slice_cols(v, i * dh, dh)));
  }
  return ops::linear(ops::concat_cols(heads), tape.param(layer.wo), tape.param(layer.bo));
}

Var GenreTransformer::encode(Tape& tape, Var embedded, const ops::RowMask& valid, std::mt19937_64* rng) {
  const std::size_t len = embedded.shape()[0];
  Tensor key_bias;
  if (!valid.empty()) {
    if (valid.size() != len) throw ShapeError("valid mask length differs from the sequence");
    if (std::none_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; })) {
      throw ShapeError("sequence has no valid positions");
    }
    if (std::any_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v == 0; })) {
      key_bias = Tensor(Shape{len, len});
      for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t j = 0; j < len; ++j) {
          if (valid[j] == 0) key_bias.at(i, j) = kMaskedScore;
        }
      }
    }
  }
  Var x = embedded;
  for (Layer& layer : layers_) {
    const Var a = maybe_dropout(self_attention(tape, x, layer, key_bias), rng);
    x = ops::layer_norm(ops::add(x, a), tape.param(layer.ln1_g), tape.param(layer.ln1_b));
    Var f = ops::gelu(ops::linear(x, tape.param(layer.w1), tape.param(layer.b1)));
    f = maybe_dropout(ops::linear(f, tape.param(layer.w2), tape.param(layer.b2)), rng);
    x = ops::layer_norm(ops::add(x, f), tape.param(layer.ln2_g), tape.param(layer.ln2_b));
  }
  return x;
}

Var GenreTransformer::forward(Tape& tape, const ModelInput& input, std::mt19937_64* rng) {
  return encode(tape, embed(tape, input, rng), input.valid, rng);
}

Var GenreTransformer::pretrain_predictions(Tape& tape, Var hidden) {
  return ops::linear(hidden, tape.param(pre_w_), tape.param(pre_b_));
}

Var GenreTransformer::pretrain_loss(Tape& tape, Var predictions, const MaskedInput& batch) {
  if (batch.num_masked() == 0) throw Error("pretraining loss needs at least one masked position");
  if (variant_ == ModelVariant::Spectro) {
    return ops::huber(predictions, tape.constant(batch.target_frames), 1.0, batch.mask);
  }
  return ops::cross_entropy(predictions, batch.target_ids, batch.mask);
}

Var GenreTransformer::pretrain_objective(Tape& tape, const MaskedInput& batch, std::mt19937_64* rng) {
  return pretrain_loss(tape, pretrain_predictions(tape, forward(tape, batch.input, rng)), batch);
}

Var GenreTransformer::classify(Tape& tape, Var hidden, const ops::RowMask& valid) {
  if (!valid.empty() && std::none_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; })) {
    throw ShapeError("cannot classify an all-padding sequence");
  }
  return ops::linear(ops::mean_rows(hidden, valid), tape.param(cls_w_), tape.param(cls_b_));
}

Var GenreTransformer::class_logits(Tape& tape, const ModelInput& input, std::mt19937_64* rng) {
  if (input.length() > 0 && input.num_valid() == 0) throw ShapeError("cannot classify an all-padding sequence");
  return classify(tape, forward(tape, input, rng), input.valid);
}

int GenreTransformer::predict(const ModelInput& input) {
  Tape tape;
  const Tensor& logits = class_logits(tape, input).value();
  return static_cast<int>(std::max_element(logits.data().begin(), logits.data().end()) - logits.data().begin());
}

void GenreTransformer::save(std::ostream& os, Precision precision) const {
  binio::put_bytes(os, std::string(kModelMagic, 8));
  binio::put_u32(os, kModelVersion);
  binio::put_string(os, variant_name(variant_));
  for (std::size_t v : {config_.n_layers, config_.d_model, config_.n_heads, config_.ffn_mult, config_.max_seq_len}) {
    binio::put_u32(os, static_cast<std::uint32_t>(v));
  }
  binio::put_f64(os, config_.dropout);
  for (std::size_t v : {dims_.n_mels, dims_.vocab_size, dims_.code_dim, n_classes_}) {
    binio::put_u32(os, static_cast<std::uint32_t>(v));
  }
  write_param_table(os, parameters(), precision);
}

GenreTransformer GenreTransformer::load(std::istream& is) {
  if (binio::get_bytes(is, 8) != std::string(kModelMagic, 8)) throw FormatError("not a transformer checkpoint");
  const std::uint32_t version = binio::get_u32(is);
  if (version != kModelVersion) {
    throw FormatError("transformer checkpoint version " + std::to_string(version) + ", this build reads version " +
                      std::to_string(kModelVersion));
  }
  ModelVariant variant;
  try {
    variant = parse_variant(binio::get_string(is, 64));
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  TransformerConfig c;
  c.n_layers = binio::get_u32(is);
  c.d_model = binio::get_u32(is);
  c.n_heads = binio::get_u32(is);
  c.ffn_mult = binio::get_u32(is);
  c.max_seq_len = binio::get_u32(is);
  c.dropout = binio::get_f64(is);
  InputDims dims;
  dims.n_mels = binio::get_u32(is);
  dims.vocab_size = binio::get_u32(is);
  dims.code_dim = binio::get_u32(is);
  const std::size_t n_classes = binio::get_u32(is);
  try {
    GenreTransformer model(variant, c, dims, n_classes, 0);
    read_param_table(is, model.parameters());
    return model;
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid stored model config: ") + e.what());
  }
}

std::size_t center_crop_start(std::size_t length, std::size_t window) {
  return length > window ? (length - window) / 2 : 0;
}

std::size_t random_crop_start(std::size_t length, std::size_t window, std::mt19937_64& rng) {
  if (length <= window) return 0;
  return std::uniform_int_distribution<std::size_t>(0, length - window)(rng);
}

ModelInput crop(const ModelInput& input, std::size_t start, std::size_t window) {
  const std::size_t len = input.length();
  if (start >= len && len > 0) throw ShapeError("crop start beyond the sequence");
  const std::size_t n = std::min(window, len - start);
  ModelInput out;
  if (input.features.rank() == 2) {
    const std::size_t w = input.features.shape()[1];
    out.features = Tensor(Shape{n, w});
    std::copy_n(input.features.data().begin() + static_cast<std::ptrdiff_t>(start * w), n * w,
                out.features.data().begin());
  }
  if (!input.ids.empty()) out.ids.assign(input.ids.begin() + static_cast<std::ptrdiff_t>(start),
                                         input.ids.begin() + static_cast<std::ptrdiff_t>(start + n));
  if (!input.valid.empty()) out.valid.assign(input.valid.begin() + static_cast<std::ptrdiff_t>(start),
                                             input.valid.begin() + static_cast<std::ptrdiff_t>(start + n));
  return out;
}

}  // namespace vqmir::models
