#include "vqmir/vqcodec/vqvae.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include "vqmir/binary_io.hpp"
#include "vqmir/error.hpp"
#include "vqmir/numerics/ops.hpp"

namespace vqmir::vq {
namespace {

constexpr char kTokenMagic[] = "VQMIRTOK";
constexpr char kCodebookMagic[] = "VQMIRCBK";
constexpr char kModelMagic[] = "VQMIRVQV";
constexpr std::uint32_t kTokenVersion = 1;
constexpr std::uint32_t kCodebookVersion = 1;
constexpr std::uint32_t kModelVersion = 1;

constexpr double kQuantizeKinkBand = 1e-6;

void check_magic(std::istream& in, const char* magic, const std::string& what) {
  if (binio::get_bytes(in, 8) != std::string(magic, 8)) throw FormatError("not a " + what + " file (bad magic)");
}

void check_version(std::uint32_t found, std::uint32_t expected, const std::string& what) {
  if (found != expected) {
    throw FormatError("unsupported " + what + " version " + std::to_string(found) + " (this build reads version " +
                      std::to_string(expected) + ")");
  }
}

Tensor padded_input(std::span<const double> samples, std::size_t compression) {
  const std::size_t len = token_length(samples.size(), compression) * compression;
  Tensor x(Shape{len, 1});
  std::copy(samples.begin(), samples.end(), x.data().begin());
  return x;
}

}  // namespace

std::size_t VqVaeConfig::num_stages() const { return static_cast<std::size_t>(std::countr_zero(compression)); }

void VqVaeConfig::validate() const {
  if (compression < 2 || !std::has_single_bit(compression)) {
    throw ConfigError("compression must be a power of two >= 2, got " + std::to_string(compression));
  }
  if (vocab_size < 2 || vocab_size > 65536) throw ConfigError("vocab_size must lie in [2, 65536] (tokens are u16)");
  if (code_dim == 0 || channels == 0) throw ConfigError("code_dim and channels must be positive");
  if (!(commitment_beta >= 0.0)) throw ConfigError("commitment_beta must be non-negative");
}

std::size_t token_length(std::size_t num_samples, std::size_t compression) {
  if (compression == 0) throw ConfigError("compression must be positive");
  return (num_samples + compression - 1) / compression;
}

Quantized quantize(const Tensor& latents, const Tensor& codebook) {
  if (latents.rank() != 2 || codebook.rank() != 2) throw ShapeError("quantize expects matrices");
  const std::size_t n = latents.shape()[0], d = latents.shape()[1], v = codebook.shape()[0];
  if (codebook.shape()[1] != d) {
    throw ShapeError("quantize: latent width " + std::to_string(d) + " does not match code_dim " +
                     std::to_string(codebook.shape()[1]));
  }
  if (v == 0) throw ShapeError("quantize: empty codebook");
  Quantized q;
  q.tokens.tokens.resize(n);
  q.tokens.vocab_size = v;
  q.margins.resize(n);
  q.codes.vectors = Tensor(Shape{n, d});
  const double* code = codebook.data().data();
  for (std::size_t r = 0; r < n; ++r) {
    const double* z = latents.data().data() + r * d;
    double best = std::numeric_limits<double>::infinity(), second = best;
    std::size_t arg = 0;
    for (std::size_t k = 0; k < v; ++k) {
      const double* e = code + k * d;
      double dist = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = z[c] - e[c];
        dist += diff * diff;
      }
      if (dist < best) {
        second = best;
        best = dist;
        arg = k;
      } else if (dist < second) {
        second = dist;
      }
    }
    q.tokens.tokens[r] = static_cast<int>(arg);
    q.margins[r] = v == 1 ? std::numeric_limits<double>::infinity() : second - best;
    std::copy_n(code + arg * d, d, q.codes.vectors.data().data() + r * d);
  }
  return q;
}

CodebookSequence gather_codes(const TokenSequence& tokens, const Tensor& codebook) {
  const std::size_t v = codebook.shape()[0], d = codebook.shape()[1];
  CodebookSequence out{Tensor(Shape{tokens.tokens.size(), d}), tokens.clip_id};
  for (std::size_t i = 0; i < tokens.tokens.size(); ++i) {
    const int id = tokens.tokens[i];
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw ShapeError("token " + std::to_string(id) + " outside codebook of " + std::to_string(v));
    }
    std::copy_n(codebook.data().data() + static_cast<std::size_t>(id) * d, d, out.vectors.data().data() + i * d);
  }
  return out;
}

VqVae::VqVae(VqVaeConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t c = config_.channels, s = config_.num_stages();
  enc_in_ = make_conv("enc.in", 3, 1, c, 1.0, rng);
  for (std::size_t i = 0; i < s; ++i) {
    const std::string p = "enc.stage" + std::to_string(i);
    enc_down_.push_back(make_conv(p + ".down", 4, c, c, 1.0, rng));
    enc_res_a_.push_back(make_conv(p + ".res_a", 3, c, c, 1.0, rng));
    enc_res_b_.push_back(make_conv(p + ".res_b", 1, c, c, 0.1, rng));
  }
  enc_out_ = make_conv("enc.out", 1, c, config_.code_dim, 1.0, rng);
  dec_in_ = make_conv("dec.in", 3, config_.code_dim, c, 1.0, rng);
  for (std::size_t i = 0; i < s; ++i) {
    const std::string p = "dec.stage" + std::to_string(i);
    dec_res_a_.push_back(make_conv(p + ".res_a", 3, c, c, 1.0, rng));
    dec_res_b_.push_back(make_conv(p + ".res_b", 1, c, c, 0.1, rng));
    dec_up_.push_back(make_conv(p + ".up", 4, c, c, 1.0, rng));
  }
  dec_out_ = make_conv("dec.out", 3, c, 1, 1.0, rng);

  Tensor cb(Shape{config_.vocab_size, config_.code_dim});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& x : cb.data()) x = normal(rng);
  codebook_.vectors = Parameter("codebook", std::move(cb));
  codebook_.usage.assign(config_.vocab_size, 0);
}

VqVae::Conv VqVae::make_conv(const std::string& name, std::size_t k, std::size_t cin, std::size_t cout, double gain,
                             std::mt19937_64& rng) {
  Tensor w(Shape{k, cin, cout});
  std::normal_distribution<double> normal(0.0, gain / std::sqrt(static_cast<double>(k * cin)));
  for (double& x : w.data()) x = normal(rng);
  return Conv{Parameter(name + ".w", std::move(w)), Parameter(name + ".b", Tensor(Shape{cout}))};
}

std::vector<Parameter*> VqVae::parameters() {
  std::vector<Parameter*> out;
  auto add = [&out](Conv& c) {
    out.push_back(&c.w);
    out.push_back(&c.b);
  };
  add(enc_in_);
  for (std::size_t i = 0; i < enc_down_.size(); ++i) {
    add(enc_down_[i]);
    add(enc_res_a_[i]);
    add(enc_res_b_[i]);
  }
  add(enc_out_);
  add(dec_in_);
  for (std::size_t i = 0; i < dec_up_.size(); ++i) {
    add(dec_res_a_[i]);
    add(dec_res_b_[i]);
    add(dec_up_[i]);
  }
  add(dec_out_);
  out.push_back(&codebook_.vectors);
  return out;
}

std::vector<const Parameter*> VqVae::parameters() const {
  auto mut = const_cast<VqVae*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::vector<Parameter*> VqVae::encoder_parameters() {
  std::vector<Parameter*> all = parameters();
  std::vector<Parameter*> out;
  for (Parameter* p : all) {
    if (p->name().rfind("enc.", 0) == 0) out.push_back(p);
  }
  return out;
}

Var VqVae::conv(Tape& tape, Var x, const Conv& c, std::size_t stride, std::size_t pad) const {
  // Weights are only read; the tape needs a mutable handle for gradient routing.
  auto& w = const_cast<Parameter&>(c.w);
  auto& b = const_cast<Parameter&>(c.b);
  return ops::conv1d(x, tape.param(w), tape.param(b), stride, pad);
}

Var VqVae::residual(Tape& tape, Var x, const Conv& a, const Conv& b) const {
  Var h = conv(tape, ops::relu(x), a, 1, 1);
  h = conv(tape, ops::relu(h), b, 1, 0);
  return ops::add(x, h);
}

Var VqVae::encode(Tape& tape, std::span<const double> samples) const {
  if (samples.empty()) throw Error("cannot encode an empty clip");
  Var h = conv(tape, tape.constant(padded_input(samples, config_.compression)), enc_in_, 1, 1);
  for (std::size_t i = 0; i < enc_down_.size(); ++i) {
    h = conv(tape, h, enc_down_[i], 2, 1);
    h = residual(tape, h, enc_res_a_[i], enc_res_b_[i]);
  }
  return conv(tape, h, enc_out_, 1, 0);
}

Tensor VqVae::encode(const dsp::AudioClip& clip) const {
  Tape tape;
  return encode(tape, clip.samples).value();
}

Var VqVae::decode(Tape& tape, Var codes) const {
  if (codes.value().rank() != 2 || codes.shape()[0] == 0) throw ShapeError("decode expects a non-empty [L x code_dim]");
  Var h = conv(tape, codes, dec_in_, 1, 1);
  for (std::size_t i = 0; i < dec_up_.size(); ++i) {
    h = residual(tape, h, dec_res_a_[i], dec_res_b_[i]);
    auto& w = const_cast<Parameter&>(dec_up_[i].w);
    auto& b = const_cast<Parameter&>(dec_up_[i].b);
    h = ops::conv_transpose1d(h, tape.param(w), tape.param(b), 2, 1);
  }
  return conv(tape, ops::relu(h), dec_out_, 1, 1);
}

dsp::AudioClip VqVae::decode(const CodebookSequence& codes, std::uint32_t sample_rate) const {
  Tape tape;
  const Var out = decode(tape, tape.constant(codes.vectors));
  dsp::AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.id = codes.clip_id;
  clip.samples = out.value().storage();
  return clip;
}

TokenSequence VqVae::tokenize(const dsp::AudioClip& clip) const {
  Quantized q = quantize(encode(clip), codebook_.vectors.value());
  q.tokens.clip_id = clip.id;
  q.tokens.compression = config_.compression;
  return q.tokens;
}

VqLossVars VqVae::loss(Tape& tape, std::span<const double> samples, const StopGradFreeze* freeze) {
  VqLossVars out;
  out.latents = encode(tape, samples);
  const Tensor& z = out.latents.value();
  Quantized q = quantize(z, codebook_.vectors.value());

  KinkRecord kink{"quantize", q.margins, q.tokens.tokens, kQuantizeKinkBand};
  tape.record_kink(std::move(kink));

  if (freeze != nullptr && (freeze->latents.shape() != z.shape() || freeze->tokens.size() != q.tokens.tokens.size())) {
    throw ShapeError("stop-gradient freeze does not match the latent shape");
  }
  const std::vector<int>& tokens = freeze != nullptr ? freeze->tokens : q.tokens.tokens;
  const Var e = ops::gather_rows(tape.param(codebook_.vectors), tokens);
  const Var z_sg = freeze != nullptr ? tape.constant(freeze->latents) : ops::stop_gradient(out.latents);
  const Var e_sg = freeze != nullptr ? tape.constant(freeze->codes) : ops::stop_gradient(e);

  out.codebook = ops::mse(z_sg, e);
  out.commit = ops::scale(ops::mse(out.latents, e_sg), config_.commitment_beta);
  if (freeze != nullptr) {
    Tensor offset = freeze->codes;
    for (std::size_t i = 0; i < offset.numel(); ++i) offset[i] -= freeze->latents[i];
    out.quantized = ops::add_constant(out.latents, offset);
  } else {
    out.quantized = ops::straight_through(out.latents, e.value());
  }

  const Var recon = ops::transpose(decode(tape, out.quantized));
  const Var target = tape.constant(Tensor(Shape{1, samples.size()}, std::vector<double>(samples.begin(), samples.end())));
  out.recon = ops::mse(ops::slice_cols(recon, 0, samples.size()), target);
  out.total = ops::add(ops::add(out.recon, out.codebook), out.commit);
  out.tokens = std::move(q.tokens);
  out.tokens.compression = config_.compression;
  return out;
}

VqLoss VqVae::loss(const dsp::AudioClip& clip) {
  Tape tape;
  const VqLossVars v = loss(tape, clip.samples);
  return {v.total.value().item(), v.recon.value().item(), v.codebook.value().item(), v.commit.value().item()};
}

void VqVae::count_usage(const TokenSequence& tokens) {
  for (int t : tokens.tokens) ++codebook_.usage.at(static_cast<std::size_t>(t));
}

std::size_t VqVae::reset_dead_codes(const Tensor& latents, std::mt19937_64& rng) {
  const std::size_t n = latents.shape()[0], d = config_.code_dim;
  if (n == 0) throw Error("dead-code reset needs at least one latent row");
  double var = 0.0;
  for (double x : latents.data()) var += x * x;
  const double noise_scale = 1e-3 * std::sqrt(var / static_cast<double>(latents.numel()) + 1e-12);
  std::normal_distribution<double> noise(0.0, noise_scale);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  Tensor& cb = codebook_.vectors.value();
  std::size_t reset = 0;
  for (std::size_t k = 0; k < config_.vocab_size; ++k) {
    if (codebook_.usage[k] != 0) continue;
    const double* src = latents.data().data() + order[reset % n] * d;
    // Jitter keeps codes seeded from the same latent row distinct.
    for (std::size_t c = 0; c < d; ++c) cb[k * d + c] = src[c] + noise(rng);
    ++reset;
  }
  std::fill(codebook_.usage.begin(), codebook_.usage.end(), 0);
  return reset;
}

std::vector<VqTrainRecord> train_vqvae(VqVae& model, std::span<const dsp::AudioClip> clips,
                                       const VqTrainOptions& options) {
  if (clips.empty()) throw Error("train_vqvae: no clips");
  const std::size_t comp = model.config().compression;
  const std::size_t crop = std::max(comp, options.crop_samples / comp * comp);
  std::mt19937_64 rng(options.seed);
  Adam adam(model.parameters(), AdamConfig{});
  std::vector<VqTrainRecord> history;

  for (std::size_t step = 1; step <= options.steps; ++step) {
    Tape tape;
    std::vector<Var> totals;
    VqTrainRecord rec;
    rec.step = step;
    std::vector<double> all_latents;
    for (std::size_t b = 0; b < options.batch_clips; ++b) {
      const dsp::AudioClip& clip = clips[std::uniform_int_distribution<std::size_t>(0, clips.size() - 1)(rng)];
      std::span<const double> s(clip.samples);
      if (s.size() > crop) {
        const std::size_t start = std::uniform_int_distribution<std::size_t>(0, s.size() - crop)(rng);
        s = s.subspan(start, crop);
      }
      VqLossVars v = model.loss(tape, s);
      totals.push_back(v.total);
      rec.loss.recon += v.recon.value().item();
      rec.loss.codebook += v.codebook.value().item();
      rec.loss.commit += v.commit.value().item();
      model.count_usage(v.tokens);
      all_latents.insert(all_latents.end(), v.latents.value().data().begin(), v.latents.value().data().end());
    }
    Var total = totals[0];
    for (std::size_t i = 1; i < totals.size(); ++i) total = ops::add(total, totals[i]);
    total = ops::scale(total, 1.0 / static_cast<double>(totals.size()));
    tape.backward(total);
    adam.step(options.lr, options.precision);

    const double inv = 1.0 / static_cast<double>(totals.size());
    rec.loss.recon *= inv;
    rec.loss.codebook *= inv;
    rec.loss.commit *= inv;
    rec.loss.total = total.value().item();
    if (options.reset_every != 0 && step % options.reset_every == 0) {
      const std::size_t d = model.config().code_dim;
      const std::size_t rows = all_latents.size() / d;
      const Tensor lat(Shape{rows, d}, std::move(all_latents));
      rec.codes_reset = model.reset_dead_codes(lat, rng);
      round_to_precision(model.codebook().vectors, options.precision);
    }
    history.push_back(rec);
  }
  return history;
}

CodebookStats codebook_stats(std::span<const TokenSequence> batch, std::size_t vocab_size) {
  if (vocab_size == 0) throw ConfigError("codebook_stats: vocab_size must be positive");
  std::vector<std::uint64_t> counts(vocab_size, 0);
  std::uint64_t total = 0;
  for (const auto& seq : batch) {
    for (int t : seq.tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
        throw ShapeError("codebook_stats: token " + std::to_string(t) + " outside vocab " + std::to_string(vocab_size));
      }
      ++counts[static_cast<std::size_t>(t)];
      ++total;
    }
  }
  if (total == 0) throw Error("codebook_stats: no tokens");
  CodebookStats s;
  double h = 0.0;
  std::size_t used = 0;
  for (std::uint64_t c : counts) {
    if (c == 0) continue;
    ++used;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  s.utilization = static_cast<double>(used) / static_cast<double>(vocab_size);
  s.perplexity = std::exp(h);
  return s;
}

void write_token_cache(const std::filesystem::path& path, const TokenSequence& tokens) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  binio::put_bytes(out, std::string(kTokenMagic, 8));
  binio::put_u32(out, kTokenVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(tokens.compression));
  binio::put_u32(out, static_cast<std::uint32_t>(tokens.vocab_size));
  binio::put_u32(out, static_cast<std::uint32_t>(tokens.tokens.size()));
  for (int t : tokens.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= tokens.vocab_size) throw ShapeError("token id out of range");
    binio::put_u16(out, static_cast<std::uint16_t>(t));
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

TokenSequence read_token_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    check_magic(in, kTokenMagic, "token cache");
    check_version(binio::get_u32(in), kTokenVersion, "token cache");
    TokenSequence seq;
    seq.compression = binio::get_u32(in);
    seq.vocab_size = binio::get_u32(in);
    const std::uint32_t n = binio::get_u32(in);
    seq.tokens.resize(n);
    for (int& t : seq.tokens) {
      t = binio::get_u16(in);
      if (static_cast<std::size_t>(t) >= seq.vocab_size) throw FormatError("token id exceeds vocabulary");
    }
    seq.clip_id = path.stem().string();
    return seq;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_codebook(const std::filesystem::path& path, const Tensor& codebook) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  binio::put_bytes(out, std::string(kCodebookMagic, 8));
  binio::put_u32(out, kCodebookVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(codebook.shape()[0]));
  binio::put_u32(out, static_cast<std::uint32_t>(codebook.shape()[1]));
  for (double v : codebook.data()) binio::put_f32(out, static_cast<float>(v));
  if (!out) throw FormatError("failed writing " + path.string());
}

Tensor read_codebook(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    check_magic(in, kCodebookMagic, "codebook");
    check_version(binio::get_u32(in), kCodebookVersion, "codebook");
    const std::uint32_t v = binio::get_u32(in), d = binio::get_u32(in);
    Tensor cb(Shape{v, d});
    for (double& x : cb.data()) x = binio::get_f32(in);
    return cb;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_vqvae(const std::filesystem::path& path, const VqVae& model, Precision precision) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  const VqVaeConfig& c = model.config();
  binio::put_bytes(out, std::string(kModelMagic, 8));
  binio::put_u32(out, kModelVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(c.compression));
  binio::put_u32(out, static_cast<std::uint32_t>(c.vocab_size));
  binio::put_u32(out, static_cast<std::uint32_t>(c.code_dim));
  binio::put_u32(out, static_cast<std::uint32_t>(c.channels));
  binio::put_f64(out, c.commitment_beta);
  write_param_table(out, model.parameters(), precision);
  if (!out) throw FormatError("failed writing " + path.string());
}

VqVae load_vqvae(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    check_magic(in, kModelMagic, "VQ-VAE checkpoint");
    check_version(binio::get_u32(in), kModelVersion, "VQ-VAE checkpoint");
    VqVaeConfig c;
    c.compression = binio::get_u32(in);
    c.vocab_size = binio::get_u32(in);
    c.code_dim = binio::get_u32(in);
    c.channels = binio::get_u32(in);
    c.commitment_beta = binio::get_f64(in);
    VqVae model(c, 0);
    read_param_table(in, model.parameters());
    return model;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": invalid stored config: " + e.what());
  }
}

}  // namespace vqmir::vq
