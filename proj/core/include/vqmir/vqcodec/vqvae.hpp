#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vqmir/dsp/audio.hpp"
#include "vqmir/numerics/optim.hpp"
#include "vqmir/numerics/tape.hpp"

namespace vqmir::vq {

struct VqVaeConfig {
  std::size_t compression = 128;  // power of two; one stride-2 stage per factor of 2
  std::size_t vocab_size = 2048;
  std::size_t code_dim = 64;
  std::size_t channels = 32;
  double commitment_beta = 0.25;

  std::size_t num_stages() const;
  void validate() const;
};

// ceil(num_samples / compression)
std::size_t token_length(std::size_t num_samples, std::size_t compression);

struct Codebook {
  Parameter vectors;                   // [vocab x code_dim]
  std::vector<std::uint64_t> usage;    // assignments since the last dead-code reset

  std::size_t size() const { return vectors.value().shape()[0]; }
  std::size_t dim() const { return vectors.value().shape()[1]; }
};

struct TokenSequence {
  std::vector<int> tokens;
  std::string clip_id;
  std::size_t compression = 128;
  std::size_t vocab_size = 2048;
};

// Rows gathered from the codebook by token id.
struct CodebookSequence {
  Tensor vectors;  // [L x code_dim]
  std::string clip_id;
};

struct Quantized {
  TokenSequence tokens;
  CodebookSequence codes;
  // Squared-distance gap between the second-nearest and nearest code per row.
  std::vector<double> margins;
};

// Nearest codebook row per latent row by squared L2 distance; ties go to the
// lowest index.
Quantized quantize(const Tensor& latents, const Tensor& codebook);
CodebookSequence gather_codes(const TokenSequence& tokens, const Tensor& codebook);

struct VqLoss {
  double total = 0.0;
  double recon = 0.0;
  double codebook = 0.0;
  double commit = 0.0;
};

struct VqLossVars {
  Var total, recon, codebook, commit;
  Var latents;
  Var quantized;  // straight-through output fed to the decoder
  TokenSequence tokens;
};

// Stop-gradient operands pinned to fixed values. With a freeze in place the
// loss is a smooth function of the weights whose gradient coincides with the
// straight-through gradient at the freeze point, which is what finite
// differences can check.
struct StopGradFreeze {
  Tensor latents;
  Tensor codes;
  std::vector<int> tokens;
};

class VqVae {
 public:
  VqVae(VqVaeConfig config, std::uint64_t seed);

  const VqVaeConfig& config() const { return config_; }
  Codebook& codebook() { return codebook_; }
  const Codebook& codebook() const { return codebook_; }

  // Encoder and decoder weights followed by the codebook.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::vector<Parameter*> encoder_parameters();

  // Latents [token_length x code_dim]. Input is right-padded with zeros to a
  // multiple of the compression factor.
  Var encode(Tape& tape, std::span<const double> samples) const;
  Tensor encode(const dsp::AudioClip& clip) const;
  // [L x code_dim] -> L * compression samples.
  Var decode(Tape& tape, Var codes) const;
  dsp::AudioClip decode(const CodebookSequence& codes, std::uint32_t sample_rate = 44100) const;

  TokenSequence tokenize(const dsp::AudioClip& clip) const;

  VqLossVars loss(Tape& tape, std::span<const double> samples, const StopGradFreeze* freeze = nullptr);
  VqLoss loss(const dsp::AudioClip& clip);

  // Reassigns every code unused since the last reset to a distinct row of
  // `latents` (random order), then clears usage counters. Returns the number
  // of codes reset.
  std::size_t reset_dead_codes(const Tensor& latents, std::mt19937_64& rng);
  void count_usage(const TokenSequence& tokens);

 private:
  struct Conv {
    Parameter w, b;
  };
  Conv make_conv(const std::string& name, std::size_t k, std::size_t cin, std::size_t cout, double gain,
                 std::mt19937_64& rng);
  Var conv(Tape& tape, Var x, const Conv& c, std::size_t stride, std::size_t pad) const;
  Var residual(Tape& tape, Var x, const Conv& a, const Conv& b) const;

  VqVaeConfig config_;
  Conv enc_in_;
  std::vector<Conv> enc_down_, enc_res_a_, enc_res_b_;
  Conv enc_out_;
  Conv dec_in_;
  std::vector<Conv> dec_res_a_, dec_res_b_, dec_up_;
  Conv dec_out_;
  Codebook codebook_;
};

struct VqTrainOptions {
  std::size_t steps = 200;
  std::size_t batch_clips = 4;
  std::size_t crop_samples = 8192;  // rounded down to a compression multiple
  double lr = 2e-3;
  std::size_t reset_every = 25;  // dead-code reset period in steps, 0 disables
  std::uint64_t seed = 0;
  Precision precision = Precision::F64;
};

struct VqTrainRecord {
  std::size_t step = 0;
  VqLoss loss;
  std::size_t codes_reset = 0;
};

// Trains on random crops of `clips`. Deterministic for a fixed seed.
std::vector<VqTrainRecord> train_vqvae(VqVae& model, std::span<const dsp::AudioClip> clips,
                                       const VqTrainOptions& options);

struct CodebookStats {
  double utilization = 0.0;  // fraction of the vocabulary that occurs
  double perplexity = 0.0;   // exp of the entropy of code usage, in nats
};
CodebookStats codebook_stats(std::span<const TokenSequence> batch, std::size_t vocab_size);

// Token cache: "VQMIRTOK", u32 version, u32 compression, u32 vocab, u32 L,
// then L little-endian u16 ids.
void write_token_cache(const std::filesystem::path& path, const TokenSequence& tokens);
TokenSequence read_token_cache(const std::filesystem::path& path);

// Codebook checkpoint: "VQMIRCBK", u32 version, u32 vocab, u32 code_dim, then
// vocab * code_dim little-endian f32.
void write_codebook(const std::filesystem::path& path, const Tensor& codebook);
Tensor read_codebook(const std::filesystem::path& path);

// Whole-model checkpoint (config plus named parameter table).
void save_vqvae(const std::filesystem::path& path, const VqVae& model, Precision precision = Precision::F64);
VqVae load_vqvae(const std::filesystem::path& path);

}  // namespace vqmir::vq
