#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "vqmir/numerics/ops.hpp"
#include "vqmir/numerics/optim.hpp"

namespace vqmir::models {

enum class ModelVariant { Spectro, Token, Codebook };

const char* variant_name(ModelVariant v);  // "spectro" | "token" | "codebook"
ModelVariant parse_variant(const std::string& s);

struct TransformerConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 256;
  std::size_t n_heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t max_seq_len = 256;
  double dropout = 0.1;

  void validate() const;
  // d_model 768 / 12 heads, for full-size runs.
  static TransformerConfig full_shape();
};

struct MaskConfig {
  double token_mask_prob = 0.30;
  // Replacement split for selected tokens: [MASK] / random id / unchanged.
  double replace_mask = 0.8;
  double replace_random = 0.1;
  std::size_t spectro_span_len = 8;
  std::vector<double> spectro_mask_pcts{15.0, 30.0, 45.0};

  void validate() const;
};

// Input widths of the three front-ends.
struct InputDims {
  std::size_t n_mels = 86;       // Spectro row width
  std::size_t vocab_size = 2048;  // Token/Codebook target vocabulary
  std::size_t code_dim = 64;      // Codebook row width
};

// One sequence. Spectro uses `features` ([L x n_mels], normalized dB);
// Token uses `ids`; Codebook uses `features` ([L x code_dim]) for input and
// `ids` as pretraining targets. `valid` flags real positions (empty = all
// real); padded positions are excluded from attention and pooling.
struct ModelInput {
  Tensor features;
  std::vector<int> ids;
  ops::RowMask valid;

  std::size_t length() const;
  std::size_t num_valid() const;
};

struct MaskedInput {
  ModelInput input;
  std::vector<int> target_ids;  // Token/Codebook: original ids at every position
  Tensor target_frames;         // Spectro: original frames
  ops::RowMask mask;            // 1 at supervised positions
  double spectro_pct = 0.0;     // percentage used for Spectro spans

  std::size_t num_masked() const;
};

// Number of spans that cover at least `pct` percent of `length` frames.
std::size_t spectro_span_count(std::size_t length, double pct, std::size_t span_len);

// Applies the variant's pretraining corruption. Spectro draws its percentage
// from config.spectro_mask_pcts unless `spectro_pct` is positive.
MaskedInput apply_pretrain_mask(ModelVariant variant, const ModelInput& input, std::mt19937_64& rng,
                                const MaskConfig& config, std::size_t vocab_size, double spectro_pct = 0.0);

// Encoder with front-end, pretraining head and genre head.
class GenreTransformer {
 public:
  GenreTransformer(ModelVariant variant, TransformerConfig config, InputDims dims, std::size_t n_classes,
                   std::uint64_t seed);

  ModelVariant variant() const { return variant_; }
  const TransformerConfig& config() const { return config_; }
  const InputDims& dims() const { return dims_; }
  std::size_t n_classes() const { return n_classes_; }
  // Token vocabulary including [MASK] and [PAD].
  std::size_t token_vocab() const { return dims_.vocab_size + 2; }
  int mask_id() const { return static_cast<int>(dims_.vocab_size); }
  int pad_id() const { return static_cast<int>(dims_.vocab_size) + 1; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::vector<Parameter*> encoder_parameters();  // everything except the two heads
  std::size_t num_weights() const;

  // Front-end plus learned positions and embedding layer norm, [L x d_model].
  // `rng` enables dropout; null means inference.
  Var embed(Tape& tape, const ModelInput& input, std::mt19937_64* rng = nullptr);
  Var encode(Tape& tape, Var embedded, const ops::RowMask& valid, std::mt19937_64* rng = nullptr);
  Var forward(Tape& tape, const ModelInput& input, std::mt19937_64* rng = nullptr);

  // Token/Codebook: [L x vocab] logits. Spectro: [L x n_mels] frames.
  Var pretrain_predictions(Tape& tape, Var hidden);
  // Cross-entropy or Huber (delta 1) over masked positions only.
  Var pretrain_loss(Tape& tape, Var predictions, const MaskedInput& batch);
  Var pretrain_objective(Tape& tape, const MaskedInput& batch, std::mt19937_64* rng = nullptr);

  // Mean over valid positions, then a linear map to [1 x n_classes].
  Var classify(Tape& tape, Var hidden, const ops::RowMask& valid);
  Var class_logits(Tape& tape, const ModelInput& input, std::mt19937_64* rng = nullptr);
  int predict(const ModelInput& input);

  // Header, variant, configs and the named parameter table.
  void save(std::ostream& os, Precision precision) const;
  static GenreTransformer load(std::istream& is);

 private:
  struct Layer {
    Parameter wq, bq, wk, bk, wv, bv, wo, bo;
    Parameter ln1_g, ln1_b;
    Parameter w1, b1, w2, b2;
    Parameter ln2_g, ln2_b;
  };

  Var self_attention(Tape& tape, Var x, Layer& layer, const Tensor& key_bias);
  Var maybe_dropout(Var x, std::mt19937_64* rng) const;

  ModelVariant variant_;
  TransformerConfig config_;
  InputDims dims_;
  std::size_t n_classes_;
  Parameter in_w_, in_b_;  // Token: in_w_ is the embedding table
  Parameter pos_;
  Parameter emb_ln_g_, emb_ln_b_;
  std::vector<Layer> layers_;
  Parameter pre_w_, pre_b_;
  Parameter cls_w_, cls_b_;
};

// Cropping policy for sequences longer than max_seq_len.
std::size_t center_crop_start(std::size_t length, std::size_t window);
std::size_t random_crop_start(std::size_t length, std::size_t window, std::mt19937_64& rng);
ModelInput crop(const ModelInput& input, std::size_t start, std::size_t window);

}  // namespace vqmir::models
