#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vqmir/evalkit/metrics.hpp"
#include "vqmir/models/transformer.hpp"
#include "vqmir/numerics/optim.hpp"

namespace vqmir::train {

enum class ScheduleMode { WarmupLinearDecay, Constant };

struct LrSchedule {
  ScheduleMode mode = ScheduleMode::Constant;
  double peak_lr = 1e-3;
  std::uint64_t warmup_steps = 0;
  std::uint64_t total_steps = 0;
  double finetune_lr = 2e-5;

  // Warmup over `warmup_fraction` of the steps, then linear decay to 0.
  static LrSchedule warmup(double peak_lr, std::uint64_t total_steps, double warmup_fraction = 0.1);
  static LrSchedule constant(double lr = 2e-5);
  void validate() const;
};

// Steps past total_steps in warmup mode clamp to 0.
double lr_at_step(const LrSchedule& schedule, std::uint64_t step);

struct ClassWeights {
  std::vector<double> weights;  // 0 for classes with no examples
  std::vector<std::string> warnings;
};

// w_c = (N/K)/count_c over the K classes present, rescaled to mean 1 over them.
ClassWeights compute_class_weights(std::span<const std::uint64_t> counts);

struct Example {
  std::string track_id;
  models::ModelInput input;  // full-length sequence
  int label = -1;
};

enum class Phase { Pretrain, Finetune };
const char* phase_name(Phase p);

struct TrainOptions {
  Phase phase = Phase::Finetune;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  LrSchedule schedule = LrSchedule::constant();
  models::MaskConfig mask;
  std::uint64_t seed = 0;
  Precision precision = Precision::F64;
  AdamConfig adam;
  std::vector<double> class_weights;  // finetune only; empty means all 1
};

struct TrainState {
  std::uint64_t step = 0;
  std::size_t epoch = 0;           // completed epochs
  std::size_t batch_in_epoch = 0;  // batches done in the running epoch
  double epoch_loss_sum = 0.0;
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;
  double best_macro_f1 = -1.0;
  eval::ConfusionMatrix best_confusion;
  std::vector<eval::HistoryRecord> history;

  bool operator==(const TrainState&) const = default;
};

struct Evaluation {
  double loss = 0.0;
  std::vector<int> truths, preds;
  eval::ConfusionMatrix confusion;
  double macro_f1 = 0.0;
};

// Deterministic stream for (seed, a, b, c); independent of call order.
std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c);

// Mini-batch training of one model. Every random draw comes from
// derive_rng(seed, epoch, position, purpose), so a resumed run takes exactly
// the steps the uninterrupted run would have taken.
class Trainer {
 public:
  Trainer(models::GenreTransformer& model, TrainOptions options, std::vector<Example> train,
          std::vector<Example> validation);

  const TrainOptions& options() const { return options_; }
  const TrainState& state() const { return state_; }
  std::size_t batches_per_epoch() const;

  // One optimizer step on the next batch; returns the batch loss.
  double step();
  bool epoch_finished() const { return state_.batch_in_epoch == batches_per_epoch(); }
  // Evaluates, appends history and advances the epoch counter.
  void end_epoch();
  void run_epoch();
  void run();

  // Loss of one batch under the current weights without updating them.
  double peek_next_loss();

  // Pretraining: fixed-mask loss with center crops and no dropout.
  double pretrain_eval_loss(const std::vector<Example>& set, std::uint64_t purpose);
  // Finetuning: weighted cross-entropy, predictions and macro-F1 on center crops.
  Evaluation classify_eval(const std::vector<Example>& set);
  // Copies the best-epoch parameters back into the model.
  void restore_best();

  // Write-then-rename; load refuses other versions and leaves state untouched on error.
  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

 private:
  std::vector<std::size_t> epoch_order(std::size_t epoch) const;
  double batch_loss(std::size_t epoch, std::size_t batch, bool update);

  models::GenreTransformer& model_;
  TrainOptions options_;
  std::vector<Example> train_, validation_;
  Adam adam_;
  TrainState state_;
  std::vector<Tensor> best_params_;
};

// Runs all epochs. Pretraining never reads labels.
TrainState run_pretraining(models::GenreTransformer& model, const std::vector<Example>& train,
                           const std::vector<Example>& validation, const TrainOptions& options);
// Runs all epochs, then restores the best-validation-macro-F1 parameters.
TrainState run_finetune(models::GenreTransformer& model, const std::vector<Example>& train,
                        const std::vector<Example>& validation, const TrainOptions& options);

}  // namespace vqmir::train
