#include "vqmir/training/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "vqmir/binary_io.hpp"
#include "vqmir/error.hpp"

namespace vqmir::train {

namespace {

constexpr char kCheckpointMagic[] = "VQMIRCKP";
constexpr std::uint32_t kCheckpointVersion = 1;

// Purposes for derive_rng.
constexpr std::uint64_t kOrder = 1, kSample = 2, kEvalTrain = 3, kEvalValidation = 4;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void put_tensor(std::ostream& os, const Tensor& t) {
  binio::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) binio::put_u64(os, d);
  for (double v : t.data()) binio::put_f64(os, v);
}

Tensor get_tensor(std::istream& is) {
  const std::uint32_t rank = binio::get_u32(is);
  if (rank > 4) throw FormatError("checkpoint tensor rank " + std::to_string(rank) + " is not supported");
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = binio::get_u64(is);
    if (d > (1u << 28)) throw FormatError("checkpoint tensor dimension out of range");
    n *= d;
  }
  if (n > (1u << 28)) throw FormatError("checkpoint tensor too large");
  Tensor t(shape);
  for (double& v : t.data()) v = binio::get_f64(is);
  return t;
}

// Everything a resumed run must agree on, except the epoch budget.
std::string options_key(const TrainOptions& o, const std::vector<Example>& train, const std::vector<Example>& val) {
  std::ostringstream os;
  os.precision(17);
  os << "phase=" << phase_name(o.phase) << ";batch=" << o.batch_size << ";seed=" << o.seed
     << ";precision=" << precision_name(o.precision) << ";mode=" << static_cast<int>(o.schedule.mode)
     << ";peak=" << o.schedule.peak_lr << ";warmup=" << o.schedule.warmup_steps << ";total=" << o.schedule.total_steps
     << ";ft_lr=" << o.schedule.finetune_lr << ";mask=" << o.mask.token_mask_prob << "," << o.mask.replace_mask << ","
     << o.mask.replace_random << "," << o.mask.spectro_span_len << ";adam=" << o.adam.beta1 << "," << o.adam.beta2
     << "," << o.adam.eps << "," << o.adam.clip_norm << ";pcts=";
  for (double p : o.mask.spectro_mask_pcts) os << p << ",";
  os << ";weights=";
  for (double w : o.class_weights) os << w << ",";
  os << ";train=";
  for (const auto& e : train) os << e.track_id << ",";
  os << ";validation=";
  for (const auto& e : val) os << e.track_id << ",";
  return eval::sha256_hex(os.str());
}

}  // namespace

LrSchedule LrSchedule::warmup(double peak_lr, std::uint64_t total_steps, double warmup_fraction) {
  LrSchedule s;
  s.mode = ScheduleMode::WarmupLinearDecay;
  s.peak_lr = peak_lr;
  s.total_steps = total_steps;
  s.warmup_steps = static_cast<std::uint64_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
  s.warmup_steps = std::max<std::uint64_t>(1, std::min(s.warmup_steps, total_steps));
  return s;
}

LrSchedule LrSchedule::constant(double lr) {
  LrSchedule s;
  s.mode = ScheduleMode::Constant;
  s.finetune_lr = lr;
  return s;
}

void LrSchedule::validate() const {
  if (mode == ScheduleMode::Constant) {
    if (!(finetune_lr > 0.0)) throw ConfigError("finetune learning rate must be positive");
    return;
  }
  if (!(peak_lr > 0.0)) throw ConfigError("peak learning rate must be positive");
  if (total_steps == 0 || warmup_steps == 0 || warmup_steps > total_steps)
    throw ConfigError("warmup schedule needs 0 < warmup_steps <= total_steps");
}

double lr_at_step(const LrSchedule& s, std::uint64_t step) {
  if (s.mode == ScheduleMode::Constant) return s.finetune_lr;
  if (step >= s.total_steps) return 0.0;
  if (step < s.warmup_steps) return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (s.total_steps == s.warmup_steps) return s.peak_lr;
  return s.peak_lr * static_cast<double>(s.total_steps - step) / static_cast<double>(s.total_steps - s.warmup_steps);
}

ClassWeights compute_class_weights(std::span<const std::uint64_t> counts) {
  if (counts.empty()) throw ConfigError("class weights need at least one class count");
  ClassWeights out;
  out.weights.assign(counts.size(), 0.0);
  double n = 0.0, k = 0.0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) {
      out.warnings.push_back("class " + std::to_string(c) + " has no examples; weight 0");
      continue;
    }
    n += static_cast<double>(counts[c]);
    k += 1.0;
  }
  if (k == 0.0) throw ConfigError("class weights: every class count is zero");
  double mean = 0.0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) continue;
    out.weights[c] = (n / k) / static_cast<double>(counts[c]);
    mean += out.weights[c] / k;
  }
  for (double& w : out.weights) w /= mean;
  return out;
}

const char* phase_name(Phase p) { return p == Phase::Pretrain ? "pretrain" : "finetune"; }

std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t h = splitmix(seed);
  h = splitmix(h ^ a);
  h = splitmix(h ^ (b * 0x9e3779b97f4a7c15ULL));
  h = splitmix(h ^ (c + 0x632be59bd9b4e019ULL));
  return std::mt19937_64(h);
}

Trainer::Trainer(models::GenreTransformer& model, TrainOptions options, std::vector<Example> train,
                 std::vector<Example> validation)
    : model_(model),
      options_(std::move(options)),
      train_(std::move(train)),
      validation_(std::move(validation)),
      adam_(model.parameters(), options_.adam) {
  if (options_.batch_size == 0) throw ConfigError("batch size must be positive");
  if (train_.empty()) throw ConfigError("training set is empty");
  options_.schedule.validate();
  options_.mask.validate();
  state_.seed = options_.seed;
  if (options_.phase == Phase::Finetune) {
    const std::size_t k = model_.n_classes();
    if (!options_.class_weights.empty() && options_.class_weights.size() != k)
      throw ConfigError("class weights: " + std::to_string(options_.class_weights.size()) + " values for " +
                        std::to_string(k) + " classes");
    for (const auto* set : {&train_, &validation_}) {
      for (const auto& e : *set) {
        if (e.label < 0 || static_cast<std::size_t>(e.label) >= k)
          throw ConfigError("track '" + e.track_id + "': label " + std::to_string(e.label) + " outside [0, " +
                            std::to_string(k) + ")");
      }
    }
  }
}

std::size_t Trainer::batches_per_epoch() const { return (train_.size() + options_.batch_size - 1) / options_.batch_size; }

std::vector<std::size_t> Trainer::epoch_order(std::size_t epoch) const {
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = derive_rng(options_.seed, epoch, 0, kOrder);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

double Trainer::batch_loss(std::size_t epoch, std::size_t batch, bool update) {
  const auto order = epoch_order(epoch);
  const std::size_t begin = batch * options_.batch_size;
  const std::size_t end = std::min(begin + options_.batch_size, order.size());
  const std::size_t window = model_.config().max_seq_len;
  Tape tape;
  Var total{};
  for (std::size_t p = begin; p < end; ++p) {
    const Example& ex = train_[order[p]];
    auto rng = derive_rng(options_.seed, epoch, p, kSample);
    const auto in = models::crop(ex.input, models::random_crop_start(ex.input.length(), window, rng), window);
    Var loss;
    if (options_.phase == Phase::Pretrain) {
      const auto masked = models::apply_pretrain_mask(model_.variant(), in, rng, options_.mask, model_.dims().vocab_size);
      loss = model_.pretrain_objective(tape, masked, &rng);
    } else {
      const int label = ex.label;
      loss = ops::cross_entropy(model_.class_logits(tape, in, &rng), std::span<const int>(&label, 1), {},
                                options_.class_weights);
    }
    total = p == begin ? loss : ops::add(total, loss);
  }
  const Var mean = ops::scale(total, 1.0 / static_cast<double>(end - begin));
  const double value = tape.value(mean)[0];
  if (!std::isfinite(value)) throw NumericError("non-finite training loss at step " + std::to_string(state_.step));
  if (update) {
    tape.backward(mean);
    adam_.step(lr_at_step(options_.schedule, state_.step), options_.precision);
  }
  return value;
}

double Trainer::step() {
  if (epoch_finished()) throw Error("epoch finished; call end_epoch first");
  const double loss = batch_loss(state_.epoch, state_.batch_in_epoch, true);
  ++state_.step;
  ++state_.batch_in_epoch;
  state_.epoch_loss_sum += loss;
  return loss;
}

double Trainer::peek_next_loss() {
  if (epoch_finished()) return batch_loss(state_.epoch + 1, 0, false);
  return batch_loss(state_.epoch, state_.batch_in_epoch, false);
}

double Trainer::pretrain_eval_loss(const std::vector<Example>& set, std::uint64_t purpose) {
  if (set.empty()) return 0.0;
  const std::size_t window = model_.config().max_seq_len;
  double sum = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& ex = set[i];
    auto rng = derive_rng(options_.seed, 0, i, purpose);
    const auto in = models::crop(ex.input, models::center_crop_start(ex.input.length(), window), window);
    const auto masked = models::apply_pretrain_mask(model_.variant(), in, rng, options_.mask, model_.dims().vocab_size);
    Tape tape;
    sum += tape.value(model_.pretrain_objective(tape, masked))[0];
  }
  return sum / static_cast<double>(set.size());
}

Evaluation Trainer::classify_eval(const std::vector<Example>& set) {
  Evaluation ev;
  const std::size_t window = model_.config().max_seq_len;
  double sum = 0.0;
  for (const auto& ex : set) {
    const auto in = models::crop(ex.input, models::center_crop_start(ex.input.length(), window), window);
    Tape tape;
    const Var logits = model_.class_logits(tape, in);
    const int label = ex.label;
    sum += tape.value(ops::cross_entropy(logits, std::span<const int>(&label, 1), {}, options_.class_weights))[0];
    const auto& v = tape.value(logits).data();
    ev.truths.push_back(label);
    ev.preds.push_back(static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin()));
  }
  ev.loss = set.empty() ? 0.0 : sum / static_cast<double>(set.size());
  ev.confusion = eval::confusion_matrix(ev.truths, ev.preds, model_.n_classes());
  ev.macro_f1 = model_.n_classes() >= 2 ? eval::macro_f1(ev.confusion) : 0.0;
  return ev;
}

void Trainer::end_epoch() {
  if (!epoch_finished()) throw Error("epoch not finished");
  const std::size_t e = state_.epoch + 1;
  auto& h = state_.history;
  const double batch_mean = state_.epoch_loss_sum / static_cast<double>(batches_per_epoch());
  if (options_.phase == Phase::Pretrain) {
    h.push_back({e, "train", "pretrain_batch_loss", batch_mean});
    h.push_back({e, "train", "pretrain_loss", pretrain_eval_loss(train_, kEvalTrain)});
    if (!validation_.empty()) h.push_back({e, "validation", "pretrain_loss", pretrain_eval_loss(validation_, kEvalValidation)});
  } else {
    const Evaluation tr = classify_eval(train_);
    h.push_back({e, "train", "finetune_batch_loss", batch_mean});
    h.push_back({e, "train", "finetune_loss", tr.loss});
    h.push_back({e, "train", "macro_f1", tr.macro_f1});
    if (!validation_.empty()) {
      const Evaluation va = classify_eval(validation_);
      h.push_back({e, "validation", "finetune_loss", va.loss});
      h.push_back({e, "validation", "macro_f1", va.macro_f1});
      if (va.macro_f1 > state_.best_macro_f1) {
        state_.best_macro_f1 = va.macro_f1;
        state_.best_epoch = e;
        state_.best_confusion = va.confusion;
        best_params_.clear();
        for (const Parameter* p : std::as_const(model_).parameters()) best_params_.push_back(p->value());
      }
    }
  }
  ++state_.epoch;
  state_.batch_in_epoch = 0;
  state_.epoch_loss_sum = 0.0;
}

void Trainer::run_epoch() {
  while (!epoch_finished()) step();
  end_epoch();
}

void Trainer::run() {
  if (epoch_finished() && state_.batch_in_epoch > 0) end_epoch();
  while (state_.epoch < options_.epochs) run_epoch();
}

void Trainer::restore_best() {
  if (best_params_.empty()) return;
  const auto params = model_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value() = best_params_[i];
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  std::ostringstream os;
  binio::put_bytes(os, std::string(kCheckpointMagic, 8));
  binio::put_u32(os, kCheckpointVersion);
  binio::put_string(os, options_key(options_, train_, validation_));
  binio::put_u64(os, state_.step);
  binio::put_u64(os, state_.epoch);
  binio::put_u64(os, state_.batch_in_epoch);
  binio::put_f64(os, state_.epoch_loss_sum);
  binio::put_u64(os, state_.seed);
  binio::put_u64(os, state_.best_epoch);
  binio::put_f64(os, state_.best_macro_f1);
  binio::put_u64(os, state_.best_confusion.k);
  for (auto c : state_.best_confusion.counts) binio::put_u64(os, c);
  binio::put_u64(os, state_.history.size());
  for (const auto& r : state_.history) {
    binio::put_u64(os, r.epoch);
    binio::put_string(os, r.split);
    binio::put_string(os, r.metric);
    binio::put_f64(os, r.value);
  }
  model_.save(os, Precision::F64);
  adam_.save(os);
  binio::put_u64(os, best_params_.size());
  for (const auto& t : best_params_) put_tensor(os, t);

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + tmp);
    out << os.str();
    if (!out) throw ArtifactError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open checkpoint " + path.string());
  std::stringstream is;
  is << in.rdbuf();

  if (binio::get_bytes(is, 8) != std::string(kCheckpointMagic, 8)) throw FormatError(path.string() + " is not a training checkpoint");
  const std::uint32_t version = binio::get_u32(is);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version " + std::to_string(version) + ", this build reads version " +
                      std::to_string(kCheckpointVersion));
  if (binio::get_string(is, 128) != options_key(options_, train_, validation_))
    throw ConfigError("checkpoint " + path.string() + " was written with different training options or data");

  TrainState st;
  st.step = binio::get_u64(is);
  st.epoch = binio::get_u64(is);
  st.batch_in_epoch = binio::get_u64(is);
  st.epoch_loss_sum = binio::get_f64(is);
  st.seed = binio::get_u64(is);
  st.best_epoch = binio::get_u64(is);
  st.best_macro_f1 = binio::get_f64(is);
  st.best_confusion.k = binio::get_u64(is);
  if (st.best_confusion.k > 4096) throw FormatError("checkpoint confusion matrix too large");
  st.best_confusion.counts.resize(st.best_confusion.k * st.best_confusion.k);
  for (auto& c : st.best_confusion.counts) c = binio::get_u64(is);
  const std::uint64_t n_hist = binio::get_u64(is);
  if (n_hist > (1u << 24)) throw FormatError("checkpoint history too long");
  for (std::uint64_t i = 0; i < n_hist; ++i) {
    eval::HistoryRecord r;
    r.epoch = binio::get_u64(is);
    r.split = binio::get_string(is, 64);
    r.metric = binio::get_string(is, 64);
    r.value = binio::get_f64(is);
    st.history.push_back(std::move(r));
  }
  if (st.batch_in_epoch > batches_per_epoch()) throw FormatError("checkpoint batch position out of range");

  models::GenreTransformer stored = models::GenreTransformer::load(is);
  if (stored.variant() != model_.variant() || stored.n_classes() != model_.n_classes() ||
      stored.num_weights() != model_.num_weights())
    throw ConfigError("checkpoint model does not match the model being trained");
  Adam adam(model_.parameters(), options_.adam);
  adam.load(is);
  const std::uint64_t n_best = binio::get_u64(is);
  std::vector<Tensor> best;
  const auto dst = model_.parameters();
  if (n_best != 0 && n_best != dst.size()) throw FormatError("checkpoint best-parameter table has the wrong size");
  for (std::uint64_t i = 0; i < n_best; ++i) {
    best.push_back(get_tensor(is));
    if (best.back().shape() != dst[i]->value().shape()) throw FormatError("checkpoint best-parameter shape mismatch");
  }

  // Everything parsed; commit.
  const auto src = std::as_const(stored).parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i]->value() = src[i]->value();
    dst[i]->zero_grad();
  }
  adam_ = std::move(adam);
  state_ = std::move(st);
  best_params_ = std::move(best);
}

TrainState run_pretraining(models::GenreTransformer& model, const std::vector<Example>& train,
                           const std::vector<Example>& validation, const TrainOptions& options) {
  TrainOptions o = options;
  o.phase = Phase::Pretrain;
  Trainer t(model, std::move(o), train, validation);
  t.run();
  return t.state();
}

TrainState run_finetune(models::GenreTransformer& model, const std::vector<Example>& train,
                        const std::vector<Example>& validation, const TrainOptions& options) {
  TrainOptions o = options;
  o.phase = Phase::Finetune;
  Trainer t(model, std::move(o), train, validation);
  t.run();
  t.restore_best();
  return t.state();
}

}  // namespace vqmir::train
