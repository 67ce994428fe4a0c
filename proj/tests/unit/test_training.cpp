#include <cmath>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "support/testing.hpp"
#include "vqmir/error.hpp"
#include "vqmir/training/trainer.hpp"

using namespace vqmir;
using namespace vqmir::models;
using namespace vqmir::train;

namespace {

TransformerConfig tiny(std::size_t max_len = 32) {
  TransformerConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.ffn_mult = 2;
  c.max_seq_len = max_len;
  c.dropout = 0.1;
  return c;
}

InputDims dims() {
  InputDims d;
  d.n_mels = 10;
  d.vocab_size = 24;
  d.code_dim = 4;
  return d;
}

// Class c lifts Mel band c; tokens cycle through a class-specific pattern.
std::vector<Example> make_set(ModelVariant v, std::size_t n, std::size_t k, std::size_t len, std::uint64_t seed) {
  std::vector<Example> out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.3);
  const InputDims d = dims();
  for (std::size_t i = 0; i < n; ++i) {
    Example e;
    e.track_id = "s" + std::to_string(seed) + "_" + std::to_string(i);
    e.label = static_cast<int>(i % k);
    if (v == ModelVariant::Spectro) {
      e.input.features = Tensor(Shape{len, d.n_mels});
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t b = 0; b < d.n_mels; ++b)
          e.input.features.at(t, b) = std::clamp((b == static_cast<std::size_t>(e.label) ? 0.5 : -0.5) + noise(rng), -1.0, 1.0);
    } else {
      for (std::size_t t = 0; t < len; ++t) e.input.ids.push_back(static_cast<int>((t % 3 + 3 * static_cast<std::size_t>(e.label)) % d.vocab_size));
      if (v == ModelVariant::Codebook) {
        e.input.features = Tensor(Shape{len, d.code_dim});
        for (std::size_t t = 0; t < len; ++t)
          for (std::size_t c = 0; c < d.code_dim; ++c) e.input.features.at(t, c) = std::sin(0.7 * e.input.ids[t] + c);
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<double> curve(const TrainState& s, const std::string& split, const std::string& metric) {
  std::vector<double> v;
  for (const auto& r : s.history)
    if (r.split == split && r.metric == metric) v.push_back(r.value);
  return v;
}

TrainOptions pretrain_opts(std::size_t epochs, std::uint64_t seed = 3) {
  TrainOptions o;
  o.phase = Phase::Pretrain;
  o.epochs = epochs;
  o.batch_size = 4;
  o.schedule = LrSchedule::warmup(3e-3, 100);
  o.seed = seed;
  return o;
}

std::vector<double> flat_params(GenreTransformer& m) {
  std::vector<double> out;
  for (Parameter* p : m.parameters()) out.insert(out.end(), p->value().data().begin(), p->value().data().end());
  return out;
}

constexpr ModelVariant kVariants[] = {ModelVariant::Spectro, ModelVariant::Token, ModelVariant::Codebook};

}  // namespace

TEST_CASE("learning-rate schedule") {
  const LrSchedule s = LrSchedule::warmup(1e-3, 1000);
  CHECK(s.warmup_steps == 100);
  CHECK(lr_at_step(s, 0) == 0.0);
  CHECK(lr_at_step(s, 50) == doctest::Approx(5e-4));
  CHECK(lr_at_step(s, 100) == 1e-3);
  CHECK(lr_at_step(s, 550) == doctest::Approx(5e-4));
  CHECK(lr_at_step(s, 1000) == 0.0);
  CHECK(lr_at_step(s, 5000) == 0.0);
  const double bound = s.peak_lr / static_cast<double>(std::min(s.warmup_steps, s.total_steps - s.warmup_steps));
  for (std::uint64_t k = 0; k < 1100; ++k) {
    CHECK(lr_at_step(s, k) >= 0.0);
    CHECK(std::abs(lr_at_step(s, k + 1) - lr_at_step(s, k)) <= bound * (1 + 1e-12));
  }
  const LrSchedule c = LrSchedule::constant();
  CHECK(c.finetune_lr == 2e-5);
  for (std::uint64_t k : {0ULL, 7ULL, 123456789ULL}) CHECK(lr_at_step(c, k) == 2e-5);
  LrSchedule bad = s;
  bad.warmup_steps = 2000;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("class weights") {
  const std::vector<std::uint64_t> even{10, 10};
  CHECK(compute_class_weights(even).weights == std::vector<double>{1.0, 1.0});
  const std::vector<std::uint64_t> skew{10, 30, 60};
  const ClassWeights w = compute_class_weights(skew);
  CHECK(w.weights[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(w.weights[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(w.weights[2] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  for (std::size_t c = 0; c < 3; ++c) CHECK(w.weights[c] * skew[c] == doctest::Approx(20.0).epsilon(1e-12));
  const std::vector<std::uint64_t> gap{5, 0, 15};
  const ClassWeights g = compute_class_weights(gap);
  CHECK(g.weights[1] == 0.0);
  CHECK(g.weights[0] + g.weights[2] == doctest::Approx(2.0));
  CHECK(g.warnings.size() == 1);
  CHECK_THROWS_AS(compute_class_weights(std::vector<std::uint64_t>{}), ConfigError);
}

TEST_CASE("derived streams depend only on their coordinates") {
  auto a = derive_rng(1, 2, 3, 4);
  auto b = derive_rng(1, 2, 3, 4);
  CHECK(a() == b());
  CHECK(derive_rng(1, 2, 3, 4)() != derive_rng(1, 2, 4, 3)());
  CHECK(derive_rng(1, 2, 3, 4)() != derive_rng(2, 2, 3, 4)());
}

TEST_CASE("one pretraining epoch on eight tracks") {
  for (ModelVariant v : kVariants) {
    GenreTransformer m(v, tiny(), dims(), 4, 1);
    const auto train = make_set(v, 8, 4, 40, 1);
    const TrainState s = run_pretraining(m, train, {}, pretrain_opts(1));
    const auto c = curve(s, "train", "pretrain_loss");
    REQUIRE(c.size() == 1);
    CHECK(std::isfinite(c[0]));
    CHECK(s.step == 2);
  }
}

TEST_CASE("pretraining is deterministic and ignores labels") {
  for (ModelVariant v : kVariants) {
    auto train = make_set(v, 12, 4, 40, 2);
    const auto val = make_set(v, 4, 4, 40, 3);
    GenreTransformer a(v, tiny(), dims(), 4, 9), b(v, tiny(), dims(), 4, 9), c(v, tiny(), dims(), 4, 9);
    const TrainState sa = run_pretraining(a, train, val, pretrain_opts(3));
    const TrainState sb = run_pretraining(b, train, val, pretrain_opts(3));
    CHECK(sa.history == sb.history);
    CHECK(flat_params(a) == flat_params(b));
    std::mt19937_64 rng(5);
    for (auto& e : train) e.label = std::uniform_int_distribution<int>(-7, 1000)(rng);
    const TrainState sc = run_pretraining(c, train, val, pretrain_opts(3));
    CHECK(sc.history == sa.history);
  }
}

TEST_CASE("pretraining loss falls on structured sequences") {
  for (ModelVariant v : kVariants) {
    GenreTransformer m(v, tiny(), dims(), 4, 4);
    const auto train = make_set(v, 16, 4, 40, 4);
    TrainOptions o = pretrain_opts(30);
    o.schedule = LrSchedule::warmup(1e-2, 120);
    const TrainState s = run_pretraining(m, train, {}, o);
    const auto c = curve(s, "train", "pretrain_loss");
    INFO(std::string(variant_name(v)), " first ", c.front(), " last ", c.back());
    CHECK(c.back() < 0.7 * c.front());
    if (v != ModelVariant::Spectro) CHECK(c.front() <= std::log(24.0) + 0.5);
  }
}

TEST_CASE("finetuning separates classes and keeps the best epoch") {
  GenreTransformer m(ModelVariant::Spectro, tiny(), dims(), 4, 5);
  const auto train = make_set(ModelVariant::Spectro, 32, 4, 40, 5);
  const auto val = make_set(ModelVariant::Spectro, 12, 4, 40, 6);
  TrainOptions o;
  o.epochs = 10;
  o.batch_size = 8;
  o.schedule = LrSchedule::constant(3e-3);
  o.seed = 1;
  const TrainState s = run_finetune(m, train, val, o);
  const auto f1 = curve(s, "validation", "macro_f1");
  REQUIRE(f1.size() == 10);
  CHECK(s.best_macro_f1 == *std::max_element(f1.begin(), f1.end()));
  CHECK(f1[s.best_epoch - 1] == s.best_macro_f1);
  CHECK(s.best_macro_f1 >= 0.9);
  // The model now holds the best-epoch weights.
  Trainer t(m, o, train, val);
  CHECK(t.classify_eval(val).macro_f1 == s.best_macro_f1);
  CHECK(eval::macro_f1(s.best_confusion) == s.best_macro_f1);
}

TEST_CASE("finetune label range and class-weight handling") {
  GenreTransformer m(ModelVariant::Spectro, tiny(), dims(), 4, 6);
  auto train = make_set(ModelVariant::Spectro, 8, 4, 40, 7);
  TrainOptions o;
  o.batch_size = 4;
  train[3].label = 4;
  CHECK_THROWS_AS(Trainer(m, o, train, {}), ConfigError);
  train[3].label = 3;
  o.class_weights = {1.0, 1.0};
  CHECK_THROWS_AS(Trainer(m, o, train, {}), ConfigError);

  // Balanced data: computed weights are all 1, so the losses match exactly.
  std::vector<std::uint64_t> counts(4, 0);
  for (const auto& e : train) ++counts[e.label];
  o.class_weights = compute_class_weights(counts).weights;
  TrainOptions unit = o;
  unit.class_weights = {1.0, 1.0, 1.0, 1.0};
  GenreTransformer a(ModelVariant::Spectro, tiny(), dims(), 4, 8), b(ModelVariant::Spectro, tiny(), dims(), 4, 8);
  Trainer ta(a, o, train, {}), tb(b, unit, train, {});
  for (int i = 0; i < 4; ++i) {
    CHECK(ta.step() == tb.step());
    if (ta.epoch_finished()) ta.end_epoch(), tb.end_epoch();
  }

  // Scaling every weight by 2 scales the loss by exactly 2.
  GenreTransformer c(ModelVariant::Spectro, tiny(), dims(), 4, 8);
  TrainOptions w1 = o, w2 = o;
  w1.class_weights = {0.5, 1.5, 1.0, 1.0};
  w2.class_weights = {1.0, 3.0, 2.0, 2.0};
  Trainer t1(c, w1, train, {}), t2(c, w2, train, {});
  CHECK(t2.peek_next_loss() == 2.0 * t1.peek_next_loss());
}

TEST_CASE("checkpoint resume matches the uninterrupted run bit for bit") {
  testing::TempDir dir("training_resume");
  for (Phase phase : {Phase::Pretrain, Phase::Finetune}) {
    const ModelVariant v = phase == Phase::Pretrain ? ModelVariant::Token : ModelVariant::Spectro;
    const auto train = make_set(v, 14, 4, 40, 10);
    const auto val = make_set(v, 4, 4, 40, 11);
    TrainOptions o = pretrain_opts(3, 21);
    o.phase = phase;
    if (phase == Phase::Finetune) o.schedule = LrSchedule::constant(1e-3);

    GenreTransformer ref(v, tiny(), dims(), 4, 12);
    Trainer full(ref, o, train, val);
    std::vector<double> losses;
    while (full.state().epoch < 3) {
      losses.push_back(full.step());
      if (full.epoch_finished()) full.end_epoch();
    }

    // Interrupt after 5 steps: mid-way through the second epoch.
    GenreTransformer part(v, tiny(), dims(), 4, 12);
    const auto ckpt = dir.path / "run.ckpt";
    {
      Trainer first(part, o, train, val);
      for (int i = 0; i < 5; ++i) {
        first.step();
        if (first.epoch_finished()) first.end_epoch();
      }
      CHECK(first.state().batch_in_epoch == 1);
      first.save_checkpoint(ckpt);
    }
    GenreTransformer fresh(v, tiny(), dims(), 4, 999);
    Trainer resumed(fresh, o, train, val);
    resumed.load_checkpoint(ckpt);
    CHECK(resumed.state().step == 5);
    std::vector<double> tail;
    while (resumed.state().epoch < 3) {
      tail.push_back(resumed.step());
      if (resumed.epoch_finished()) resumed.end_epoch();
    }
    REQUIRE(tail.size() == losses.size() - 5);
    for (std::size_t i = 0; i < tail.size(); ++i) CHECK(tail[i] == losses[5 + i]);
    CHECK(resumed.state() == full.state());
    CHECK(flat_params(fresh) == flat_params(ref));
  }
}

TEST_CASE("checkpoint refusal paths leave state untouched") {
  testing::TempDir dir("training_ckpt");
  const auto train = make_set(ModelVariant::Token, 8, 4, 40, 13);
  GenreTransformer m(ModelVariant::Token, tiny(), dims(), 4, 14);
  TrainOptions o = pretrain_opts(2);
  Trainer t(m, o, train, {});
  t.step();
  const auto path = dir.path / "a.ckpt";
  t.save_checkpoint(path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }

  GenreTransformer other(ModelVariant::Token, tiny(), dims(), 4, 15);
  Trainer u(other, o, train, {});
  const auto before = flat_params(other);
  const TrainState state_before = u.state();

  for (std::size_t cut : {std::size_t{4}, std::size_t{30}, bytes.size() / 2, bytes.size() - 1}) {
    std::ofstream(dir.path / "cut.ckpt", std::ios::binary) << bytes.substr(0, cut);
    CHECK_THROWS_AS(u.load_checkpoint(dir.path / "cut.ckpt"), FormatError);
    CHECK(flat_params(other) == before);
    CHECK(u.state() == state_before);
  }

  std::string v2 = bytes;
  v2[8] = 2;
  std::ofstream(dir.path / "v2.ckpt", std::ios::binary) << v2;
  try {
    u.load_checkpoint(dir.path / "v2.ckpt");
    FAIL("version 2 accepted");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("version 2") != std::string::npos);
    CHECK(msg.find("version 1") != std::string::npos);
  }

  TrainOptions changed = o;
  changed.seed = 77;
  Trainer w(other, changed, train, {});
  CHECK_THROWS_AS(w.load_checkpoint(path), ConfigError);
  CHECK_THROWS_AS(u.load_checkpoint(dir.path / "missing.ckpt"), ArtifactError);

  u.load_checkpoint(path);
  CHECK(flat_params(other) == flat_params(m));
}

TEST_CASE("memorising shuffled labels opens a positive overfit gap") {
  GenreTransformer m(ModelVariant::Spectro, tiny(), dims(), 4, 16);
  auto train = make_set(ModelVariant::Spectro, 16, 4, 40, 17);
  auto val = make_set(ModelVariant::Spectro, 16, 4, 40, 18);
  std::mt19937_64 rng(1);
  for (auto* set : {&train, &val})
    for (auto& e : *set) e.label = std::uniform_int_distribution<int>(0, 3)(rng);
  TrainOptions o;
  o.epochs = 40;
  o.batch_size = 4;
  o.schedule = LrSchedule::constant(1e-2);
  const TrainState s = run_finetune(m, train, val, o);
  const auto report = eval::build_report("overfit", "spectro", false, s.best_confusion, s.history, s.best_epoch,
                                         eval::chance_baseline(4, std::vector<std::uint64_t>{4, 4, 4, 4}, 1000, 0), "", "");
  const auto tr = curve(s, "train", "finetune_loss");
  const auto va = curve(s, "validation", "finetune_loss");
  MESSAGE("final train loss ", tr.back(), " validation loss ", va.back(), " gap at best epoch ", report.overfit_gap);
  CHECK(tr.back() < 0.5 * tr.front());
  CHECK(va.back() - tr.back() > 0.5);
  CHECK(report.overfit_gap > 0.0);
}
