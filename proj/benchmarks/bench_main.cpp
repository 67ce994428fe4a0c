#include <benchmark/benchmark.h>

#include <cmath>
#include <random>

#include "vqmir/dsp/spectrogram.hpp"
#include "vqmir/models/transformer.hpp"
#include "vqmir/numerics/optim.hpp"
#include "vqmir/vqcodec/vqvae.hpp"

using namespace vqmir;

namespace {

Tensor randn(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Tensor t(std::move(s));
  for (double& v : t.data()) v = g(rng);
  return t;
}

void BM_MelSpectrogram(benchmark::State& state) {
  dsp::AudioClip clip;
  clip.sample_rate = 44100;
  clip.samples.resize(static_cast<std::size_t>(state.range(0)) * clip.sample_rate);
  for (std::size_t i = 0; i < clip.samples.size(); ++i) clip.samples[i] = 0.5 * std::sin(0.0627 * double(i));
  for (auto _ : state) benchmark::DoNotOptimize(dsp::mel_spectrogram(clip));
  state.SetItemsProcessed(state.iterations() * std::int64_t(clip.samples.size()));
}
BENCHMARK(BM_MelSpectrogram)->Arg(1)->Arg(30)->Unit(benchmark::kMillisecond);

void BM_Quantize(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor lat = randn({n, 64}, 1), cb = randn({2048, 64}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(vq::quantize(lat, cb));
  state.SetItemsProcessed(state.iterations() * std::int64_t(n));
}
BENCHMARK(BM_Quantize)->Arg(345)->Arg(10336)->Unit(benchmark::kMillisecond);

void BM_TransformerStep(benchmark::State& state) {
  models::TransformerConfig cfg;
  cfg.d_model = 64;
  cfg.n_heads = 4;
  cfg.n_layers = 4;
  cfg.max_seq_len = static_cast<std::size_t>(state.range(0));
  const models::InputDims dims{86, 2048, 64};
  models::GenreTransformer model(models::ModelVariant::Spectro, cfg, dims, 16, 3);
  Adam adam(model.parameters());
  models::ModelInput in;
  in.features = randn({cfg.max_seq_len, dims.n_mels}, 4);
  std::mt19937_64 rng(5);
  for (auto _ : state) {
    Tape tape;
    const auto batch = models::apply_pretrain_mask(models::ModelVariant::Spectro, in, rng, {}, 0);
    tape.backward(model.pretrain_objective(tape, batch, &rng));
    benchmark::DoNotOptimize(adam.step(1e-4));
  }
}
BENCHMARK(BM_TransformerStep)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
