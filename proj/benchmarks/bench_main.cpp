#include "latent_lens/classifier.hpp"
#include "latent_lens/datagen.hpp"
#include "latent_lens/dvae.hpp"
#include "latent_lens/explainer.hpp"
#include "latent_lens/infotheory.hpp"
#include "latent_lens/pipeline.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace latent_lens;

namespace {

const pipeline::RunConfig kDefaults;

Matrix positive_matrix(Index rows, Index cols, std::uint64_t seed) {
  Rng rng(seed);
  std::gamma_distribution<double> g(2.0, 0.5);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

Index repr_dim() { return kDefaults.classifier.fc_widths.back(); }

void BM_ClassifierForward(benchmark::State& state) {
  Rng rng(1);
  const auto nets = classifier::build_networks(kDefaults.classifier, rng);
  datagen::DatasetSpec spec = kDefaults.dataset;
  spec.n_samples = state.range(0);
  const auto set = datagen::generate_dataset(spec);
  const Matrix x = set.batch(0, set.size());
  for (auto _ : state) benchmark::DoNotOptimize(nets.head.forward(nets.backbone.forward(x)));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ClassifierForward)->Arg(1)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_ClassifierLossGradient(benchmark::State& state) {
  Rng rng(2);
  const auto nets = classifier::build_networks(kDefaults.classifier, rng);
  datagen::DatasetSpec spec = kDefaults.dataset;
  spec.n_samples = 64;
  const auto set = datagen::generate_dataset(spec);
  const Matrix x = set.batch(0, set.size());
  auto bg = nets.backbone.zero_gradients();
  auto hg = nets.head.zero_gradients();
  for (auto _ : state) {
    Rng r(3);
    benchmark::DoNotOptimize(
        classifier::classifier_loss(nets, x, set.labels, nn::Mode::training, &r, &bg, &hg));
  }
}
BENCHMARK(BM_ClassifierLossGradient)->Unit(benchmark::kMillisecond);

void BM_DvaeLossGradient(benchmark::State& state) {
  Rng rng(4);
  const auto nets = dvae::build_dvae_networks(kDefaults.dvae, repr_dim(), rng);
  const Matrix phi = positive_matrix(repr_dim(), 128, 5);
  const Matrix noise = dvae::draw_uniform_noise(kDefaults.dvae.n_bits, 128, 1, rng);
  auto eg = nets.encoder.zero_gradients();
  auto dg = nets.decoder.zero_gradients();
  for (auto _ : state) benchmark::DoNotOptimize(dvae::dvae_loss(nets, phi, 0.7, 1.0, noise, &eg, &dg));
}
BENCHMARK(BM_DvaeLossGradient)->Unit(benchmark::kMicrosecond);

void BM_GeneratorForward(benchmark::State& state) {
  Rng rng(6);
  const auto gen = explainer::build_generator(kDefaults.generator, repr_dim(), rng);
  const Matrix z = positive_matrix(repr_dim(), state.range(0), 7);
  for (auto _ : state) benchmark::DoNotOptimize(gen.forward(z));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_GeneratorForward)->Arg(1)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_GeneratorLayerInfo(benchmark::State& state) {
  Rng rng(8);
  const auto gen = explainer::build_generator(kDefaults.generator, repr_dim(), rng);
  const infotheory::NetworkSource src(gen);
  const Matrix centers = positive_matrix(repr_dim(), 1, 9);
  const infotheory::GaussianProbe probe{static_cast<int>(state.range(0)), 0};
  for (auto _ : state) benchmark::DoNotOptimize(infotheory::layer_info(src, centers, probe, "generator"));
}
BENCHMARK(BM_GeneratorLayerInfo)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_PenaltyGradient(benchmark::State& state) {
  Rng rng(10);
  const auto gen = explainer::build_generator(kDefaults.generator, repr_dim(), rng);
  const Matrix centers = positive_matrix(repr_dim(), 1, 11);
  Vector info_f = positive_matrix(repr_dim(), 1, 12).col(0);
  info_f /= info_f.sum();
  const auto& g = kDefaults.generator;
  const auto draws = infotheory::sampled_penalty_draws(info_f, g.coords_per_step, g.centers_per_step,
                                                       g.probe.samples_per_coord, rng);
  auto grads = gen.zero_gradients();
  for (auto _ : state)
    benchmark::DoNotOptimize(infotheory::penalty_with_gradient(gen, centers, info_f, draws, 1.0, &grads));
}
BENCHMARK(BM_PenaltyGradient)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
