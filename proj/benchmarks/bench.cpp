#include <benchmark/benchmark.h>

#include "kgan/composition.hpp"
#include "kgan/evaluation.hpp"
#include "kgan/models.hpp"
#include "kgan/relational.hpp"
#include "kgan/segmentation.hpp"

using namespace kgan;

static void BM_AlphaComposite(benchmark::State& state) {
  const int k = static_cast<int>(state.range(0));
  std::vector<ComponentImage> layers;
  for (int i = 0; i < k; ++i) layers.push_back({torch::rand({16, 3, 64, 64}), torch::rand({16, 1, 64, 64})});
  ComponentImage bg{torch::rand({16, 3, 64, 64}), std::nullopt};
  for (auto _ : state) benchmark::DoNotOptimize(alpha_composite(layers, bg).image);
}
BENCHMARK(BM_AlphaComposite)->Arg(3)->Arg(5);

static void BM_AttentionBlock(benchmark::State& state) {
  torch::NoGradGuard ng;
  AttentionBlock block(64, static_cast<int>(state.range(0)));
  auto z = torch::rand({64, 5, 64});
  for (auto _ : state) benchmark::DoNotOptimize(block->forward(z));
}
BENCHMARK(BM_AttentionBlock)->Arg(1)->Arg(2);

static void BM_FrechetDistance(benchmark::State& state) {
  const auto d = state.range(0);
  auto a = gaussian_stats(torch::randn({2 * d, d}, torch::kFloat64));
  auto b = gaussian_stats(torch::randn({2 * d, d}, torch::kFloat64) + 0.5);
  for (auto _ : state) benchmark::DoNotOptimize(frechet_distance(a, b));
}
BENCHMARK(BM_FrechetDistance)->Arg(64)->Arg(256);

static void BM_GeneratorForward(benchmark::State& state) {
  torch::NoGradGuard ng;
  ModelConfig cfg;
  cfg.K = static_cast<int>(state.range(0));
  cfg.generator_channels = 128;
  StructuredGenerator gen(cfg);
  gen->eval();
  auto g = at::make_generator<at::CPUGeneratorImpl>(0);
  auto z = sample_latents(cfg, 8, g);
  for (auto _ : state) benchmark::DoNotOptimize(gen->forward(z).composite.image);
}
BENCHMARK(BM_GeneratorForward)->Arg(3)->Arg(5)->Unit(benchmark::kMillisecond);

static void BM_MatchedLoss(benchmark::State& state) {
  const auto k = state.range(0);
  auto logits = torch::randn({16, k + 1, 64, 64});
  LabelMap t{torch::randint(0, k + 1, {16, 64, 64}), torch::zeros({16, 64, 64}, torch::kBool)};
  for (auto _ : state) benchmark::DoNotOptimize(permutation_matched_loss(logits, t).loss);
}
BENCHMARK(BM_MatchedLoss)->Arg(3)->Arg(5);
