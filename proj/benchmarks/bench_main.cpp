#include <benchmark/benchmark.h>

#include "hashcl/encoder.hpp"
#include "hashcl/prompt_moe.hpp"

using namespace hashcl;

namespace {

EncoderConfig default_encoder() { return EncoderConfig{}; }

void BM_RouteAndCompose(benchmark::State& state) {
  const auto experts = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  PromptPool pool(0, experts, 16, 32);
  pool.init_uniform(rng, 1.0);
  const Matrix w = rng.normal_matrix(32, experts, 1.0);
  const Matrix x = rng.normal_matrix(8, 32, 1.0);
  for (auto _ : state) {
    auto scores = route_scores(x, w);
    auto d = make_decision(scores, scores, 2);
    benchmark::DoNotOptimize(compose_prompt(pool, d.selected, d.weights));
  }
}
BENCHMARK(BM_RouteAndCompose)->Arg(10)->Arg(15)->Arg(25);

void BM_AugmentedAttention(benchmark::State& state) {
  const auto prompt_rows = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const Matrix q = rng.normal_matrix(8, 32, 1.0);
  const Matrix k = rng.normal_matrix(8, 32, 1.0);
  const Matrix v = rng.normal_matrix(8, 32, 1.0);
  const Matrix pk = rng.normal_matrix(prompt_rows, 32, 1.0);
  const Matrix pv = rng.normal_matrix(prompt_rows, 32, 1.0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(augmented_attention(q, k, v, &pk, &pv, 4));
  }
}
BENCHMARK(BM_AugmentedAttention)->Arg(0)->Arg(8)->Arg(13);

void BM_EncoderForward(benchmark::State& state) {
  const auto cfg = default_encoder();
  Rng rng(3);
  const auto weights = EncoderWeights::init(cfg, rng);
  std::vector<PromptPool> pools;
  TaskRouter router;
  for (std::size_t slot = 0; slot < cfg.injected_layers.size(); ++slot) {
    pools.emplace_back(cfg.injected_layers[slot], 15, 16, cfg.dim);
    pools.back().init_uniform(rng, 1.0);
    router.weights.push_back(rng.normal_matrix(cfg.dim, 15, 1.0));
  }
  const Matrix x = rng.normal_matrix(cfg.tokens, cfg.dim, 1.0);
  RoutingContext ctx;
  ctx.router = &router;
  ctx.pools = pools;
  const bool instructed = state.range(0) != 0;
  for (auto _ : state) {
    if (instructed) {
      benchmark::DoNotOptimize(forward_instructed(weights, cfg, x, ctx));
    } else {
      benchmark::DoNotOptimize(forward_uninstructed(weights, cfg, x));
    }
  }
}
BENCHMARK(BM_EncoderForward)->Arg(0)->Arg(1);

}  // namespace

BENCHMARK_MAIN();
