#include <benchmark/benchmark.h>

#include "fvlab/detail/backprop_impl.hpp"
#include "fvlab/tasks.hpp"
#include "fvlab/trainer.hpp"

using namespace fvlab;

namespace {

struct Setup {
  TaskRegistry reg = TaskRegistry::default_registry();
  ModelConfig cfg;
  ModelWeights w;

  Setup() {
    cfg.vocab_size = reg.vocab.size();
    cfg.d_model = 128;
    cfg.n_layers = 4;
    cfg.n_heads = 4;
    cfg.d_head = 32;
    cfg.max_seq = 128;
    w = random_weights(cfg, 1);
  }
};

void BM_Forward10Shot(benchmark::State& state) {
  Setup s;
  Rng rng(2);
  const auto p = build_prompt(s.reg, s.reg.get("succ"), 10, rng, Template{}, false);
  for (auto _ : state) {
    const auto out = forward(s.w, s.cfg, p.tokens);
    benchmark::DoNotOptimize(out.dist.data());
  }
  state.SetItemsProcessed(state.iterations() * int64_t(p.tokens.size()));
}
BENCHMARK(BM_Forward10Shot);

void BM_ForwardZeroShot(benchmark::State& state) {
  Setup s;
  Rng rng(3);
  const auto p = build_prompt(s.reg, s.reg.get("succ"), 0, rng, Template{}, false);
  for (auto _ : state) {
    const auto out = forward(s.w, s.cfg, p.tokens);
    benchmark::DoNotOptimize(out.dist.data());
  }
}
BENCHMARK(BM_ForwardZeroShot);

void BM_BackwardExample(benchmark::State& state) {
  Setup s;
  CorpusGenerator corpus(s.reg, {"succ"}, 10, 10, {0}, 5);
  const auto ex = corpus.next();
  detail::TransposeCache<float> wt(s.w);
  auto grads = detail::zero_like(s.w);
  for (auto _ : state) {
    detail::zero_weights(grads);
    const float loss = detail::backward_example(s.w, wt, s.cfg, ex.tokens, ex.targets,
                                                grads, 1.0f);
    benchmark::DoNotOptimize(loss);
  }
  state.SetItemsProcessed(state.iterations() * int64_t(ex.tokens.size()));
}
BENCHMARK(BM_BackwardExample);

void BM_TrainStep(benchmark::State& state) {
  Setup s;
  std::vector<int> tmpl(20);
  for (int i = 0; i < 20; ++i) tmpl[i] = i;
  TrainConfig tc;
  tc.steps = 1;
  tc.batch_size = 32;
  tc.eval_every = 1 << 20;
  uint64_t seed = 1;
  for (auto _ : state) {
    CorpusGenerator corpus(s.reg, {"succ", "pair", "last-copy"}, 0, 10, tmpl, seed++);
    auto res = train(s.w, s.cfg, corpus, tc);
    benchmark::DoNotOptimize(res.step_loss.data());
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
