#include <cmath>

#include "doctest.h"
#include "fvlab/detail/backprop_impl.hpp"
#include "fvlab/parallel.hpp"
#include "fvlab/trainer.hpp"

using namespace fvlab;

namespace {

TaskRegistry small_registry() {
  // shrink the universe so trainer tests stay fast
  TaskRegistry reg = TaskRegistry::default_registry();
  return reg;
}

ModelConfig trainer_config(uint32_t L = 1, uint32_t J = 1, uint32_t d = 8) {
  TaskRegistry reg = TaskRegistry::default_registry();
  ModelConfig cfg;
  cfg.vocab_size = reg.vocab.size();
  cfg.d_model = d;
  cfg.n_layers = L;
  cfg.n_heads = J;
  cfg.d_head = d / J;
  cfg.max_seq = 96;
  return cfg;
}

}  // namespace

TEST_CASE("zero steps leaves weights untouched") {
  const auto reg = small_registry();
  const auto cfg = trainer_config();
  auto w = random_weights(cfg, 1);
  const auto before = w;
  CorpusGenerator corpus(reg, {"succ"}, 1, 3, {0}, 2);
  TrainConfig tc;
  tc.steps = 0;
  const auto res = train(std::move(w), cfg, corpus, tc);
  CHECK(res.weights.tok_emb == before.tok_emb);
  CHECK(res.weights.unembed == before.unembed);
  CHECK(res.step_loss.empty());
}

TEST_CASE("one step with zero learning rate leaves weights untouched") {
  const auto reg = small_registry();
  const auto cfg = trainer_config();
  auto w = random_weights(cfg, 1);
  const auto before = w;
  CorpusGenerator corpus(reg, {"succ"}, 1, 3, {0}, 2);
  TrainConfig tc;
  tc.steps = 1;
  tc.batch_size = 2;
  tc.learning_rate = 0.0f;
  tc.eval_every = 1;
  const auto res = train(std::move(w), cfg, corpus, tc);
  for (size_t i = 0; i < before.tok_emb.data.size(); ++i) {
    CHECK(res.weights.tok_emb.data[i] ==
          doctest::Approx(before.tok_emb.data[i]).epsilon(1e-7));
  }
}

TEST_CASE("training is deterministic for a fixed seed and any thread count") {
  const auto reg = small_registry();
  const auto cfg = trainer_config(1, 2, 16);
  TrainConfig tc;
  tc.steps = 6;
  tc.batch_size = 4;
  tc.eval_every = 3;
  tc.eval_prompts = 4;

  auto run = [&](int threads) {
    set_thread_cap(threads);
    CorpusGenerator corpus(reg, {"succ", "copy"}, 0, 4, {0}, 5);
    auto res = train(random_weights(cfg, 3), cfg, corpus, tc);
    set_thread_cap(0);
    return res;
  };
  const auto a = run(1);
  const auto b = run(1);
  const auto c = run(4);
  CHECK(a.step_loss == b.step_loss);
  CHECK(a.step_loss == c.step_loss);
  CHECK(a.weights.unembed == c.weights.unembed);
  CHECK(a.weights.tok_emb == c.weights.tok_emb);
  REQUIRE(a.history.size() == c.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].acc == c.history[i].acc);
    CHECK(a.history[i].loss == c.history[i].loss);
  }
}

TEST_CASE("a memorizable one-prompt corpus trains to near-zero loss") {
  const auto reg = small_registry();
  const auto cfg = trainer_config(1, 2, 16);

  CorpusGenerator corpus(reg, {"copy"}, 2, 2, {0}, 11);
  TrainConfig tc;
  tc.steps = 300;
  tc.batch_size = 4;
  tc.learning_rate = 3e-3f;
  tc.schedule = TrainConfig::Schedule::Constant;
  tc.eval_every = 300;
  tc.eval_prompts = 4;
  const auto res = train(random_weights(cfg, 7), cfg, corpus, tc);
  CHECK(res.step_loss.back() < res.step_loss.front());
  CHECK(res.step_loss.back() < 1.0f);  // copy-with-context is quickly learnable
}

TEST_CASE("divergence raises a training error carrying the last good weights") {
  const auto reg = small_registry();
  const auto cfg = trainer_config();
  auto w = random_weights(cfg, 1);
  // poison the question-marker embedding: present in every rendered prompt
  w.tok_emb.at(reg.vocab.qmark(0), 0) = std::numeric_limits<float>::quiet_NaN();
  CorpusGenerator corpus(reg, {"succ"}, 1, 2, {0}, 2);
  TrainConfig tc;
  tc.steps = 3;
  tc.batch_size = 2;
  bool thrown = false;
  try {
    train(std::move(w), cfg, corpus, tc);
  } catch (const TrainingError& e) {
    thrown = true;
    CHECK(e.failed_step == 0);
    REQUIRE(e.last_good_weights != nullptr);
    CHECK(e.last_good_weights->tok_emb.rows == int(cfg.vocab_size));
  }
  CHECK(thrown);
}

TEST_CASE("gradient clipping never increases the gradient norm") {
  // the clip multiplier is min(1, clip/norm); verify the applied update obeys
  // it by running one step with an absurdly small clip and checking the
  // parameter movement stays bounded by lr * O(1) per coordinate
  const auto reg = small_registry();
  const auto cfg = trainer_config(1, 1, 8);
  auto w = random_weights(cfg, 5);
  const auto before = w;
  CorpusGenerator corpus(reg, {"succ"}, 2, 2, {0}, 3);
  TrainConfig tc;
  tc.steps = 1;
  tc.batch_size = 2;
  tc.learning_rate = 1e-2f;
  tc.grad_clip = 1e-6f;
  const auto res = train(std::move(w), cfg, corpus, tc);
  // with a tiny clipped gradient, adam's update is lr * mhat/(sqrt(vhat)+eps);
  // both moments carry the same clipped gradient so steps stay ~lr-sized
  for (size_t i = 0; i < before.unembed.data.size(); ++i) {
    CHECK(std::abs(res.weights.unembed.data[i] - before.unembed.data[i]) <=
          tc.learning_rate * 1.01f);
  }
}

TEST_CASE("grad_check: analytic gradients match finite differences") {
  const auto reg = small_registry();
  Rng rng(13);

  SUBCASE("tiny full model") {
    const auto cfg = trainer_config(1, 1, 8);
    const auto w = widen(random_weights(cfg, 17));
    CorpusGenerator corpus(reg, {"succ"}, 2, 2, {0}, 19);
    const auto sample = corpus.next();
    const double worst = grad_check(w, cfg, sample, 32, rng);
    CHECK(worst <= 1e-3);
  }
  SUBCASE("deeper config, more parameters") {
    const auto cfg = trainer_config(2, 2, 12);
    const auto w = widen(random_weights(cfg, 23));
    CorpusGenerator corpus(reg, {"last-pair"}, 1, 2, {3}, 29);
    const auto sample = corpus.next();
    const double worst = grad_check(w, cfg, sample, 48, rng);
    CHECK(worst <= 1e-3);
  }
  SUBCASE("zeroed attention reduces to the linear path") {
    const auto cfg = trainer_config(1, 1, 8);
    auto wf = random_weights(cfg, 31);
    for (auto& l : wf.layers) {
      for (auto& m : l.wq) m.fill(0.0f);
      for (auto& m : l.wk) m.fill(0.0f);
    }
    const auto w = widen(wf);
    CorpusGenerator corpus(reg, {"copy"}, 2, 2, {0}, 37);
    const auto sample = corpus.next();
    const double worst = grad_check(w, cfg, sample, 32, rng);
    CHECK(worst <= 1e-4);
  }
  SUBCASE("n_params must be positive") {
    const auto cfg = trainer_config(1, 1, 8);
    const auto w = widen(random_weights(cfg, 1));
    CorpusGenerator corpus(reg, {"succ"}, 2, 2, {0}, 1);
    const auto sample = corpus.next();
    CHECK_THROWS_AS(grad_check(w, cfg, sample, 0, rng), DomainError);
  }
}

TEST_CASE("float and double forward paths agree") {
  const auto reg = small_registry();
  const auto cfg = trainer_config(2, 2, 16);
  const auto wf = random_weights(cfg, 41);
  const auto wd = widen(wf);
  CorpusGenerator corpus(reg, {"pair"}, 3, 3, {0}, 43);
  const auto ex = corpus.next();
  const float lf = example_loss(wf, cfg, ex);
  const double ld = detail::example_loss_impl(wd, cfg, ex.tokens, ex.targets);
  CHECK(std::abs(double(lf) - ld) < 1e-4 * std::max(1.0, ld));
  // and narrow(widen(w)) is the identity
  const auto back = narrow(wd);
  CHECK(back.unembed == wf.unembed);
  CHECK(back.layers[0].fc_w == wf.layers[0].fc_w);
}

TEST_CASE("train config validation") {
  TrainConfig tc;
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), DomainError);
  tc = TrainConfig{};
  tc.beta1 = 1.0f;
  CHECK_THROWS_AS(tc.validate(), DomainError);
  tc = TrainConfig{};
  tc.grad_clip = 0.0f;
  CHECK_THROWS_AS(tc.validate(), DomainError);
}
