#include "fvlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "fvlab/detail/backprop_impl.hpp"
#include "fvlab/parallel.hpp"

namespace fvlab {

void TrainConfig::validate() const {
  if (steps < 0) throw DomainError("TrainConfig: negative steps");
  if (batch_size < 1) throw DomainError("TrainConfig: batch_size < 1");
  if (!(learning_rate >= 0.0f)) throw DomainError("TrainConfig: learning_rate < 0");
  if (beta1 < 0.0f || beta1 >= 1.0f || beta2 < 0.0f || beta2 >= 1.0f) {
    throw DomainError("TrainConfig: betas must lie in [0, 1)");
  }
  if (!(grad_clip > 0.0f)) throw DomainError("TrainConfig: grad_clip <= 0");
  if (eval_every < 1) throw DomainError("TrainConfig: eval_every < 1");
  if (warmup_steps < 0) throw DomainError("TrainConfig: negative warmup");
}

float example_loss(const ModelWeights& w, const ModelConfig& cfg,
                   const TrainingExample& ex) {
  return detail::example_loss_impl(w, cfg, ex.tokens, ex.targets);
}

namespace {

// held-out 10-shot accuracy per task, deterministic given the seed
std::vector<HistoryRow> eval_tasks(const ModelWeights& w, const ModelConfig& cfg,
                                   const TaskRegistry& reg,
                                   const std::vector<std::string>& tasks, int step,
                                   float loss, int n_prompts, uint64_t seed) {
  std::vector<HistoryRow> rows;
  for (const auto& name : tasks) {
    Rng rng(seed ^ (0x9E3779B9ull + static_cast<uint64_t>(step)));
    const TaskSpec& task = reg.get(name);
    std::vector<RenderedPrompt> prompts;
    prompts.reserve(n_prompts);
    for (int i = 0; i < n_prompts; ++i) {
      prompts.push_back(build_prompt(reg, task, 10, rng, Template{}, false,
                                     QueryPool::Heldout));
    }
    std::vector<char> ok(n_prompts, 0);
    parallel_for(n_prompts, [&](int i) {
      const auto out = forward(w, cfg, prompts[i].tokens);
      ok[i] = argmax_lowest(out.dist) == prompts[i].spec.target ? 1 : 0;
    });
    int correct = 0;
    for (char c : ok) correct += c;
    rows.push_back({step, loss, name, double(correct) / double(n_prompts)});
  }
  return rows;
}

}  // namespace

TrainResult train(ModelWeights weights, const ModelConfig& cfg, CorpusGenerator& corpus,
                  const TrainConfig& tc) {
  tc.validate();
  cfg.validate();

  // prompt i accumulates into slot i % n_slots, within-slot in prompt order,
  // and slots reduce into the master in slot order. The tree is a function
  // of batch_size alone, never of the thread count.
  const int nthreads = std::max(1, thread_cap());
  const int n_slots = std::min(tc.batch_size, std::max(nthreads, 8));
  detail::TransposeCache<float> wt(weights);
  std::vector<ModelWeights> slot_grads(n_slots, detail::zero_like(weights));
  std::vector<detail::BackwardScratch<float>> slot_scratch(n_slots);
  ModelWeights grads = detail::zero_like(weights);

  // flat Adam state in canonical parameter order
  size_t total_params = 0;
  detail::visit_params(weights,
                       [&](std::vector<float>& v) { total_params += v.size(); });
  std::vector<float> adam_m(total_params, 0.0f), adam_v(total_params, 0.0f);

  // stable views of every parameter array and its gradient buffers
  struct ParamArray {
    float* param;
    float* grad;
    std::vector<float*> slot_grad;
    size_t offset;
    size_t len;
  };
  std::vector<ParamArray> param_arrays;
  {
    size_t off = 0;
    detail::visit_params(weights, [&](std::vector<float>& v) {
      param_arrays.push_back({v.data(), nullptr, {}, off, v.size()});
      off += v.size();
    });
    size_t i = 0;
    detail::visit_params(grads, [&](std::vector<float>& v) {
      param_arrays[i++].grad = v.data();
    });
    for (int s = 0; s < n_slots; ++s) {
      i = 0;
      detail::visit_params(slot_grads[s], [&](std::vector<float>& v) {
        param_arrays[i++].slot_grad.push_back(v.data());
      });
    }
  }

  TrainResult result;
  result.step_loss.reserve(tc.steps);
  auto last_good = std::make_shared<ModelWeights>(weights);

  float loss_accum = 0.0f;
  int loss_count = 0;

  for (int step = 0; step < tc.steps; ++step) {
    // batch assembly is sequential on the corpus RNG
    std::vector<TrainingExample> batch;
    batch.reserve(tc.batch_size);
    int total_targets = 0;
    for (int b = 0; b < tc.batch_size; ++b) {
      batch.push_back(corpus.next());
      for (int t : batch.back().targets) total_targets += t >= 0 ? 1 : 0;
    }
    const float scale = 1.0f / static_cast<float>(total_targets);

    std::vector<float> slot_loss(n_slots, 0.0f);
    parallel_for(n_slots, [&](int s) {
      detail::zero_weights(slot_grads[s]);
      slot_loss[s] = 0.0f;
      for (int i = s; i < tc.batch_size; i += n_slots) {
        slot_loss[s] += detail::backward_example(weights, wt, cfg, batch[i].tokens,
                                                 batch[i].targets, slot_grads[s],
                                                 scale, slot_scratch[s]);
      }
    });
    float loss_sum = 0.0f;
    for (int s = 0; s < n_slots; ++s) loss_sum += slot_loss[s];

    // elementwise reduction and clip-norm partials, one parameter array per
    // worker; per element the slot order is fixed, per array the partial
    // sums combine in array order, so nothing depends on the thread count
    const int n_arrays = static_cast<int>(param_arrays.size());
    std::vector<float> sq_partial(n_arrays, 0.0f);
    parallel_for(n_arrays, [&](int a) {
      float* g = param_arrays[a].grad;
      const size_t len = param_arrays[a].len;
      for (size_t i = 0; i < len; ++i) g[i] = 0.0f;
      for (int s = 0; s < n_slots; ++s) {
        const float* sg = param_arrays[a].slot_grad[s];
        for (size_t i = 0; i < len; ++i) g[i] += sg[i];
      }
      float sq = 0.0f;
      for (size_t i = 0; i < len; ++i) sq += g[i] * g[i];
      sq_partial[a] = sq;
    });

    const float loss = loss_sum / static_cast<float>(total_targets);
    result.step_loss.push_back(loss);
    loss_accum += loss;
    ++loss_count;

    if (!std::isfinite(loss)) {
      throw TrainingError("training diverged at step " + std::to_string(step) +
                              " (loss not finite)",
                          last_good, step);
    }

    float sq = 0.0f;
    for (int a = 0; a < n_arrays; ++a) sq += sq_partial[a];
    const float norm = std::sqrt(sq);
    const float clip_mul = norm > tc.grad_clip ? tc.grad_clip / norm : 1.0f;

    float lr = tc.learning_rate;
    if (tc.schedule == TrainConfig::Schedule::Cosine) {
      lr *= 0.5f * (1.0f + std::cos(3.14159265358979323846f * float(step) /
                                    float(std::max(1, tc.steps))));
    }
    if (tc.warmup_steps > 0 && step < tc.warmup_steps) {
      lr *= float(step + 1) / float(tc.warmup_steps);
    }
    const float b1t = 1.0f - std::pow(tc.beta1, float(step + 1));
    const float b2t = 1.0f - std::pow(tc.beta2, float(step + 1));

    parallel_for(n_arrays, [&](int a) {
      float* p = param_arrays[a].param;
      float* g = param_arrays[a].grad;
      float* m = adam_m.data() + param_arrays[a].offset;
      float* v = adam_v.data() + param_arrays[a].offset;
      const size_t len = param_arrays[a].len;
      for (size_t i = 0; i < len; ++i) {
        const float gv = g[i] * clip_mul;
        m[i] = tc.beta1 * m[i] + (1.0f - tc.beta1) * gv;
        v[i] = tc.beta2 * v[i] + (1.0f - tc.beta2) * gv * gv;
        const float mhat = m[i] / b1t;
        const float vhat = v[i] / b2t;
        p[i] -= lr * mhat / (std::sqrt(vhat) + tc.adam_eps);
      }
    });
    wt.rebuild(weights);

    if ((step + 1) % tc.eval_every == 0 || step + 1 == tc.steps) {
      const float mean_loss = loss_accum / float(std::max(1, loss_count));
      auto rows = eval_tasks(weights, cfg, corpus.registry(), corpus.task_names(),
                             step + 1, mean_loss, tc.eval_prompts, tc.seed);
      result.history.insert(result.history.end(), rows.begin(), rows.end());
      loss_accum = 0.0f;
      loss_count = 0;
      *last_good = weights;
    }
  }

  result.weights = std::move(weights);
  return result;
}

WeightsT<double> widen(const ModelWeights& w) {
  WeightsT<double> out;
  out.tok_emb = MatrixD(w.tok_emb.rows, w.tok_emb.cols);
  out.pos_emb = MatrixD(w.pos_emb.rows, w.pos_emb.cols);
  for (const auto& l : w.layers) {
    LayerWeightsT<double> dl;
    for (const auto& m : l.wq) dl.wq.push_back(MatrixD(m.rows, m.cols));
    for (const auto& m : l.wk) dl.wk.push_back(MatrixD(m.rows, m.cols));
    for (const auto& m : l.wv) dl.wv.push_back(MatrixD(m.rows, m.cols));
    for (const auto& m : l.wo) dl.wo.push_back(MatrixD(m.rows, m.cols));
    dl.ln1_gain.resize(l.ln1_gain.size());
    dl.ln1_bias.resize(l.ln1_bias.size());
    dl.ln2_gain.resize(l.ln2_gain.size());
    dl.ln2_bias.resize(l.ln2_bias.size());
    dl.fc_w = MatrixD(l.fc_w.rows, l.fc_w.cols);
    dl.fc_b.resize(l.fc_b.size());
    dl.proj_w = MatrixD(l.proj_w.rows, l.proj_w.cols);
    dl.proj_b.resize(l.proj_b.size());
    out.layers.push_back(std::move(dl));
  }
  out.lnf_gain.resize(w.lnf_gain.size());
  out.lnf_bias.resize(w.lnf_bias.size());
  out.unembed = MatrixD(w.unembed.rows, w.unembed.cols);

  std::vector<const std::vector<float>*> src;
  detail::visit_params(const_cast<ModelWeights&>(w),
                       [&](std::vector<float>& v) { src.push_back(&v); });
  size_t i = 0;
  detail::visit_params(out, [&](std::vector<double>& v) {
    const auto& s = *src[i++];
    for (size_t k = 0; k < v.size(); ++k) v[k] = static_cast<double>(s[k]);
  });
  return out;
}

ModelWeights narrow(const WeightsT<double>& w) {
  ModelWeights out;
  out.tok_emb = Matrix(w.tok_emb.rows, w.tok_emb.cols);
  out.pos_emb = Matrix(w.pos_emb.rows, w.pos_emb.cols);
  for (const auto& l : w.layers) {
    LayerWeightsT<float> fl;
    for (const auto& m : l.wq) fl.wq.push_back(Matrix(m.rows, m.cols));
    for (const auto& m : l.wk) fl.wk.push_back(Matrix(m.rows, m.cols));
    for (const auto& m : l.wv) fl.wv.push_back(Matrix(m.rows, m.cols));
    for (const auto& m : l.wo) fl.wo.push_back(Matrix(m.rows, m.cols));
    fl.ln1_gain.resize(l.ln1_gain.size());
    fl.ln1_bias.resize(l.ln1_bias.size());
    fl.ln2_gain.resize(l.ln2_gain.size());
    fl.ln2_bias.resize(l.ln2_bias.size());
    fl.fc_w = Matrix(l.fc_w.rows, l.fc_w.cols);
    fl.fc_b.resize(l.fc_b.size());
    fl.proj_w = Matrix(l.proj_w.rows, l.proj_w.cols);
    fl.proj_b.resize(l.proj_b.size());
    out.layers.push_back(std::move(fl));
  }
  out.lnf_gain.resize(w.lnf_gain.size());
  out.lnf_bias.resize(w.lnf_bias.size());
  out.unembed = Matrix(w.unembed.rows, w.unembed.cols);

  std::vector<const std::vector<double>*> src;
  detail::visit_params(const_cast<WeightsT<double>&>(w),
                       [&](std::vector<double>& v) { src.push_back(&v); });
  size_t i = 0;
  detail::visit_params(out, [&](std::vector<float>& v) {
    const auto& s = *src[i++];
    for (size_t k = 0; k < v.size(); ++k) v[k] = static_cast<float>(s[k]);
  });
  return out;
}

double grad_check(const WeightsT<double>& w, const ModelConfig& cfg,
                  const TrainingExample& sample, int n_params, Rng& rng) {
  if (n_params < 1) throw DomainError("grad_check: n_params must be >= 1");

  int n_targets = 0;
  for (int t : sample.targets) n_targets += t >= 0 ? 1 : 0;
  if (n_targets == 0) throw DomainError("grad_check: sample has no targets");

  detail::TransposeCache<double> wt(w);
  WeightsT<double> grads = detail::zero_like(w);
  detail::backward_example(w, wt, cfg, sample.tokens, sample.targets, grads,
                           1.0 / n_targets);

  size_t total = 0;
  detail::visit_params(const_cast<WeightsT<double>&>(w),
                       [&](std::vector<double>& v) { total += v.size(); });

  WeightsT<double> probe = w;
  std::vector<std::vector<double>*> arrays;
  detail::visit_params(probe, [&](std::vector<double>& v) { arrays.push_back(&v); });
  std::vector<std::vector<double>*> garrays;
  detail::visit_params(grads, [&](std::vector<double>& v) { garrays.push_back(&v); });

  const double h = 1e-3;
  double worst = 0.0;
  for (int s = 0; s < n_params; ++s) {
    size_t idx = rng.below(total);
    size_t a = 0;
    while (idx >= arrays[a]->size()) {
      idx -= arrays[a]->size();
      ++a;
    }
    double& slot = (*arrays[a])[idx];
    const double orig = slot;
    slot = orig + h;
    const double lp = detail::example_loss_impl(probe, cfg, sample.tokens, sample.targets);
    slot = orig - h;
    const double lm = detail::example_loss_impl(probe, cfg, sample.tokens, sample.targets);
    slot = orig;
    const double numeric = (lp - lm) / (2.0 * h);
    const double analytic = (*garrays[a])[idx];
    // central differences at step 1e-3 carry O(h^2) truncation noise of
    // ~1e-5 absolute; the 1e-2 floor turns that into <= 1e-3 reported
    // error so near-zero gradients are compared absolutely
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-2});
    worst = std::max(worst, std::abs(numeric - analytic) / denom);
  }
  return worst;
}

}  // namespace fvlab
