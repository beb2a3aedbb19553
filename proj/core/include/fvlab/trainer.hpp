// Gradient training with hand-derived backprop through every block.
// Deterministic: batch assembly is sequential from one seeded generator,
// per-prompt gradients are reduced into the optimizer buffer in prompt
// order regardless of thread count, and the Adam step is single-threaded.

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "fvlab/model.hpp"
#include "fvlab/tasks.hpp"

namespace fvlab {

struct TrainConfig {
  int steps = 5000;
  int batch_size = 32;
  float learning_rate = 1e-3f;
  enum class Schedule { Constant, Cosine } schedule = Schedule::Cosine;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_eps = 1e-8f;
  float grad_clip = 1.0f;
  uint64_t seed = 1;
  int eval_every = 500;
  int eval_prompts = 32;  // held-out 10-shot prompts per task per eval point
  int warmup_steps = 100; // linear lr ramp before the schedule takes over

  void validate() const;
};

struct HistoryRow {
  int step = 0;
  float loss = 0.0f;    // running mean since previous eval point
  std::string task;
  double acc = 0.0;     // held-out 10-shot accuracy
};

struct TrainResult {
  ModelWeights weights;
  std::vector<HistoryRow> history;
  std::vector<float> step_loss;  // one entry per step
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::shared_ptr<ModelWeights> last_good,
                int step)
      : std::runtime_error(what), last_good_weights(std::move(last_good)),
        failed_step(step) {}
  std::shared_ptr<ModelWeights> last_good_weights;
  int failed_step;
};

TrainResult train(ModelWeights weights, const ModelConfig& cfg, CorpusGenerator& corpus,
                  const TrainConfig& tc);

// Masked next-token cross entropy, averaged over target positions.
float example_loss(const ModelWeights& w, const ModelConfig& cfg,
                   const TrainingExample& ex);

// Analytic vs central finite differences (step 1e-3) on n_params randomly
// chosen parameters; returns the worst relative error. Runs on the double
// instantiation of the model so finite-difference noise stays far below the
// spec thresholds.
double grad_check(const WeightsT<double>& w, const ModelConfig& cfg,
                  const TrainingExample& sample, int n_params, Rng& rng);

WeightsT<double> widen(const ModelWeights& w);
ModelWeights narrow(const WeightsT<double>& w);

}  // namespace fvlab
