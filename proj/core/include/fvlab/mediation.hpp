// Causal mediation over attention heads: task-conditioned mean activations,
// causal indirect effect on shuffled prompts, the average indirect effect
// table, top-head selection, and function-vector construction.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "fvlab/model.hpp"
#include "fvlab/tasks.hpp"

namespace fvlab {

struct MeanActivations {
  std::string task;
  std::vector<Matrix> head_mean;  // per layer: J x d, mean a_lj at last token
  Matrix hidden_mean;             // L x d, mean h_l at last token
  int n_prompts = 0;
};

// Arithmetic mean over prompts, accumulated in prompt-index order. Prompts
// must already be filtered to ones the model answers correctly.
MeanActivations mean_activations(const ModelWeights& w, const ModelConfig& cfg,
                                 const std::vector<RenderedPrompt>& prompts,
                                 const std::string& task);

// f(p~ | a_lj := mean)[y_q] - f(p~)[y_q]; both terms full forward passes,
// patch at the last token only.
double cie(const ModelWeights& w, const ModelConfig& cfg,
           const RenderedPrompt& corrupted, HeadId head, const MeanActivations& means);

struct AieTable {
  Matrix aie;                               // L x J
  std::map<std::string, Matrix> task_cie;   // per-task mean CIE, L x J
  std::map<std::string, int> n_corrupted;
};

// Macro-average over tasks of the per-task mean CIE over n_corrupted
// shuffled 10-shot prompts. Deterministic given the seed; prompt loops are
// parallel but reductions run in canonical (task, prompt, layer, head) order.
AieTable aie(const ModelWeights& w, const ModelConfig& cfg, const TaskRegistry& reg,
             const std::vector<std::string>& tasks,
             const std::map<std::string, MeanActivations>& means,
             int n_corrupted_per_task, uint64_t seed, const Template& tmpl,
             int n_shots = 10);

// Top-k by AIE descending; ties break by (layer, head) ascending.
std::vector<HeadId> select_heads(const AieTable& table, int k);

struct FunctionVector {
  enum class Source { SumOfMeans, LayerAverage, Composed, Reconstructed };

  std::string task;
  std::vector<float> vec;
  std::vector<HeadId> head_set;
  Source source = Source::SumOfMeans;
  int layer = -1;                     // LayerAverage only
  std::vector<std::string> parents;   // Composed only

  static std::string source_name(Source s);
};

// Exact sum of the selected mean head outputs, in list order. An empty head
// set yields the zero vector.
FunctionVector build_fv(const MeanActivations& means, const std::vector<HeadId>& heads);

// The baseline: mean last-token hidden state at one layer.
FunctionVector layer_average_fv(const MeanActivations& means, int layer);

}  // namespace fvlab
