// Applying function vectors to live passes: single-layer addition
// h'_l = h_l + v at the last token (post-block), the per-head-layers
// alternative that routes each mean head output to its own layer, and
// layer sweeps over a test set.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fvlab/mediation.hpp"
#include "fvlab/model.hpp"
#include "fvlab/tasks.hpp"

namespace fvlab {

struct InjectionSpec {
  enum class Mode { SingleLayer, PerHeadLayers };

  FunctionVector fv;
  Mode mode = Mode::SingleLayer;
  int layer = 0;                           // SingleLayer
  const MeanActivations* means = nullptr;  // PerHeadLayers
  bool apply_during_generation = false;
  float multiplier = 1.0f;

  void validate(const ModelConfig& cfg) const;
};

InterventionPlan make_plan(const InjectionSpec& spec, const ModelConfig& cfg);

ForwardOutput inject(const ModelWeights& w, const ModelConfig& cfg,
                     const std::vector<int>& tokens, const InjectionSpec& spec);

struct SweepRow {
  std::string task;
  int layer = 0;
  double accuracy = 0.0;
  int n = 0;
};

// Top-1 accuracy per injection layer over the test set.
std::vector<SweepRow> layer_sweep(const ModelWeights& w, const ModelConfig& cfg,
                                  const std::vector<RenderedPrompt>& testset,
                                  const FunctionVector& fv,
                                  const std::vector<int>& layers);

struct FormulationComparison {
  std::vector<SweepRow> single_layer;  // one row per layer
  double best_single = 0.0;
  int best_layer = -1;
  double per_head_layers = 0.0;
  int n = 0;
};

// Same prompts, same seed: single-layer curve vs the per-head-layers rule.
FormulationComparison compare_formulations(const ModelWeights& w, const ModelConfig& cfg,
                                           const std::vector<RenderedPrompt>& testset,
                                           const FunctionVector& fv,
                                           const MeanActivations& means,
                                           const std::vector<int>& layers);

}  // namespace fvlab
