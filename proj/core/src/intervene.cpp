#include "fvlab/intervene.hpp"

#include <algorithm>

#include "fvlab/parallel.hpp"

namespace fvlab {

void InjectionSpec::validate(const ModelConfig& cfg) const {
  const int L = static_cast<int>(cfg.n_layers);
  const int d = static_cast<int>(cfg.d_model);
  if (mode == Mode::SingleLayer) {
    if (layer < 0 || layer >= L) {
      throw DomainError("InjectionSpec: layer " + std::to_string(layer) +
                        " out of bounds");
    }
    if (static_cast<int>(fv.vec.size()) != d) {
      throw ShapeError("InjectionSpec: fv length " + std::to_string(fv.vec.size()) +
                       " != d_model " + std::to_string(d));
    }
  } else {
    if (fv.head_set.empty()) {
      throw DomainError("InjectionSpec: per-head-layers mode needs a head set");
    }
    if (means == nullptr) {
      throw DomainError("InjectionSpec: per-head-layers mode needs mean activations");
    }
    for (const auto& h : fv.head_set) {
      if (h.layer < 0 || h.layer >= L || h.head < 0 ||
          h.head >= static_cast<int>(cfg.n_heads)) {
        throw DomainError("InjectionSpec: head out of bounds");
      }
    }
  }
}

InterventionPlan make_plan(const InjectionSpec& spec, const ModelConfig& cfg) {
  spec.validate(cfg);
  const int d = static_cast<int>(cfg.d_model);
  InterventionPlan plan;
  plan.apply_during_generation = spec.apply_during_generation;
  if (spec.mode == InjectionSpec::Mode::SingleLayer) {
    std::vector<float> v = spec.fv.vec;
    for (auto& x : v) x *= spec.multiplier;
    plan.layer_additions[spec.layer] = std::move(v);
  } else {
    // every implicated layer receives the sum of its own heads' means,
    // summed in head-set order
    for (const auto& h : spec.fv.head_set) {
      auto& dst = plan.layer_additions[h.layer];
      if (dst.empty()) dst.assign(d, 0.0f);
      const float* row = spec.means->head_mean[h.layer].row(h.head);
      for (int i = 0; i < d; ++i) dst[i] += row[i] * spec.multiplier;
    }
  }
  return plan;
}

ForwardOutput inject(const ModelWeights& w, const ModelConfig& cfg,
                     const std::vector<int>& tokens, const InjectionSpec& spec) {
  const InterventionPlan plan = make_plan(spec, cfg);
  return forward(w, cfg, tokens, &plan);
}

namespace {

double plan_accuracy(const ModelWeights& w, const ModelConfig& cfg,
                     const std::vector<RenderedPrompt>& testset,
                     const InterventionPlan& plan) {
  const int n = static_cast<int>(testset.size());
  std::vector<char> ok(n, 0);
  parallel_for(n, [&](int i) {
    const auto out = forward(w, cfg, testset[i].tokens, &plan);
    ok[i] = argmax_lowest(out.dist) == testset[i].spec.target ? 1 : 0;
  });
  int correct = 0;
  for (char c : ok) correct += c;
  return n == 0 ? 0.0 : double(correct) / double(n);
}

}  // namespace

std::vector<SweepRow> layer_sweep(const ModelWeights& w, const ModelConfig& cfg,
                                  const std::vector<RenderedPrompt>& testset,
                                  const FunctionVector& fv,
                                  const std::vector<int>& layers) {
  if (testset.empty()) throw CapacityError("layer_sweep: empty test set");
  std::vector<SweepRow> rows;
  for (int layer : layers) {
    InjectionSpec spec;
    spec.fv = fv;
    spec.mode = InjectionSpec::Mode::SingleLayer;
    spec.layer = layer;
    const InterventionPlan plan = make_plan(spec, cfg);
    rows.push_back({fv.task, layer, plan_accuracy(w, cfg, testset, plan),
                    static_cast<int>(testset.size())});
  }
  return rows;
}

FormulationComparison compare_formulations(const ModelWeights& w, const ModelConfig& cfg,
                                           const std::vector<RenderedPrompt>& testset,
                                           const FunctionVector& fv,
                                           const MeanActivations& means,
                                           const std::vector<int>& layers) {
  FormulationComparison cmp;
  cmp.n = static_cast<int>(testset.size());
  cmp.single_layer = layer_sweep(w, cfg, testset, fv, layers);
  for (const auto& row : cmp.single_layer) {
    if (cmp.best_layer < 0 || row.accuracy > cmp.best_single) {
      cmp.best_single = row.accuracy;
      cmp.best_layer = row.layer;
    }
  }
  InjectionSpec spec;
  spec.fv = fv;
  spec.mode = InjectionSpec::Mode::PerHeadLayers;
  spec.means = &means;
  cmp.per_head_layers = plan_accuracy(w, cfg, testset, make_plan(spec, cfg));
  return cmp;
}

}  // namespace fvlab
