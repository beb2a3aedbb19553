// Evaluation orchestration: the manifest, the (task x context x
// intervention x layer) accuracy grid with per-prompt records, template
// robustness, and the aie -> extract -> eval -> report pipeline.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "fvlab/intervene.hpp"
#include "fvlab/mediation.hpp"
#include "fvlab/model.hpp"
#include "fvlab/tasks.hpp"

namespace fvlab {

struct ExperimentManifest {
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  std::string checkpoint;            // model artifact path (empty = in-memory)
  std::vector<std::string> tasks;
  int n_shots = 10;
  std::vector<int> template_ids = {0};
  std::vector<int> layers;           // empty = default injection layer L/3
  int head_count = 10;
  int n_clean = 100;                 // |P_t| for mean activations
  int n_corrupted = 25;              // shuffled prompts per task for AIE
  int testset_size = 50;             // query items per task per seed
  bool unfiltered = false;           // additionally report the unfiltered rows
  uint64_t extraction_seed = 97;     // clean/corrupted prompt sampling

  std::string to_json() const;
  static ExperimentManifest from_json(const std::string& text);
  static ExperimentManifest load(const std::string& path);
  void save(const std::string& path) const;
  std::string hash() const;  // FNV-1a 64 of the canonical JSON, hex
};

enum class Context { TenShot, ShuffledLabel, ZeroShot };
enum class Intervention { None, Fv, LayerAvg, Composed, Reconstructed };

std::string context_name(Context c);
std::string intervention_name(Intervention iv);
Context context_from_name(const std::string& s);
Intervention intervention_from_name(const std::string& s);

struct ArtifactSet {
  std::map<std::string, MeanActivations> means;
  std::map<std::string, FunctionVector> fv;
  std::map<std::string, FunctionVector> composed;
  std::map<std::string, FunctionVector> reconstructed;
};

struct EvalCell {
  std::string task;
  Context context = Context::ZeroShot;
  Intervention intervention = Intervention::None;
  int layer = -1;
  bool filtered = true;
  double acc_mean = 0.0;
  double acc_std = 0.0;   // sample std over seeds; valid when n_seeds >= 2
  bool has_std = false;
  int n_seeds = 0;
  int n_prompts = 0;      // summed over seeds
  bool empty_testset = false;  // flagged, run continued
};

struct PromptRecord {
  int prompt_id = 0;
  std::string task;
  Context context = Context::ZeroShot;
  Intervention intervention = Intervention::None;
  int layer = -1;
  int predicted = -1;
  int target = -1;
  bool correct = false;
  uint64_t seed = 0;
  bool filtered = true;
};

struct EvalReport {
  std::vector<EvalCell> cells;
  std::vector<PromptRecord> records;
  std::vector<PromptSpec> testset;  // the generated ten-shot prompts
};

int default_injection_layer(const ModelConfig& cfg);  // floor(L/3)

// Rebuilds the accuracy grid from raw per-prompt records (used by the
// report command and tested against evaluate's own summary).
std::vector<EvalCell> aggregate_records(const std::vector<PromptRecord>& records,
                                        bool want_unfiltered);

EvalReport evaluate(const ModelWeights& w, const ModelConfig& cfg,
                    const TaskRegistry& reg, const ArtifactSet& artifacts,
                    const ExperimentManifest& manifest,
                    const std::vector<Context>& contexts,
                    const std::vector<Intervention>& interventions);

struct TemplateRow {
  int template_id = 0;
  std::string task;
  Context context = Context::ZeroShot;
  double baseline = 0.0;
  double with_fv = 0.0;
  int n = 0;
};

struct TemplateRobustness {
  std::vector<TemplateRow> rows;
  double baseline_mean = 0.0, baseline_std = 0.0;
  double fv_mean = 0.0, fv_std = 0.0;
};

// FV extracted under the default template, evaluated under each variant.
TemplateRobustness template_robustness(const ModelWeights& w, const ModelConfig& cfg,
                                       const TaskRegistry& reg, const ArtifactSet& art,
                                       const ExperimentManifest& manifest,
                                       const std::vector<int>& template_ids,
                                       const std::vector<Context>& contexts);

// Clean-prompt means for every task (prompts filtered to model-correct).
std::map<std::string, MeanActivations> collect_means(const ModelWeights& w,
                                                     const ModelConfig& cfg,
                                                     const TaskRegistry& reg,
                                                     const ExperimentManifest& manifest);

// means -> AIE -> top-k heads -> FVs -> evaluate -> artifact files under
// run_dir (tables/, logs/, manifest.json). Byte-identical for a fixed
// manifest at any thread count.
void run_pipeline(const std::string& run_dir, const ModelWeights& w,
                  const ModelConfig& cfg, const TaskRegistry& reg,
                  const ExperimentManifest& manifest);

}  // namespace fvlab
