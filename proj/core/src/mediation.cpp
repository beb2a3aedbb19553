#include "fvlab/mediation.hpp"

#include <algorithm>

#include "fvlab/parallel.hpp"

namespace fvlab {

namespace {

uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

MeanActivations mean_activations(const ModelWeights& w, const ModelConfig& cfg,
                                 const std::vector<RenderedPrompt>& prompts,
                                 const std::string& task) {
  if (prompts.empty()) {
    throw CapacityError("mean_activations: empty prompt set for task " + task);
  }
  const int L = static_cast<int>(cfg.n_layers);
  const int J = static_cast<int>(cfg.n_heads);
  const int d = static_cast<int>(cfg.d_model);
  const int n = static_cast<int>(prompts.size());

  std::vector<ActivationTape> tapes(n);
  parallel_for(n, [&](int i) {
    tapes[i] = forward(w, cfg, prompts[i].tokens).tape;
  });

  MeanActivations m;
  m.task = task;
  m.n_prompts = n;
  m.head_mean.assign(L, Matrix(J, d));
  m.hidden_mean = Matrix(L, d);
  for (int i = 0; i < n; ++i) {  // prompt-index order
    for (int l = 0; l < L; ++l) {
      for (size_t k = 0; k < m.head_mean[l].data.size(); ++k) {
        m.head_mean[l].data[k] += tapes[i].head_out[l].data[k];
      }
      for (int c = 0; c < d; ++c) {
        m.hidden_mean.at(l, c) += tapes[i].hidden.at(l, c);
      }
    }
  }
  const float inv = 1.0f / static_cast<float>(n);
  for (int l = 0; l < L; ++l) {
    for (auto& x : m.head_mean[l].data) x *= inv;
  }
  for (auto& x : m.hidden_mean.data) x *= inv;
  return m;
}

double cie(const ModelWeights& w, const ModelConfig& cfg,
           const RenderedPrompt& corrupted, HeadId head, const MeanActivations& means) {
  if (!corrupted.spec.shuffled) {
    throw DomainError("cie: prompt is not shuffled");
  }
  if (head.layer < 0 || head.layer >= static_cast<int>(means.head_mean.size()) ||
      head.head < 0 || head.head >= means.head_mean[head.layer].rows) {
    throw DomainError("cie: head (" + std::to_string(head.layer) + "," +
                      std::to_string(head.head) + ") out of bounds");
  }
  const int y = corrupted.spec.target;
  const auto base = forward(w, cfg, corrupted.tokens);

  InterventionPlan plan;
  const float* row = means.head_mean[head.layer].row(head.head);
  plan.head_patches[head] =
      std::vector<float>(row, row + means.head_mean[head.layer].cols);
  const auto patched = forward(w, cfg, corrupted.tokens, &plan);
  return static_cast<double>(patched.dist[y]) - static_cast<double>(base.dist[y]);
}

AieTable aie(const ModelWeights& w, const ModelConfig& cfg, const TaskRegistry& reg,
             const std::vector<std::string>& tasks,
             const std::map<std::string, MeanActivations>& means,
             int n_corrupted_per_task, uint64_t seed, const Template& tmpl,
             int n_shots) {
  if (tasks.empty()) throw CapacityError("aie: no tasks");
  if (n_corrupted_per_task < 1) throw DomainError("aie: n_corrupted_per_task < 1");
  const int L = static_cast<int>(cfg.n_layers);
  const int J = static_cast<int>(cfg.n_heads);

  AieTable table;
  table.aie = Matrix(L, J);

  for (const auto& task_name : tasks) {
    const auto it = means.find(task_name);
    if (it == means.end()) {
      throw DomainError("aie: no mean activations for task " + task_name);
    }
    const TaskSpec& task = reg.get(task_name);
    Rng rng(seed ^ fnv1a64(task_name));
    std::vector<RenderedPrompt> prompts;
    prompts.reserve(n_corrupted_per_task);
    for (int i = 0; i < n_corrupted_per_task; ++i) {
      prompts.push_back(
          build_prompt(reg, task, n_shots, rng, tmpl, true, QueryPool::Heldout));
    }

    // one base + LxJ patched passes per prompt; prompts run in parallel,
    // reductions below are in (prompt, layer, head) order
    std::vector<Matrix> per_prompt(n_corrupted_per_task);
    parallel_for(n_corrupted_per_task, [&](int i) {
      Matrix m(L, J);
      const auto base = forward(w, cfg, prompts[i].tokens);
      const int y = prompts[i].spec.target;
      for (int l = 0; l < L; ++l) {
        for (int j = 0; j < J; ++j) {
          InterventionPlan plan;
          const float* row = it->second.head_mean[l].row(j);
          plan.head_patches[{l, j}] =
              std::vector<float>(row, row + it->second.head_mean[l].cols);
          const auto patched = forward(w, cfg, prompts[i].tokens, &plan);
          m.at(l, j) = patched.dist[y] - base.dist[y];
        }
      }
      per_prompt[i] = std::move(m);
    });

    Matrix task_mean(L, J);
    for (int i = 0; i < n_corrupted_per_task; ++i) {
      for (size_t k = 0; k < task_mean.data.size(); ++k) {
        task_mean.data[k] += per_prompt[i].data[k];
      }
    }
    for (auto& x : task_mean.data) x /= static_cast<float>(n_corrupted_per_task);
    table.task_cie[task_name] = task_mean;
    table.n_corrupted[task_name] = n_corrupted_per_task;
  }

  for (const auto& task_name : tasks) {  // macro-average in caller task order
    const Matrix& m = table.task_cie.at(task_name);
    for (size_t k = 0; k < table.aie.data.size(); ++k) {
      table.aie.data[k] += m.data[k];
    }
  }
  for (auto& x : table.aie.data) x /= static_cast<float>(tasks.size());
  return table;
}

std::vector<HeadId> select_heads(const AieTable& table, int k) {
  const int L = table.aie.rows;
  const int J = table.aie.cols;
  if (k < 0) throw DomainError("select_heads: negative k");
  if (k > L * J) {
    throw CapacityError("select_heads: k=" + std::to_string(k) + " exceeds " +
                        std::to_string(L * J) + " heads");
  }
  std::vector<std::pair<float, HeadId>> entries;
  entries.reserve(L * J);
  for (int l = 0; l < L; ++l) {
    for (int j = 0; j < J; ++j) entries.push_back({table.aie.at(l, j), {l, j}});
  }
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<HeadId> out;
  out.reserve(k);
  for (int i = 0; i < k; ++i) out.push_back(entries[i].second);
  return out;
}

FunctionVector build_fv(const MeanActivations& means, const std::vector<HeadId>& heads) {
  const int d = means.hidden_mean.cols;
  FunctionVector fv;
  fv.task = means.task;
  fv.source = FunctionVector::Source::SumOfMeans;
  fv.head_set = heads;
  fv.vec.assign(d, 0.0f);
  for (const auto& h : heads) {
    if (h.layer < 0 || h.layer >= static_cast<int>(means.head_mean.size()) ||
        h.head < 0 || h.head >= means.head_mean[h.layer].rows) {
      throw DomainError("build_fv: head (" + std::to_string(h.layer) + "," +
                        std::to_string(h.head) + ") missing from means");
    }
    const float* row = means.head_mean[h.layer].row(h.head);
    for (int i = 0; i < d; ++i) fv.vec[i] += row[i];
  }
  return fv;
}

FunctionVector layer_average_fv(const MeanActivations& means, int layer) {
  if (layer < 0 || layer >= means.hidden_mean.rows) {
    throw DomainError("layer_average_fv: layer " + std::to_string(layer) +
                      " out of bounds");
  }
  FunctionVector fv;
  fv.task = means.task;
  fv.source = FunctionVector::Source::LayerAverage;
  fv.layer = layer;
  const float* row = means.hidden_mean.row(layer);
  fv.vec.assign(row, row + means.hidden_mean.cols);
  return fv;
}

std::string FunctionVector::source_name(Source s) {
  switch (s) {
    case Source::SumOfMeans: return "sum_of_means";
    case Source::LayerAverage: return "layer_average";
    case Source::Composed: return "composed";
    case Source::Reconstructed: return "reconstructed";
  }
  return "unknown";
}

}  // namespace fvlab
