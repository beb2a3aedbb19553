#include "fvlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "fvlab/parallel.hpp"
#include "fvlab/report.hpp"
#include "json.hpp"

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

std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

}  // namespace

std::string context_name(Context c) {
  switch (c) {
    case Context::TenShot: return "ten_shot";
    case Context::ShuffledLabel: return "shuffled_label";
    case Context::ZeroShot: return "zero_shot";
  }
  return "unknown";
}

std::string intervention_name(Intervention iv) {
  switch (iv) {
    case Intervention::None: return "none";
    case Intervention::Fv: return "fv";
    case Intervention::LayerAvg: return "layer_avg";
    case Intervention::Composed: return "composed";
    case Intervention::Reconstructed: return "reconstructed";
  }
  return "unknown";
}

Context context_from_name(const std::string& s) {
  if (s == "ten_shot" || s == "ten-shot") return Context::TenShot;
  if (s == "shuffled_label" || s == "shuffled") return Context::ShuffledLabel;
  if (s == "zero_shot" || s == "zero-shot") return Context::ZeroShot;
  throw DomainError("unknown context '" + s + "'");
}

Intervention intervention_from_name(const std::string& s) {
  if (s == "none") return Intervention::None;
  if (s == "fv") return Intervention::Fv;
  if (s == "layer_avg" || s == "layer-avg") return Intervention::LayerAvg;
  if (s == "composed") return Intervention::Composed;
  if (s == "reconstructed") return Intervention::Reconstructed;
  throw DomainError("unknown intervention '" + s + "'");
}

std::string ExperimentManifest::to_json() const {
  nlohmann::json j;
  j["checkpoint"] = checkpoint;
  j["extraction_seed"] = extraction_seed;
  j["head_count"] = head_count;
  j["layers"] = layers;
  j["n_clean"] = n_clean;
  j["n_corrupted"] = n_corrupted;
  j["n_shots"] = n_shots;
  j["seeds"] = seeds;
  j["tasks"] = tasks;
  j["template_ids"] = template_ids;
  j["testset_size"] = testset_size;
  j["unfiltered"] = unfiltered;
  return j.dump(2) + "\n";
}

ExperimentManifest ExperimentManifest::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ExperimentManifest m;
  if (j.contains("checkpoint")) m.checkpoint = j["checkpoint"].get<std::string>();
  if (j.contains("extraction_seed")) m.extraction_seed = j["extraction_seed"].get<uint64_t>();
  if (j.contains("head_count")) m.head_count = j["head_count"].get<int>();
  if (j.contains("layers")) m.layers = j["layers"].get<std::vector<int>>();
  if (j.contains("n_clean")) m.n_clean = j["n_clean"].get<int>();
  if (j.contains("n_corrupted")) m.n_corrupted = j["n_corrupted"].get<int>();
  if (j.contains("n_shots")) m.n_shots = j["n_shots"].get<int>();
  if (j.contains("seeds")) m.seeds = j["seeds"].get<std::vector<uint64_t>>();
  if (j.contains("tasks")) m.tasks = j["tasks"].get<std::vector<std::string>>();
  if (j.contains("template_ids")) m.template_ids = j["template_ids"].get<std::vector<int>>();
  if (j.contains("testset_size")) m.testset_size = j["testset_size"].get<int>();
  if (j.contains("unfiltered")) m.unfiltered = j["unfiltered"].get<bool>();
  return m;
}

ExperimentManifest ExperimentManifest::load(const std::string& path) {
  return from_json(read_text_file(path));
}

void ExperimentManifest::save(const std::string& path) const {
  write_text_file(path, to_json());
}

std::string ExperimentManifest::hash() const { return hex64(fnv1a64(to_json())); }

int default_injection_layer(const ModelConfig& cfg) {
  return static_cast<int>(cfg.n_layers) / 3;
}

namespace {

RenderedPrompt zero_shot_variant(const Vocab& v, const RenderedPrompt& p) {
  PromptSpec spec = p.spec;
  spec.exemplars.clear();
  spec.shuffled = false;
  return render(v, spec);
}

struct PlanResolution {
  bool ok = false;
  InterventionPlan plan;
};

PlanResolution resolve_plan(const ModelConfig& cfg, const ArtifactSet& art,
                            const std::string& task, Intervention iv, int layer) {
  PlanResolution r;
  auto single = [&](const FunctionVector& fv) {
    InjectionSpec spec;
    spec.fv = fv;
    spec.mode = InjectionSpec::Mode::SingleLayer;
    spec.layer = layer;
    r.plan = make_plan(spec, cfg);
    r.ok = true;
  };
  switch (iv) {
    case Intervention::None:
      r.ok = true;
      break;
    case Intervention::Fv: {
      const auto it = art.fv.find(task);
      if (it != art.fv.end()) single(it->second);
      break;
    }
    case Intervention::LayerAvg: {
      const auto it = art.means.find(task);
      if (it != art.means.end()) single(layer_average_fv(it->second, layer));
      break;
    }
    case Intervention::Composed: {
      const auto it = art.composed.find(task);
      if (it != art.composed.end()) single(it->second);
      break;
    }
    case Intervention::Reconstructed: {
      const auto it = art.reconstructed.find(task);
      if (it != art.reconstructed.end()) single(it->second);
      break;
    }
  }
  return r;
}

std::vector<EvalCell> aggregate(const std::vector<PromptRecord>& records,
                                bool want_unfiltered) {
  struct Key {
    std::string task;
    Context ctx;
    Intervention iv;
    int layer;
    auto operator<=>(const Key&) const = default;
  };
  struct Counts {
    int correct = 0;
    int n = 0;
  };
  struct Group {
    std::map<uint64_t, Counts> filtered;  // per seed, filter-passing prompts
    std::map<uint64_t, Counts> all;       // per seed, everything
  };
  std::map<Key, Group> groups;
  for (const auto& rec : records) {
    auto& g = groups[Key{rec.task, rec.context, rec.intervention, rec.layer}];
    auto& a = g.all[rec.seed];
    a.correct += rec.correct ? 1 : 0;
    a.n += 1;
    g.filtered.try_emplace(rec.seed);  // seed participated even if nothing passed
    if (rec.filtered) {
      auto& f = g.filtered[rec.seed];
      f.correct += rec.correct ? 1 : 0;
      f.n += 1;
    }
  }

  auto make_cell = [](const Key& key, const std::map<uint64_t, Counts>& per_seed,
                      bool filtered) {
    EvalCell c;
    c.task = key.task;
    c.context = key.ctx;
    c.intervention = key.iv;
    c.layer = key.layer;
    c.filtered = filtered;
    std::vector<double> accs;
    for (const auto& [seed, cn] : per_seed) {
      if (cn.n > 0) accs.push_back(double(cn.correct) / double(cn.n));
      c.n_prompts += cn.n;
    }
    c.empty_testset = accs.size() < per_seed.size();
    c.n_seeds = static_cast<int>(accs.size());
    if (!accs.empty()) {
      double sum = 0.0;
      for (double a : accs) sum += a;
      c.acc_mean = sum / double(accs.size());
      if (accs.size() >= 2) {
        double sq = 0.0;
        for (double a : accs) sq += (a - c.acc_mean) * (a - c.acc_mean);
        c.acc_std = std::sqrt(sq / double(accs.size() - 1));
        c.has_std = true;
      }
    }
    return c;
  };

  std::vector<EvalCell> cells;
  for (const auto& [key, group] : groups) {
    cells.push_back(make_cell(key, group.filtered, true));
    if (want_unfiltered) cells.push_back(make_cell(key, group.all, false));
  }
  return cells;
}

}  // namespace

std::vector<EvalCell> aggregate_records(const std::vector<PromptRecord>& records,
                                        bool want_unfiltered) {
  return aggregate(records, want_unfiltered);
}

EvalReport evaluate(const ModelWeights& w, const ModelConfig& cfg,
                    const TaskRegistry& reg, const ArtifactSet& artifacts,
                    const ExperimentManifest& manifest,
                    const std::vector<Context>& contexts,
                    const std::vector<Intervention>& interventions) {
  cfg.validate();
  std::vector<int> layers = manifest.layers;
  if (layers.empty()) layers = {default_injection_layer(cfg)};
  const Template tmpl = Template::from_id(
      reg.vocab, manifest.template_ids.empty() ? 0 : manifest.template_ids[0]);

  EvalReport report;
  for (uint64_t seed : manifest.seeds) {
    for (const auto& task_name : manifest.tasks) {
      const TaskSpec& task = reg.get(task_name);
      Rng rng(seed ^ fnv1a64(task_name));
      const TestSets sets = task_filtered_testset(reg, task, w, cfg,
                                                  manifest.testset_size, rng, tmpl,
                                                  manifest.n_shots);
      const int n = static_cast<int>(sets.unfiltered.size());
      for (const auto& p : sets.unfiltered) report.testset.push_back(p.spec);

      std::vector<RenderedPrompt> shuffled, zero;
      if (std::find(contexts.begin(), contexts.end(), Context::ShuffledLabel) !=
          contexts.end()) {
        shuffled.reserve(n);
        for (const auto& p : sets.unfiltered) {
          shuffled.push_back(render(reg.vocab, shuffle_labels(p.spec, rng)));
        }
      }
      if (std::find(contexts.begin(), contexts.end(), Context::ZeroShot) !=
          contexts.end()) {
        zero.reserve(n);
        for (const auto& p : sets.unfiltered) {
          zero.push_back(zero_shot_variant(reg.vocab, p));
        }
      }

      for (Context ctx : contexts) {
        const std::vector<RenderedPrompt>& prompts =
            ctx == Context::TenShot ? sets.unfiltered
            : ctx == Context::ShuffledLabel ? shuffled : zero;
        for (Intervention iv : interventions) {
          const std::vector<int> iv_layers =
              iv == Intervention::None ? std::vector<int>{-1} : layers;
          for (int layer : iv_layers) {
            const PlanResolution res =
                resolve_plan(cfg, artifacts, task_name, iv, layer);
            if (!res.ok) continue;
            std::vector<int> predicted(n, -1);
            parallel_for(n, [&](int i) {
              const auto out = forward(w, cfg, prompts[i].tokens,
                                       iv == Intervention::None ? nullptr : &res.plan);
              predicted[i] = argmax_lowest(out.dist);
            });
            for (int i = 0; i < n; ++i) {
              PromptRecord rec;
              rec.prompt_id = i;
              rec.task = task_name;
              rec.context = ctx;
              rec.intervention = iv;
              rec.layer = layer;
              rec.predicted = predicted[i];
              rec.target = prompts[i].spec.target;
              rec.correct = predicted[i] == prompts[i].spec.target;
              rec.seed = seed;
              rec.filtered = sets.pass[i] != 0;
              report.records.push_back(rec);
            }
          }
        }
      }
    }
  }
  report.cells = aggregate(report.records, manifest.unfiltered);
  return report;
}

std::map<std::string, MeanActivations> collect_means(const ModelWeights& w,
                                                     const ModelConfig& cfg,
                                                     const TaskRegistry& reg,
                                                     const ExperimentManifest& manifest) {
  const Template tmpl = Template::from_id(
      reg.vocab, manifest.template_ids.empty() ? 0 : manifest.template_ids[0]);
  std::map<std::string, MeanActivations> out;
  for (const auto& task_name : manifest.tasks) {
    const TaskSpec& task = reg.get(task_name);
    Rng rng(manifest.extraction_seed ^ fnv1a64(task_name));
    std::vector<RenderedPrompt> correct;
    correct.reserve(manifest.n_clean);
    const int batch = 32;
    const int max_attempts = std::max(20 * manifest.n_clean, 200);
    int attempted = 0;
    while (static_cast<int>(correct.size()) < manifest.n_clean &&
           attempted < max_attempts) {
      std::vector<RenderedPrompt> cand;
      cand.reserve(batch);
      for (int i = 0; i < batch; ++i) {
        cand.push_back(build_prompt(reg, task, manifest.n_shots, rng, tmpl, false,
                                    QueryPool::Train));
      }
      attempted += batch;
      std::vector<char> ok(batch, 0);
      parallel_for(batch, [&](int i) {
        const auto fwd = forward(w, cfg, cand[i].tokens);
        ok[i] = argmax_lowest(fwd.dist) == cand[i].spec.target ? 1 : 0;
      });
      for (int i = 0; i < batch &&
                      static_cast<int>(correct.size()) < manifest.n_clean;
           ++i) {
        if (ok[i]) correct.push_back(cand[i]);
      }
    }
    if (correct.empty()) {
      throw CapacityError("collect_means: model never answers task " + task_name +
                          " correctly");
    }
    out.emplace(task_name, mean_activations(w, cfg, correct, task_name));
  }
  return out;
}

TemplateRobustness template_robustness(const ModelWeights& w, const ModelConfig& cfg,
                                       const TaskRegistry& reg, const ArtifactSet& art,
                                       const ExperimentManifest& manifest,
                                       const std::vector<int>& template_ids,
                                       const std::vector<Context>& contexts) {
  const int layer =
      manifest.layers.empty() ? default_injection_layer(cfg) : manifest.layers[0];
  const uint64_t seed = manifest.seeds.empty() ? 1 : manifest.seeds[0];

  TemplateRobustness out;
  for (int tid : template_ids) {
    const Template tmpl = Template::from_id(reg.vocab, tid);
    for (const auto& task_name : manifest.tasks) {
      const auto fv_it = art.fv.find(task_name);
      if (fv_it == art.fv.end()) continue;
      const TaskSpec& task = reg.get(task_name);
      Rng rng(seed ^ fnv1a64(task_name) ^ (uint64_t(tid) << 32));
      const TestSets sets = task_filtered_testset(reg, task, w, cfg,
                                                  manifest.testset_size, rng, tmpl,
                                                  manifest.n_shots);
      if (sets.filtered.empty()) continue;

      for (Context ctx : contexts) {
        std::vector<RenderedPrompt> prompts;
        prompts.reserve(sets.filtered.size());
        for (const auto& p : sets.filtered) {
          if (ctx == Context::ShuffledLabel) {
            prompts.push_back(render(reg.vocab, shuffle_labels(p.spec, rng)));
          } else if (ctx == Context::ZeroShot) {
            prompts.push_back(zero_shot_variant(reg.vocab, p));
          } else {
            prompts.push_back(p);
          }
        }
        const int n = static_cast<int>(prompts.size());
        InjectionSpec spec;
        spec.fv = fv_it->second;
        spec.mode = InjectionSpec::Mode::SingleLayer;
        spec.layer = layer;
        const InterventionPlan plan = make_plan(spec, cfg);

        std::vector<char> base_ok(n, 0), fv_ok(n, 0);
        parallel_for(n, [&](int i) {
          const auto b = forward(w, cfg, prompts[i].tokens);
          base_ok[i] = argmax_lowest(b.dist) == prompts[i].spec.target ? 1 : 0;
          const auto f = forward(w, cfg, prompts[i].tokens, &plan);
          fv_ok[i] = argmax_lowest(f.dist) == prompts[i].spec.target ? 1 : 0;
        });
        int bc = 0, fc = 0;
        for (int i = 0; i < n; ++i) {
          bc += base_ok[i];
          fc += fv_ok[i];
        }
        TemplateRow row;
        row.template_id = tid;
        row.task = task_name;
        row.context = ctx;
        row.baseline = double(bc) / double(n);
        row.with_fv = double(fc) / double(n);
        row.n = n;
        out.rows.push_back(row);
      }
    }
  }

  auto agg = [&](auto get, double& mean, double& stdev) {
    if (out.rows.empty()) return;
    double sum = 0.0;
    for (const auto& r : out.rows) sum += get(r);
    mean = sum / double(out.rows.size());
    if (out.rows.size() >= 2) {
      double sq = 0.0;
      for (const auto& r : out.rows) sq += (get(r) - mean) * (get(r) - mean);
      stdev = std::sqrt(sq / double(out.rows.size() - 1));
    }
  };
  agg([](const TemplateRow& r) { return r.baseline; }, out.baseline_mean,
      out.baseline_std);
  agg([](const TemplateRow& r) { return r.with_fv; }, out.fv_mean, out.fv_std);
  return out;
}

void run_pipeline(const std::string& run_dir, const ModelWeights& w,
                  const ModelConfig& cfg, const TaskRegistry& reg,
                  const ExperimentManifest& manifest) {
  namespace fs = std::filesystem;
  fs::create_directories(run_dir + "/tables");
  fs::create_directories(run_dir + "/logs");
  manifest.save(run_dir + "/manifest.json");
  const std::string hash = manifest.hash();
  const Template tmpl = Template::from_id(
      reg.vocab, manifest.template_ids.empty() ? 0 : manifest.template_ids[0]);

  auto means = collect_means(w, cfg, reg, manifest);

  // AIE uses only tasks the model performs above the majority-label
  // baseline on 10-shot prompts
  std::vector<std::string> aie_tasks;
  for (const auto& task_name : manifest.tasks) {
    const TaskSpec& task = reg.get(task_name);
    Rng rng(manifest.extraction_seed ^ fnv1a64(task_name) ^ 0xA1Eull);
    const int probe = 32;
    const TestSets sets =
        task_filtered_testset(reg, task, w, cfg, probe, rng, tmpl, manifest.n_shots);
    const double acc = double(sets.filtered.size()) / double(probe);
    const double baseline = 1.0 / double(task.output_set().size());
    if (acc > baseline) aie_tasks.push_back(task_name);
  }
  if (aie_tasks.empty()) {
    throw CapacityError("run_pipeline: no task beats the majority-label baseline");
  }

  const AieTable table = aie(w, cfg, reg, aie_tasks, means, manifest.n_corrupted,
                             manifest.extraction_seed, tmpl, manifest.n_shots);
  write_text_file(run_dir + "/tables/aie.csv", aie_to_csv(table, hash));
  write_text_file(run_dir + "/tables/aie.json", aie_to_json(table, hash));

  const auto heads = select_heads(table, manifest.head_count);
  ArtifactSet art;
  art.means = std::move(means);
  for (const auto& task_name : manifest.tasks) {
    art.fv.emplace(task_name, build_fv(art.means.at(task_name), heads));
  }

  const EvalReport report =
      evaluate(w, cfg, reg, art, manifest, {Context::ShuffledLabel, Context::ZeroShot},
               {Intervention::None, Intervention::Fv, Intervention::LayerAvg});
  write_text_file(run_dir + "/tables/eval.csv", eval_to_csv(report, hash));
  write_text_file(run_dir + "/tables/eval.json", eval_to_json(report, hash));
  write_text_file(run_dir + "/logs/records.jsonl", records_to_jsonl(report.records));
  std::string testsets;
  for (const auto& spec : report.testset) testsets += prompt_to_jsonl(reg.vocab, spec) + "\n";
  write_text_file(run_dir + "/logs/testsets.jsonl", testsets);
  write_report(run_dir);
}

}  // namespace fvlab
