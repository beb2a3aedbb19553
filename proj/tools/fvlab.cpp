// fvlab command line: train -> aie -> extract-fv -> eval / sweep / decode /
// reconstruct / compose / prefix-score -> report. Every command reads and
// writes only paths under --out (plus explicitly named inputs), honors
// --seed and --config, and exits nonzero with a structured error on failure.

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "fvlab/analysis.hpp"
#include "fvlab/checkpoint.hpp"
#include "fvlab/eval.hpp"
#include "fvlab/parallel.hpp"
#include "fvlab/report.hpp"
#include "fvlab/trainer.hpp"
#include "fvlab/version.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace fvlab;

namespace {

nlohmann::json load_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  return nlohmann::json::parse(read_text_file(path));
}

ModelConfig model_config_from(const nlohmann::json& cfg_json, const Vocab& vocab) {
  ModelConfig cfg;
  cfg.vocab_size = static_cast<uint32_t>(vocab.size());
  cfg.d_model = 128;
  cfg.n_layers = 4;
  cfg.n_heads = 4;
  cfg.d_head = 32;
  cfg.max_seq = 128;
  if (cfg_json.contains("model")) {
    const auto& m = cfg_json["model"];
    if (m.contains("vocab_size")) cfg.vocab_size = m["vocab_size"].get<uint32_t>();
    if (m.contains("d_model")) cfg.d_model = m["d_model"].get<uint32_t>();
    if (m.contains("n_layers")) cfg.n_layers = m["n_layers"].get<uint32_t>();
    if (m.contains("n_heads")) cfg.n_heads = m["n_heads"].get<uint32_t>();
    if (m.contains("d_head")) cfg.d_head = m["d_head"].get<uint32_t>();
    if (m.contains("max_seq")) cfg.max_seq = m["max_seq"].get<uint32_t>();
    if (m.contains("layernorm_epsilon")) {
      cfg.layernorm_epsilon = m["layernorm_epsilon"].get<float>();
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig train_config_from(const nlohmann::json& cfg_json, uint64_t seed) {
  TrainConfig tc;
  tc.steps = 4200;
  tc.batch_size = 32;
  tc.learning_rate = 1.5e-3f;
  tc.warmup_steps = 150;
  tc.eval_every = 300;
  tc.seed = seed;
  if (cfg_json.contains("train")) {
    const auto& t = cfg_json["train"];
    if (t.contains("steps")) tc.steps = t["steps"].get<int>();
    if (t.contains("batch_size")) tc.batch_size = t["batch_size"].get<int>();
    if (t.contains("learning_rate")) tc.learning_rate = t["learning_rate"].get<float>();
    if (t.contains("schedule")) {
      tc.schedule = t["schedule"].get<std::string>() == "constant"
                        ? TrainConfig::Schedule::Constant
                        : TrainConfig::Schedule::Cosine;
    }
    if (t.contains("beta1")) tc.beta1 = t["beta1"].get<float>();
    if (t.contains("beta2")) tc.beta2 = t["beta2"].get<float>();
    if (t.contains("grad_clip")) tc.grad_clip = t["grad_clip"].get<float>();
    if (t.contains("eval_every")) tc.eval_every = t["eval_every"].get<int>();
    if (t.contains("eval_prompts")) tc.eval_prompts = t["eval_prompts"].get<int>();
    if (t.contains("warmup_steps")) tc.warmup_steps = t["warmup_steps"].get<int>();
  }
  return tc;
}

std::vector<std::string> default_tasks() {
  return {"succ", "pred", "pair", "copy", "first-copy", "last-copy", "first-pair",
          "last-pair"};
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  for (const auto& part : split_list(s)) out.push_back(std::stoi(part));
  return out;
}

std::vector<uint64_t> split_seeds(const std::string& s) {
  std::vector<uint64_t> out;
  for (const auto& part : split_list(s)) out.push_back(std::stoull(part));
  return out;
}

void ensure_run_dirs(const std::string& out) {
  fs::create_directories(out + "/checkpoints");
  fs::create_directories(out + "/tables");
  fs::create_directories(out + "/logs");
}

ArtifactSet load_artifacts(const std::string& dir,
                           const std::vector<std::string>& tasks) {
  ArtifactSet art;
  for (const auto& t : tasks) {
    const std::string fv_path = dir + "/fv_" + t + ".fvlb";
    const std::string means_path = dir + "/means_" + t + ".fvlb";
    if (fs::exists(fv_path)) art.fv.emplace(t, load_fv(fv_path));
    if (fs::exists(means_path)) art.means.emplace(t, load_means(means_path));
    const std::string comp = dir + "/fv_" + t + "_composed.fvlb";
    if (fs::exists(comp)) art.composed.emplace(t, load_fv(comp));
    const std::string rec = dir + "/fv_" + t + "_reconstructed.fvlb";
    if (fs::exists(rec)) art.reconstructed.emplace(t, load_fv(rec));
  }
  return art;
}

std::pair<ModelWeights, ModelConfig> load_model(const std::string& path) {
  if (!fs::exists(path)) {
    throw DomainError("model checkpoint not found: " + path);
  }
  return load_checkpoint(path);
}

struct Shared {
  std::string config;
  std::string out = "run";
  uint64_t seed = 1;
};

void add_shared(CLI::App* cmd, Shared& sh) {
  cmd->add_option("--config", sh.config, "JSON config file");
  cmd->add_option("--out", sh.out, "run directory");
  cmd->add_option("--seed", sh.seed, "base RNG seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"function-vector laboratory"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  // ---- train ----
  Shared tr_sh;
  std::string tr_tasks;
  auto* cmd_train = app.add_subcommand("train", "train the toy model on ICL prompts");
  add_shared(cmd_train, tr_sh);
  cmd_train->add_option("--tasks", tr_tasks, "comma-separated task names");

  // ---- aie ----
  Shared aie_sh;
  std::string aie_model, aie_tasks;
  int aie_clean = 100, aie_corrupted = 25, aie_shots = 10;
  auto* cmd_aie = app.add_subcommand("aie", "mean activations and the AIE table");
  add_shared(cmd_aie, aie_sh);
  cmd_aie->add_option("--model", aie_model, "model checkpoint");
  cmd_aie->add_option("--tasks", aie_tasks, "comma-separated task names");
  cmd_aie->add_option("--clean", aie_clean, "clean prompts per task");
  cmd_aie->add_option("--corrupted", aie_corrupted, "corrupted prompts per task");
  cmd_aie->add_option("--shots", aie_shots, "shots per prompt");

  // ---- extract-fv ----
  Shared ex_sh;
  std::string ex_model, ex_tasks, ex_aie;
  int ex_heads = 10;
  auto* cmd_extract = app.add_subcommand("extract-fv", "build function vectors");
  add_shared(cmd_extract, ex_sh);
  cmd_extract->add_option("--model", ex_model, "model checkpoint");
  cmd_extract->add_option("--tasks", ex_tasks, "comma-separated task names");
  cmd_extract->add_option("--aie", ex_aie, "aie.json path");
  cmd_extract->add_option("--heads", ex_heads, "head count k");

  // ---- eval ----
  Shared ev_sh;
  std::string ev_model, ev_tasks, ev_context = "zero-shot", ev_intervention = "none";
  std::string ev_layers, ev_seeds, ev_templates, ev_artifacts;
  int ev_shots = 10, ev_testset = 50;
  bool ev_unfiltered = false;
  auto* cmd_eval = app.add_subcommand("eval", "accuracy grid evaluation");
  add_shared(cmd_eval, ev_sh);
  cmd_eval->add_option("--model", ev_model, "model checkpoint");
  cmd_eval->add_option("--tasks", ev_tasks, "comma-separated task names");
  cmd_eval->add_option("--context", ev_context,
                       "comma list of ten-shot|shuffled|zero-shot");
  cmd_eval->add_option("--intervention", ev_intervention,
                       "comma list of none|fv|layer-avg|composed|reconstructed");
  cmd_eval->add_option("--layers", ev_layers, "comma list of injection layers");
  cmd_eval->add_option("--seeds", ev_seeds, "comma list of seeds (default 1..5)");
  cmd_eval->add_option("--shots", ev_shots, "shots for the ten-shot context");
  cmd_eval->add_option("--testset", ev_testset, "query items per task per seed");
  cmd_eval->add_option("--templates", ev_templates,
                       "template ids; more than one runs the robustness table");
  cmd_eval->add_option("--artifacts", ev_artifacts,
                       "directory with fv_/means_ files (default OUT/checkpoints)");
  cmd_eval->add_flag("--unfiltered", ev_unfiltered, "also report unfiltered rows");

  // ---- sweep ----
  Shared sw_sh;
  std::string sw_model, sw_fv, sw_layers, sw_context = "zero-shot";
  int sw_testset = 50, sw_shots = 10;
  auto* cmd_sweep = app.add_subcommand("sweep", "accuracy per injection layer");
  add_shared(cmd_sweep, sw_sh);
  cmd_sweep->add_option("--model", sw_model, "model checkpoint");
  cmd_sweep->add_option("--fv", sw_fv, "function-vector artifact");
  cmd_sweep->add_option("--layers", sw_layers, "comma list (default all layers)");
  cmd_sweep->add_option("--context", sw_context, "ten-shot|shuffled|zero-shot");
  cmd_sweep->add_option("--testset", sw_testset, "prompts");
  cmd_sweep->add_option("--shots", sw_shots, "shots for ten-shot/shuffled contexts");

  // ---- decode ----
  Shared de_sh;
  std::string de_model, de_fv, de_dlp_query;
  int de_top = 10, de_dlp_layer = -1;
  auto* cmd_decode = app.add_subcommand("decode", "logit-lens decode of an FV");
  add_shared(cmd_decode, de_sh);
  cmd_decode->add_option("--model", de_model, "model checkpoint");
  cmd_decode->add_option("--fv", de_fv, "function-vector artifact");
  cmd_decode->add_option("--top", de_top, "top-k size");
  cmd_decode->add_option("--dlp-query", de_dlp_query,
                         "also rank log-probability deltas for this zero-shot query");
  cmd_decode->add_option("--dlp-layer", de_dlp_layer,
                         "injection layer for the delta ranking (default L/3)");

  // ---- reconstruct ----
  Shared re_sh;
  std::string re_model, re_fv;
  int re_topk = 0, re_steps = 2000;
  float re_step_size = 0.05f;
  auto* cmd_rec = app.add_subcommand("reconstruct",
                                     "rebuild an FV from its decoded distribution");
  add_shared(cmd_rec, re_sh);
  cmd_rec->add_option("--model", re_model, "model checkpoint");
  cmd_rec->add_option("--fv", re_fv, "function-vector artifact");
  cmd_rec->add_option("--topk", re_topk, "target restricted to top-k (0 = full vocab)");
  cmd_rec->add_option("--steps", re_steps, "gradient steps");
  cmd_rec->add_option("--step-size", re_step_size, "gradient step size");

  // ---- compose ----
  Shared co_sh;
  std::string co_ad, co_bc, co_ac, co_task;
  auto* cmd_comp = app.add_subcommand("compose", "v_ad + v_bc - v_ac");
  add_shared(cmd_comp, co_sh);
  cmd_comp->add_option("--ad", co_ad, "fv artifact for the A->D task")->required();
  cmd_comp->add_option("--bc", co_bc, "fv artifact for the B->C task")->required();
  cmd_comp->add_option("--ac", co_ac, "fv artifact for the A->C task")->required();
  cmd_comp->add_option("--task", co_task, "name of the composed task")->required();

  // ---- prefix-score ----
  Shared pf_sh;
  std::string pf_model, pf_aie;
  int pf_sequences = 50, pf_length = 24;
  auto* cmd_prefix = app.add_subcommand("prefix-score",
                                        "prefix-matching score per head");
  add_shared(cmd_prefix, pf_sh);
  cmd_prefix->add_option("--model", pf_model, "model checkpoint");
  cmd_prefix->add_option("--aie", pf_aie, "aie.json to pair scores with");
  cmd_prefix->add_option("--sequences", pf_sequences, "random sequences");
  cmd_prefix->add_option("--length", pf_length, "sequence length");

  // ---- report ----
  std::string rp_run = "run";
  auto* cmd_report = app.add_subcommand("report", "recompute summaries from logs");
  cmd_report->add_option("--run", rp_run, "run directory");

  CLI11_PARSE(app, argc, argv);

  try {
    const TaskRegistry reg = TaskRegistry::default_registry();

    if (cmd_train->parsed()) {
      const auto cfg_json = load_config(tr_sh.config);
      const ModelConfig cfg = model_config_from(cfg_json, reg.vocab);
      TrainConfig tc = train_config_from(cfg_json, tr_sh.seed);
      const auto tasks = tr_tasks.empty() ? default_tasks() : split_list(tr_tasks);
      std::vector<int> tmpl_ids(Template::count(reg.vocab));
      for (size_t i = 0; i < tmpl_ids.size(); ++i) tmpl_ids[i] = int(i);
      int shot_min = 0, shot_max = 10;
      if (cfg_json.contains("train")) {
        const auto& t = cfg_json["train"];
        if (t.contains("shot_min")) shot_min = t["shot_min"].get<int>();
        if (t.contains("shot_max")) shot_max = t["shot_max"].get<int>();
        if (t.contains("template_ids")) {
          tmpl_ids = t["template_ids"].get<std::vector<int>>();
        }
      }
      ensure_run_dirs(tr_sh.out);
      CorpusGenerator corpus(reg, tasks, shot_min, shot_max, tmpl_ids, tc.seed);
      const auto res = train(random_weights(cfg, tc.seed), cfg, corpus, tc);
      const std::string ckpt = tr_sh.out + "/checkpoints/model.fvlb";
      save_checkpoint(res.weights, cfg, ckpt);
      write_text_file(tr_sh.out + "/tables/train_history.csv",
                      history_to_csv(res.history));
      ExperimentManifest manifest;
      manifest.checkpoint = ckpt;
      manifest.tasks = tasks;
      manifest.save(tr_sh.out + "/manifest.json");
      std::cout << "trained " << tc.steps << " steps; checkpoint at " << ckpt << "\n";
      for (auto it = res.history.end() - std::min<size_t>(res.history.size(),
                                                          tasks.size());
           it != res.history.end(); ++it) {
        std::cout << "  " << it->task << " held-out 10-shot acc " << it->acc << "\n";
      }
      return 0;
    }

    if (cmd_aie->parsed()) {
      ensure_run_dirs(aie_sh.out);
      if (aie_model.empty()) aie_model = aie_sh.out + "/checkpoints/model.fvlb";
      const auto [w, cfg] = load_model(aie_model);
      ExperimentManifest manifest;
      manifest.checkpoint = aie_model;
      manifest.tasks = aie_tasks.empty() ? default_tasks() : split_list(aie_tasks);
      manifest.n_clean = aie_clean;
      manifest.n_corrupted = aie_corrupted;
      manifest.n_shots = aie_shots;
      manifest.extraction_seed = aie_sh.seed;
      manifest.save(aie_sh.out + "/manifest.json");
      const std::string hash = manifest.hash();

      const auto means = collect_means(w, cfg, reg, manifest);
      for (const auto& [task, m] : means) {
        save_means(m, aie_sh.out + "/checkpoints/means_" + task + ".fvlb");
      }
      // majority-label gate
      std::vector<std::string> gated;
      const Template tmpl = Template::from_id(reg.vocab, 0);
      for (const auto& task_name : manifest.tasks) {
        Rng rng(manifest.extraction_seed ^ 0xA1Eull);
        const auto sets = task_filtered_testset(reg, reg.get(task_name), w, cfg, 32,
                                                rng, tmpl, manifest.n_shots);
        const double baseline = 1.0 / double(reg.get(task_name).output_set().size());
        if (double(sets.filtered.size()) / 32.0 > baseline) {
          gated.push_back(task_name);
        } else {
          std::cerr << "note: task " << task_name
                    << " does not beat the majority-label baseline; excluded from AIE\n";
        }
      }
      const auto table = aie(w, cfg, reg, gated, means, manifest.n_corrupted,
                             manifest.extraction_seed, tmpl, manifest.n_shots);
      write_text_file(aie_sh.out + "/tables/aie.csv", aie_to_csv(table, hash));
      write_text_file(aie_sh.out + "/tables/aie.json", aie_to_json(table, hash));
      std::cout << "aie table over " << gated.size() << " tasks -> " << aie_sh.out
                << "/tables/aie.csv\n";
      return 0;
    }

    if (cmd_extract->parsed()) {
      ensure_run_dirs(ex_sh.out);
      if (ex_model.empty()) ex_model = ex_sh.out + "/checkpoints/model.fvlb";
      if (ex_aie.empty()) ex_aie = ex_sh.out + "/tables/aie.json";
      const auto [w, cfg] = load_model(ex_model);
      (void)w;
      const auto table = aie_from_json(read_text_file(ex_aie));
      const auto heads = select_heads(table, ex_heads);
      const auto tasks = ex_tasks.empty() ? default_tasks() : split_list(ex_tasks);
      for (const auto& task : tasks) {
        const std::string means_path = ex_sh.out + "/checkpoints/means_" + task + ".fvlb";
        if (!fs::exists(means_path)) {
          throw DomainError("means artifact not found: " + means_path);
        }
        const auto means = load_means(means_path);
        const auto fv = build_fv(means, heads);
        save_fv(fv, ex_sh.out + "/checkpoints/fv_" + task + ".fvlb");
      }
      std::cout << "extracted " << tasks.size() << " function vectors using "
                << heads.size() << " heads\n";
      return 0;
    }

    if (cmd_eval->parsed()) {
      ensure_run_dirs(ev_sh.out);
      if (ev_model.empty()) ev_model = ev_sh.out + "/checkpoints/model.fvlb";
      const auto [w, cfg] = load_model(ev_model);
      ExperimentManifest manifest;
      manifest.checkpoint = ev_model;
      manifest.tasks = ev_tasks.empty() ? default_tasks() : split_list(ev_tasks);
      manifest.n_shots = ev_shots;
      manifest.testset_size = ev_testset;
      manifest.unfiltered = ev_unfiltered;
      if (!ev_seeds.empty()) manifest.seeds = split_seeds(ev_seeds);
      if (!ev_layers.empty()) manifest.layers = split_ints(ev_layers);
      manifest.extraction_seed = ev_sh.seed;
      manifest.save(ev_sh.out + "/manifest.json");
      const std::string hash = manifest.hash();

      const std::string art_dir =
          ev_artifacts.empty() ? ev_sh.out + "/checkpoints" : ev_artifacts;
      const ArtifactSet art = load_artifacts(art_dir, manifest.tasks);

      std::vector<Context> contexts;
      for (const auto& c : split_list(ev_context)) contexts.push_back(context_from_name(c));
      std::vector<Intervention> ivs;
      for (const auto& s : split_list(ev_intervention)) {
        ivs.push_back(intervention_from_name(s));
      }

      if (!ev_templates.empty() && split_ints(ev_templates).size() > 1) {
        const auto rob = template_robustness(w, cfg, reg, art, manifest,
                                             split_ints(ev_templates), contexts);
        write_text_file(ev_sh.out + "/tables/template_robustness.csv",
                        template_rows_to_csv(rob, hash));
        std::cout << "template robustness: baseline " << rob.baseline_mean << "+-"
                  << rob.baseline_std << " fv " << rob.fv_mean << "+-" << rob.fv_std
                  << "\n";
        return 0;
      }

      const auto report = evaluate(w, cfg, reg, art, manifest, contexts, ivs);
      write_text_file(ev_sh.out + "/tables/eval.csv", eval_to_csv(report, hash));
      write_text_file(ev_sh.out + "/tables/eval.json", eval_to_json(report, hash));
      write_text_file(ev_sh.out + "/logs/records.jsonl",
                      records_to_jsonl(report.records));
      std::string testsets;
      for (const auto& spec : report.testset) {
        testsets += prompt_to_jsonl(reg.vocab, spec) + "\n";
      }
      write_text_file(ev_sh.out + "/logs/testsets.jsonl", testsets);
      write_report(ev_sh.out);
      std::cout << "eval grid with " << report.cells.size() << " cells -> "
                << ev_sh.out << "/tables/eval.csv\n";
      return 0;
    }

    if (cmd_sweep->parsed()) {
      ensure_run_dirs(sw_sh.out);
      if (sw_model.empty()) sw_model = sw_sh.out + "/checkpoints/model.fvlb";
      const auto [w, cfg] = load_model(sw_model);
      const auto fv = load_fv(sw_fv);
      std::vector<int> layers = sw_layers.empty() ? std::vector<int>{}
                                                  : split_ints(sw_layers);
      if (layers.empty()) {
        for (uint32_t l = 0; l < cfg.n_layers; ++l) layers.push_back(int(l));
      }
      ExperimentManifest manifest;
      manifest.checkpoint = sw_model;
      manifest.tasks = {fv.task};
      manifest.testset_size = sw_testset;
      manifest.n_shots = sw_shots;
      const std::string hash = manifest.hash();

      Rng rng(sw_sh.seed);
      const Context ctx = context_from_name(sw_context);
      std::vector<RenderedPrompt> testset;
      const auto& task = reg.get(fv.task);
      for (int i = 0; i < sw_testset; ++i) {
        const int shots = ctx == Context::ZeroShot ? 0 : sw_shots;
        testset.push_back(build_prompt(reg, task, shots, rng, Template{},
                                       ctx == Context::ShuffledLabel,
                                       QueryPool::Heldout));
      }
      const auto rows = layer_sweep(w, cfg, testset, fv, layers);
      write_text_file(sw_sh.out + "/tables/sweep_" + fv.task + ".csv",
                      sweep_to_csv(rows, hash));
      write_text_file(sw_sh.out + "/tables/sweep_" + fv.task + ".json",
                      sweep_to_json(rows, hash));
      for (const auto& r : rows) {
        std::cout << "layer " << r.layer << " acc " << r.accuracy << "\n";
      }
      return 0;
    }

    if (cmd_decode->parsed()) {
      ensure_run_dirs(de_sh.out);
      if (de_model.empty()) de_model = de_sh.out + "/checkpoints/model.fvlb";
      const auto [w, cfg] = load_model(de_model);
      const auto fv = load_fv(de_fv);
      const auto d = decode_fv(w, cfg, fv, de_top);
      ExperimentManifest manifest;
      manifest.checkpoint = de_model;
      manifest.tasks = {fv.task};
      const std::string hash = manifest.hash();
      write_text_file(de_sh.out + "/tables/decoded_" + fv.task + ".json",
                      decoded_to_json(d, reg.vocab, hash));
      write_text_file(de_sh.out + "/tables/decoded_" + fv.task + ".csv",
                      decoded_to_csv(d, reg.vocab, hash));
      for (size_t i = 0; i < d.topk_ids.size(); ++i) {
        std::cout << reg.vocab.name(d.topk_ids[i]) << " " << d.full[d.topk_ids[i]]
                  << "\n";
      }
      if (!de_dlp_query.empty()) {
        const auto& task = reg.get(fv.task);
        PromptSpec ps;
        ps.task = fv.task;
        ps.query = {reg.vocab.id(de_dlp_query)};
        ps.target = task.target(ps.query);
        const auto rendered = render(reg.vocab, ps);
        const int layer =
            de_dlp_layer < 0 ? default_injection_layer(cfg) : de_dlp_layer;
        const auto deltas =
            delta_logprob(w, cfg, rendered.tokens, fv, layer, task.output_set());
        write_text_file(de_sh.out + "/tables/dlp_" + fv.task + ".csv",
                        delta_logprob_to_csv(deltas, reg.vocab, hash));
        write_text_file(de_sh.out + "/tables/dlp_" + fv.task + ".json",
                        delta_logprob_to_json(deltas, reg.vocab, hash));
        std::cout << "top promoted: " << reg.vocab.name(deltas[0].token) << " (+"
                  << deltas[0].delta << ")\n";
      }
      return 0;
    }

    if (cmd_rec->parsed()) {
      ensure_run_dirs(re_sh.out);
      if (re_model.empty()) re_model = re_sh.out + "/checkpoints/model.fvlb";
      const auto [w, cfg] = load_model(re_model);
      const auto fv = load_fv(re_fv);
      const int k = re_topk <= 0 ? int(cfg.vocab_size) : re_topk;
      const auto dec = decode_fv(w, cfg, fv, k);
      const auto res = reconstruct_fv(w, cfg, dec.topk,
                                      reconstruction_init(w, cfg, dec.topk), re_steps,
                                      re_step_size, fv.task);
      save_fv(res.v_hat,
              re_sh.out + "/checkpoints/fv_" + fv.task + "_reconstructed.fvlb");
      ExperimentManifest manifest;
      manifest.checkpoint = re_model;
      manifest.tasks = {fv.task};
      nlohmann::json j;
      j["_meta"] = {{"manifest_hash", manifest.hash()}, {"version", kVersion}};
      j["task"] = fv.task;
      j["k"] = k;
      j["final_ce"] = res.final_ce;
      j["kl"] = res.kl;
      j["iterations"] = res.iterations;
      write_text_file(re_sh.out + "/tables/reconstruction_" + fv.task + ".json",
                      j.dump(2) + "\n");
      std::cout << "reconstructed " << fv.task << " k=" << k << " kl=" << res.kl
                << "\n";
      return 0;
    }

    if (cmd_comp->parsed()) {
      ensure_run_dirs(co_sh.out);
      const auto ad = load_fv(co_ad);
      const auto bc = load_fv(co_bc);
      const auto ac = load_fv(co_ac);
      const auto composed = compose_fv(ad, bc, ac, co_task);
      const std::string path =
          co_sh.out + "/checkpoints/fv_" + co_task + "_composed.fvlb";
      save_fv(composed, path);
      std::cout << "composed fv for " << co_task << " -> " << path << "\n";
      return 0;
    }

    if (cmd_prefix->parsed()) {
      ensure_run_dirs(pf_sh.out);
      if (pf_model.empty()) pf_model = pf_sh.out + "/checkpoints/model.fvlb";
      const auto [w, cfg] = load_model(pf_model);
      AieTable table;
      if (!pf_aie.empty()) {
        table = aie_from_json(read_text_file(pf_aie));
      } else if (fs::exists(pf_sh.out + "/tables/aie.json")) {
        table = aie_from_json(read_text_file(pf_sh.out + "/tables/aie.json"));
      }
      std::vector<int> pool;
      for (int i = 0; i < reg.vocab.n_base; ++i) pool.push_back(i);
      std::vector<std::tuple<HeadId, double, double>> rows;
      for (uint32_t l = 0; l < cfg.n_layers; ++l) {
        for (uint32_t j = 0; j < cfg.n_heads; ++j) {
          Rng rng(pf_sh.seed ^ (uint64_t(l) << 32) ^ j);
          const double score = prefix_matching_score(w, cfg, {int(l), int(j)},
                                                     pf_sequences, pf_length, rng, pool);
          const double aie_v =
              table.aie.rows > 0 ? double(table.aie.at(int(l), int(j))) : 0.0;
          rows.emplace_back(HeadId{int(l), int(j)}, aie_v, score);
        }
      }
      ExperimentManifest manifest;
      manifest.checkpoint = pf_model;
      write_text_file(pf_sh.out + "/tables/prefix_scores.csv",
                      prefix_scores_to_csv(rows, manifest.hash()));
      std::cout << "prefix scores for " << rows.size() << " heads -> " << pf_sh.out
                << "/tables/prefix_scores.csv\n";
      return 0;
    }

    if (cmd_report->parsed()) {
      write_report(rp_run);
      std::cout << "report -> " << rp_run << "/report.json\n";
      return 0;
    }
  } catch (const std::exception& e) {
    nlohmann::json err;
    err["error"] = e.what();
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 0;
}
