#include "fvlab/report.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fvlab/version.hpp"
#include "json.hpp"

namespace fvlab {

namespace {

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

std::string fmt_g(double v) { return fmt(v, "%.9g"); }

nlohmann::json meta(const std::string& manifest_hash) {
  nlohmann::json j;
  j["manifest_hash"] = manifest_hash;
  j["version"] = kVersion;
  return j;
}

nlohmann::json mat_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < m.cols; ++j) row.push_back(m.at(i, j));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DomainError("cannot open '" + path + "' for writing");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw DomainError("short write to '" + path + "'");
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DomainError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string csv_meta_line(const std::string& manifest_hash) {
  return std::string("# fvlab ") + kVersion + " manifest=" + manifest_hash + "\n";
}

std::string aie_to_csv(const AieTable& t, const std::string& manifest_hash) {
  std::string out = csv_meta_line(manifest_hash);
  out += "layer,head,aie\n";
  for (int l = 0; l < t.aie.rows; ++l) {
    for (int j = 0; j < t.aie.cols; ++j) {
      out += std::to_string(l) + "," + std::to_string(j) + "," +
             fmt_g(t.aie.at(l, j)) + "\n";
    }
  }
  return out;
}

std::string aie_to_json(const AieTable& t, const std::string& manifest_hash) {
  nlohmann::json j;
  j["_meta"] = meta(manifest_hash);
  j["aie"] = mat_json(t.aie);
  nlohmann::json per_task;
  for (const auto& [name, m] : t.task_cie) per_task[name] = mat_json(m);
  j["task_cie"] = per_task;
  j["n_corrupted"] = t.n_corrupted;
  return j.dump(2) + "\n";
}

AieTable aie_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  AieTable t;
  const auto& rows = j.at("aie");
  const int L = static_cast<int>(rows.size());
  const int J = L > 0 ? static_cast<int>(rows[0].size()) : 0;
  t.aie = Matrix(L, J);
  for (int l = 0; l < L; ++l) {
    for (int h = 0; h < J; ++h) t.aie.at(l, h) = rows[l][h].get<float>();
  }
  if (j.contains("task_cie")) {
    for (const auto& [name, m] : j.at("task_cie").items()) {
      Matrix slice(L, J);
      for (int l = 0; l < L; ++l) {
        for (int h = 0; h < J; ++h) slice.at(l, h) = m[l][h].get<float>();
      }
      t.task_cie.emplace(name, std::move(slice));
    }
  }
  if (j.contains("n_corrupted")) {
    for (const auto& [name, n] : j.at("n_corrupted").items()) {
      t.n_corrupted.emplace(name, n.get<int>());
    }
  }
  return t;
}

namespace {

nlohmann::json cell_json(const EvalCell& c) {
  nlohmann::json j;
  j["task"] = c.task;
  j["context"] = context_name(c.context);
  j["intervention"] = intervention_name(c.intervention);
  j["layer"] = c.layer;
  j["filtered"] = c.filtered;
  j["acc_mean"] = c.acc_mean;
  if (c.has_std) j["acc_std"] = c.acc_std;
  j["n_seeds"] = c.n_seeds;
  j["n_prompts"] = c.n_prompts;
  j["empty_testset"] = c.empty_testset;
  return j;
}

std::string cells_csv(const std::vector<EvalCell>& cells,
                      const std::string& manifest_hash) {
  std::string out = csv_meta_line(manifest_hash);
  out += "task,context,intervention,layer,filtered,acc_mean,acc_std,n_seeds,n_prompts,"
         "empty_testset\n";
  for (const auto& c : cells) {
    out += c.task + "," + context_name(c.context) + "," +
           intervention_name(c.intervention) + "," + std::to_string(c.layer) + "," +
           (c.filtered ? "true" : "false") + "," + fmt(c.acc_mean) + "," +
           (c.has_std ? fmt(c.acc_std) : std::string("")) + "," +
           std::to_string(c.n_seeds) + "," + std::to_string(c.n_prompts) + "," +
           (c.empty_testset ? "true" : "false") + "\n";
  }
  return out;
}

}  // namespace

std::string eval_to_csv(const EvalReport& r, const std::string& manifest_hash) {
  return cells_csv(r.cells, manifest_hash);
}

std::string eval_to_json(const EvalReport& r, const std::string& manifest_hash) {
  nlohmann::json j;
  j["_meta"] = meta(manifest_hash);
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) cells.push_back(cell_json(c));
  j["cells"] = cells;
  return j.dump(2) + "\n";
}

std::string records_to_jsonl(const std::vector<PromptRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::json j;
    j["prompt_id"] = r.prompt_id;
    j["task"] = r.task;
    j["context"] = context_name(r.context);
    j["intervention"] = intervention_name(r.intervention);
    j["layer"] = r.layer;
    j["predicted"] = r.predicted;
    j["target"] = r.target;
    j["correct"] = r.correct;
    j["seed"] = r.seed;
    j["filtered"] = r.filtered;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<PromptRecord> records_from_jsonl(const std::string& text) {
  std::vector<PromptRecord> out;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    PromptRecord r;
    r.prompt_id = j.at("prompt_id").get<int>();
    r.task = j.at("task").get<std::string>();
    r.context = context_from_name(j.at("context").get<std::string>());
    r.intervention = intervention_from_name(j.at("intervention").get<std::string>());
    r.layer = j.at("layer").get<int>();
    r.predicted = j.at("predicted").get<int>();
    r.target = j.at("target").get<int>();
    r.correct = j.at("correct").get<bool>();
    r.seed = j.at("seed").get<uint64_t>();
    r.filtered = j.at("filtered").get<bool>();
    out.push_back(r);
  }
  return out;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows,
                         const std::string& manifest_hash) {
  std::string out = csv_meta_line(manifest_hash);
  out += "task,layer,accuracy,n\n";
  for (const auto& r : rows) {
    out += r.task + "," + std::to_string(r.layer) + "," + fmt(r.accuracy) + "," +
           std::to_string(r.n) + "\n";
  }
  return out;
}

std::string sweep_to_json(const std::vector<SweepRow>& rows,
                          const std::string& manifest_hash) {
  nlohmann::json j;
  j["_meta"] = meta(manifest_hash);
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row;
    row["task"] = r.task;
    row["layer"] = r.layer;
    row["accuracy"] = r.accuracy;
    row["n"] = r.n;
    arr.push_back(row);
  }
  j["sweep"] = arr;
  return j.dump(2) + "\n";
}

std::string history_to_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "step,loss,task,acc\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + fmt_g(r.loss) + "," + r.task + "," +
           fmt(r.acc) + "\n";
  }
  return out;
}

std::string decoded_to_json(const DecodedDistribution& d, const Vocab& v,
                            const std::string& manifest_hash) {
  nlohmann::json j;
  j["_meta"] = meta(manifest_hash);
  j["task"] = d.task;
  j["k"] = d.k;
  nlohmann::json top = nlohmann::json::array();
  for (int id : d.topk_ids) {
    nlohmann::json entry;
    entry["token"] = v.name(id);
    entry["p"] = d.full[id];
    entry["p_renormalized"] = d.topk[id];
    top.push_back(entry);
  }
  j["top"] = top;
  return j.dump(2) + "\n";
}

std::string decoded_to_csv(const DecodedDistribution& d, const Vocab& v,
                           const std::string& manifest_hash) {
  std::string out = csv_meta_line(manifest_hash);
  out += "rank,token,p,p_renormalized\n";
  for (size_t i = 0; i < d.topk_ids.size(); ++i) {
    const int id = d.topk_ids[i];
    out += std::to_string(i) + "," + v.name(id) + "," + fmt_g(d.full[id]) + "," +
           fmt_g(d.topk[id]) + "\n";
  }
  return out;
}

std::string delta_logprob_to_csv(const std::vector<DeltaLogprob>& deltas, const Vocab& v,
                                 const std::string& manifest_hash) {
  std::string out = csv_meta_line(manifest_hash);
  out += "rank,token,delta_logprob,clamped\n";
  for (size_t i = 0; i < deltas.size(); ++i) {
    out += std::to_string(i) + "," + v.name(deltas[i].token) + "," +
           fmt_g(deltas[i].delta) + "," + (deltas[i].clamped ? "true" : "false") + "\n";
  }
  return out;
}

std::string delta_logprob_to_json(const std::vector<DeltaLogprob>& deltas,
                                  const Vocab& v, const std::string& manifest_hash) {
  nlohmann::json j;
  j["_meta"] = meta(manifest_hash);
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : deltas) {
    nlohmann::json row;
    row["token"] = v.name(e.token);
    row["delta_logprob"] = e.delta;
    row["clamped"] = e.clamped;
    arr.push_back(row);
  }
  j["deltas"] = arr;
  return j.dump(2) + "\n";
}

std::string template_rows_to_csv(const TemplateRobustness& t,
                                 const std::string& manifest_hash) {
  std::string out = csv_meta_line(manifest_hash);
  out += "template_id,task,context,baseline,with_fv,n\n";
  for (const auto& r : t.rows) {
    out += std::to_string(r.template_id) + "," + r.task + "," +
           context_name(r.context) + "," + fmt(r.baseline) + "," + fmt(r.with_fv) +
           "," + std::to_string(r.n) + "\n";
  }
  out += "# aggregate baseline=" + fmt(t.baseline_mean) + "+-" + fmt(t.baseline_std) +
         " fv=" + fmt(t.fv_mean) + "+-" + fmt(t.fv_std) + "\n";
  return out;
}

std::string prefix_scores_to_csv(
    const std::vector<std::tuple<HeadId, double, double>>& head_aie_prefix,
    const std::string& manifest_hash) {
  std::string out = csv_meta_line(manifest_hash);
  out += "layer,head,aie,prefix_score\n";
  for (const auto& [h, aie_v, score] : head_aie_prefix) {
    out += std::to_string(h.layer) + "," + std::to_string(h.head) + "," +
           fmt_g(aie_v) + "," + fmt(score) + "\n";
  }
  return out;
}

void write_report(const std::string& run_dir) {
  const ExperimentManifest manifest =
      ExperimentManifest::load(run_dir + "/manifest.json");
  const auto records = records_from_jsonl(read_text_file(run_dir + "/logs/records.jsonl"));
  EvalReport report;
  report.records = records;
  report.cells = aggregate_records(records, manifest.unfiltered);
  const std::string hash = manifest.hash();
  write_text_file(run_dir + "/report.csv", cells_csv(report.cells, hash));

  nlohmann::json j;
  j["_meta"] = meta(hash);
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : report.cells) cells.push_back(cell_json(c));
  j["cells"] = cells;
  j["n_records"] = records.size();
  write_text_file(run_dir + "/report.json", j.dump(2) + "\n");
}

}  // namespace fvlab
