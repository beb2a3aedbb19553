// Artifact writers. Every file embeds the manifest hash and tool version:
// CSVs carry a leading `# fvlab <version> manifest=<hash>` comment before
// the header row, JSON documents carry a `_meta` object. JSON keys are
// sorted; all text is UTF-8.

#pragma once

#include <string>
#include <vector>

#include "fvlab/analysis.hpp"
#include "fvlab/eval.hpp"
#include "fvlab/intervene.hpp"
#include "fvlab/mediation.hpp"
#include "fvlab/trainer.hpp"

namespace fvlab {

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

std::string csv_meta_line(const std::string& manifest_hash);

std::string aie_to_csv(const AieTable& t, const std::string& manifest_hash);
std::string aie_to_json(const AieTable& t, const std::string& manifest_hash);
AieTable aie_from_json(const std::string& text);

std::string eval_to_csv(const EvalReport& r, const std::string& manifest_hash);
std::string eval_to_json(const EvalReport& r, const std::string& manifest_hash);

std::string records_to_jsonl(const std::vector<PromptRecord>& records);
std::vector<PromptRecord> records_from_jsonl(const std::string& text);

std::string sweep_to_csv(const std::vector<SweepRow>& rows,
                         const std::string& manifest_hash);
std::string sweep_to_json(const std::vector<SweepRow>& rows,
                          const std::string& manifest_hash);

std::string history_to_csv(const std::vector<HistoryRow>& rows);

std::string decoded_to_json(const DecodedDistribution& d, const Vocab& v,
                            const std::string& manifest_hash);
std::string decoded_to_csv(const DecodedDistribution& d, const Vocab& v,
                           const std::string& manifest_hash);

std::string delta_logprob_to_csv(const std::vector<DeltaLogprob>& deltas, const Vocab& v,
                                 const std::string& manifest_hash);
std::string delta_logprob_to_json(const std::vector<DeltaLogprob>& deltas,
                                  const Vocab& v, const std::string& manifest_hash);
std::string template_rows_to_csv(const TemplateRobustness& t,
                                 const std::string& manifest_hash);

std::string prefix_scores_to_csv(const std::vector<std::tuple<HeadId, double, double>>&
                                     head_aie_prefix,
                                 const std::string& manifest_hash);

// Recomputes the accuracy grid from logs/records.jsonl and writes
// report.json + report.csv into the run directory. Idempotent.
void write_report(const std::string& run_dir);

}  // namespace fvlab
