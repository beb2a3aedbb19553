// Synthetic symbolic task universe and prompt factory.
//
// The vocabulary is 256 base symbols t0..t255 plus structural tokens for the
// prompt templates: five question/answer marker pairs (Q0..Q4 / A0..A4) and
// four separators (S0..S3). Crossing prefix style x separator gives the 20
// template variants. An exemplar renders as [Qs, x..., As, y, Sr] and the
// query as [Qs, x..., As], so the sequence ends exactly at the answer slot.
//
// Default tasks: successor/predecessor on a 64-symbol cycle, a pairing
// bijection onto the upper half ("pair"), copy, and four 3-item list tasks
// (first-copy, last-copy, first-pair, last-pair). 25% of the base domain
// (every 4th symbol) is reserved for evaluation queries.

#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fvlab/model.hpp"
#include "fvlab/numerics.hpp"

namespace fvlab {

struct Vocab {
  int n_base = 256;
  int n_prefix_styles = 5;
  int n_separators = 4;

  int size() const { return n_base + 2 * n_prefix_styles + n_separators; }
  int qmark(int style) const { return n_base + style; }
  int amark(int style) const { return n_base + n_prefix_styles + style; }
  int sep(int s) const { return n_base + 2 * n_prefix_styles + s; }
  bool is_base(int id) const { return id >= 0 && id < n_base; }

  std::string name(int id) const;
  int id(const std::string& name) const;  // throws DomainError on unknown
};

struct Template {
  int prefix_style = 0;
  int separator = 0;

  int id(const Vocab& v) const { return prefix_style * v.n_separators + separator; }
  static Template from_id(const Vocab& v, int id);
  static int count(const Vocab& v) { return v.n_prefix_styles * v.n_separators; }
};

enum class TaskKind { CyclicOffset, Pairing, Copy, ListSelect };

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::Copy;

  int offset = 0;                // CyclicOffset: +1 successor, -1 predecessor
  std::vector<int> cycle;        // CyclicOffset: token ids in cycle order
  std::map<int, int> pairing;    // Pairing / ListSelect post-map
  int list_len = 0;              // ListSelect only
  bool select_last = false;      // ListSelect: first or last item
  bool post_pair = false;        // ListSelect: apply pairing after selection
  std::vector<int> input_domain; // scalar symbols, or list element domain

  bool is_list() const { return kind == TaskKind::ListSelect; }
  int x_len() const { return is_list() ? list_len : 1; }
  int target(const std::vector<int>& x) const;
  std::vector<int> output_set() const;
};

struct TaskRegistry {
  Vocab vocab;
  std::vector<TaskSpec> tasks;

  static TaskRegistry default_registry();
  const TaskSpec& get(const std::string& name) const;
  bool heldout_symbol(int base_id) const { return base_id % 4 == 3; }
  // A query is held out iff the symbol that determines its answer is held out.
  bool heldout_query(const TaskSpec& t, const std::vector<int>& x) const;
};

struct PromptSpec {
  std::string task;
  std::vector<std::pair<std::vector<int>, int>> exemplars;  // (x, y) token ids
  std::vector<int> query;
  int target = -1;
  int template_id = 0;
  bool shuffled = false;
};

struct RenderedPrompt {
  PromptSpec spec;
  std::vector<int> tokens;
  std::vector<int> output_positions;  // index of each exemplar's y token
  int final_pos = -1;                 // last index; answer is predicted here
};

enum class QueryPool { Any, Train, Heldout };

RenderedPrompt render(const Vocab& v, const PromptSpec& spec);

RenderedPrompt build_prompt(const TaskRegistry& reg, const TaskSpec& task, int n_shots,
                            Rng& rng, const Template& tmpl, bool shuffled,
                            QueryPool pool = QueryPool::Any);

struct TrainingExample {
  std::vector<int> tokens;
  std::vector<int> targets;  // next-token target per position, -1 = no loss
};

TrainingExample to_training_example(const RenderedPrompt& p);

// Round-robin over tasks (exact uniform mixing), uniform shots and templates,
// training-pool queries only. Bit-reproducible for a fixed seed.
class CorpusGenerator {
 public:
  CorpusGenerator(const TaskRegistry& reg, std::vector<std::string> task_names,
                  int shot_min, int shot_max, std::vector<int> template_ids,
                  uint64_t seed);

  TrainingExample next();
  RenderedPrompt next_prompt();
  const std::vector<std::string>& task_names() const { return task_names_; }
  const TaskRegistry& registry() const { return reg_; }

 private:
  const TaskRegistry& reg_;
  std::vector<std::string> task_names_;
  int shot_min_, shot_max_;
  std::vector<int> template_ids_;
  Rng rng_;
  uint64_t count_ = 0;
};

struct TestSets {
  std::vector<RenderedPrompt> filtered;    // model answers the 10-shot prompt
  std::vector<RenderedPrompt> unfiltered;  // everything generated
  std::vector<char> pass;                  // per unfiltered entry
};

// Value-level derangement of the exemplar labels (query untouched).
PromptSpec shuffle_labels(const PromptSpec& spec, Rng& rng);

TestSets task_filtered_testset(const TaskRegistry& reg, const TaskSpec& task,
                               const ModelWeights& w, const ModelConfig& cfg, int size,
                               Rng& rng, const Template& tmpl, int n_shots = 10);

// JSON-lines interchange using symbol names.
std::string prompt_to_jsonl(const Vocab& v, const PromptSpec& spec);
PromptSpec prompt_from_jsonl(const Vocab& v, const std::string& line);

}  // namespace fvlab
