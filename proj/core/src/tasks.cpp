#include "fvlab/tasks.hpp"

#include <algorithm>
#include <numeric>

#include "fvlab/parallel.hpp"
#include "json.hpp"

namespace fvlab {

std::string Vocab::name(int id) const {
  if (is_base(id)) return "t" + std::to_string(id);
  if (id >= qmark(0) && id < qmark(n_prefix_styles)) {
    return "Q" + std::to_string(id - qmark(0));
  }
  if (id >= amark(0) && id < amark(n_prefix_styles)) {
    return "A" + std::to_string(id - amark(0));
  }
  if (id >= sep(0) && id < sep(n_separators)) {
    return "S" + std::to_string(id - sep(0));
  }
  throw DomainError("Vocab::name: id " + std::to_string(id) + " out of range");
}

int Vocab::id(const std::string& name) const {
  if (name.size() < 2) throw DomainError("Vocab::id: bad symbol '" + name + "'");
  int num = 0;
  try {
    num = std::stoi(name.substr(1));
  } catch (const std::exception&) {
    throw DomainError("Vocab::id: bad symbol '" + name + "'");
  }
  int out = -1;
  switch (name[0]) {
    case 't': out = num < n_base ? num : -1; break;
    case 'Q': out = num < n_prefix_styles ? qmark(num) : -1; break;
    case 'A': out = num < n_prefix_styles ? amark(num) : -1; break;
    case 'S': out = num < n_separators ? sep(num) : -1; break;
    default: break;
  }
  if (out < 0 || num < 0) throw DomainError("Vocab::id: unknown symbol '" + name + "'");
  return out;
}

Template Template::from_id(const Vocab& v, int id) {
  if (id < 0 || id >= count(v)) {
    throw DomainError("Template::from_id: id " + std::to_string(id) + " out of range");
  }
  Template t;
  t.prefix_style = id / v.n_separators;
  t.separator = id % v.n_separators;
  return t;
}

int TaskSpec::target(const std::vector<int>& x) const {
  if (static_cast<int>(x.size()) != x_len()) {
    throw DomainError("task " + name + ": input length " + std::to_string(x.size()));
  }
  switch (kind) {
    case TaskKind::CyclicOffset: {
      const auto it = std::find(cycle.begin(), cycle.end(), x[0]);
      if (it == cycle.end()) {
        throw DomainError("task " + name + ": input outside cycle");
      }
      const int n = static_cast<int>(cycle.size());
      const int idx = static_cast<int>(it - cycle.begin());
      return cycle[((idx + offset) % n + n) % n];
    }
    case TaskKind::Pairing: {
      const auto it = pairing.find(x[0]);
      if (it == pairing.end()) throw DomainError("task " + name + ": input not paired");
      return it->second;
    }
    case TaskKind::Copy:
      if (std::find(input_domain.begin(), input_domain.end(), x[0]) ==
          input_domain.end()) {
        throw DomainError("task " + name + ": input outside domain");
      }
      return x[0];
    case TaskKind::ListSelect: {
      const int item = select_last ? x[list_len - 1] : x[0];
      if (!post_pair) return item;
      const auto it = pairing.find(item);
      if (it == pairing.end()) throw DomainError("task " + name + ": item not paired");
      return it->second;
    }
  }
  throw DomainError("task " + name + ": unknown kind");
}

std::vector<int> TaskSpec::output_set() const {
  switch (kind) {
    case TaskKind::CyclicOffset: return cycle;
    case TaskKind::Copy: return input_domain;
    case TaskKind::Pairing:
    case TaskKind::ListSelect: {
      if (kind == TaskKind::ListSelect && !post_pair) return input_domain;
      std::vector<int> out;
      out.reserve(pairing.size());
      for (const auto& [a, b] : pairing) out.push_back(b);
      return out;
    }
  }
  return {};
}

TaskRegistry TaskRegistry::default_registry() {
  TaskRegistry reg;
  std::vector<int> lower(64);
  std::iota(lower.begin(), lower.end(), 0);
  std::map<int, int> upper_map;
  for (int i = 0; i < 64; ++i) upper_map[i] = 64 + i;

  auto scalar = [&](const std::string& name, TaskKind kind, int offset) {
    TaskSpec t;
    t.name = name;
    t.kind = kind;
    t.offset = offset;
    t.cycle = lower;
    t.pairing = upper_map;
    t.input_domain = lower;
    return t;
  };
  reg.tasks.push_back(scalar("succ", TaskKind::CyclicOffset, 1));
  reg.tasks.push_back(scalar("pred", TaskKind::CyclicOffset, -1));
  reg.tasks.push_back(scalar("pair", TaskKind::Pairing, 0));
  reg.tasks.push_back(scalar("copy", TaskKind::Copy, 0));

  auto list = [&](const std::string& name, bool last, bool pair) {
    TaskSpec t;
    t.name = name;
    t.kind = TaskKind::ListSelect;
    t.list_len = 3;
    t.select_last = last;
    t.post_pair = pair;
    t.pairing = upper_map;
    t.input_domain = lower;
    return t;
  };
  reg.tasks.push_back(list("first-copy", false, false));
  reg.tasks.push_back(list("last-copy", true, false));
  reg.tasks.push_back(list("first-pair", false, true));
  reg.tasks.push_back(list("last-pair", true, true));
  return reg;
}

const TaskSpec& TaskRegistry::get(const std::string& name) const {
  for (const auto& t : tasks) {
    if (t.name == name) return t;
  }
  throw DomainError("unknown task '" + name + "'");
}

bool TaskRegistry::heldout_query(const TaskSpec& t, const std::vector<int>& x) const {
  const int selected = t.is_list() ? (t.select_last ? x[t.list_len - 1] : x[0]) : x[0];
  return heldout_symbol(selected);
}

RenderedPrompt render(const Vocab& v, const PromptSpec& spec) {
  const Template tmpl = Template::from_id(v, spec.template_id);
  RenderedPrompt out;
  out.spec = spec;
  const int q = v.qmark(tmpl.prefix_style);
  const int a = v.amark(tmpl.prefix_style);
  const int s = v.sep(tmpl.separator);
  for (const auto& [x, y] : spec.exemplars) {
    out.tokens.push_back(q);
    out.tokens.insert(out.tokens.end(), x.begin(), x.end());
    out.tokens.push_back(a);
    out.output_positions.push_back(static_cast<int>(out.tokens.size()));
    out.tokens.push_back(y);
    out.tokens.push_back(s);
  }
  out.tokens.push_back(q);
  out.tokens.insert(out.tokens.end(), spec.query.begin(), spec.query.end());
  out.tokens.push_back(a);
  out.final_pos = static_cast<int>(out.tokens.size()) - 1;
  return out;
}

namespace {

// k distinct elements of pool, order random
std::vector<int> sample_distinct(const std::vector<int>& pool, int k, Rng& rng) {
  if (k > static_cast<int>(pool.size())) {
    throw CapacityError("domain of size " + std::to_string(pool.size()) +
                        " too small for " + std::to_string(k) + " distinct draws");
  }
  std::vector<int> scratch = pool;
  std::vector<int> out;
  out.reserve(k);
  for (int i = 0; i < k; ++i) {
    const size_t j = rng.below(scratch.size());
    out.push_back(scratch[j]);
    scratch[j] = scratch.back();
    scratch.pop_back();
  }
  return out;
}

std::vector<int> sample_input(const TaskSpec& task, Rng& rng, QueryPool pool,
                              const TaskRegistry& reg) {
  auto allowed = [&](int sym, bool selected_slot) {
    if (pool == QueryPool::Any || !selected_slot) return true;
    const bool held = reg.heldout_symbol(sym);
    return pool == QueryPool::Heldout ? held : !held;
  };
  if (!task.is_list()) {
    std::vector<int> cands;
    for (int sym : task.input_domain) {
      if (allowed(sym, true)) cands.push_back(sym);
    }
    if (cands.empty()) throw CapacityError("task " + task.name + ": empty query pool");
    return {cands[rng.below(cands.size())]};
  }
  // list: pick the selected item from the pool, fill the rest distinct
  std::vector<int> sel_cands;
  for (int sym : task.input_domain) {
    if (allowed(sym, true)) sel_cands.push_back(sym);
  }
  if (sel_cands.empty()) throw CapacityError("task " + task.name + ": empty query pool");
  const int sel = sel_cands[rng.below(sel_cands.size())];
  std::vector<int> rest_pool;
  for (int sym : task.input_domain) {
    if (sym != sel) rest_pool.push_back(sym);
  }
  std::vector<int> rest = sample_distinct(rest_pool, task.list_len - 1, rng);
  std::vector<int> x(task.list_len);
  const int sel_pos = task.select_last ? task.list_len - 1 : 0;
  int r = 0;
  for (int i = 0; i < task.list_len; ++i) {
    x[i] = (i == sel_pos) ? sel : rest[r++];
  }
  return x;
}

constexpr int kMaxResample = 10000;

}  // namespace

RenderedPrompt build_prompt(const TaskRegistry& reg, const TaskSpec& task, int n_shots,
                            Rng& rng, const Template& tmpl, bool shuffled,
                            QueryPool pool) {
  if (n_shots < 0) throw DomainError("build_prompt: negative shot count");
  if (!task.is_list() &&
      static_cast<int>(task.input_domain.size()) < n_shots + 1) {
    throw CapacityError("task " + task.name + ": domain of " +
                        std::to_string(task.input_domain.size()) +
                        " inputs cannot host " + std::to_string(n_shots + 1) +
                        " distinct inputs");
  }
  if (shuffled && n_shots < 2) {
    throw CapacityError("build_prompt: cannot shuffle labels of " +
                        std::to_string(n_shots) + " exemplars");
  }

  PromptSpec spec;
  spec.task = task.name;
  spec.template_id = tmpl.id(reg.vocab);
  spec.shuffled = shuffled;
  spec.query = sample_input(task, rng, pool, reg);
  spec.target = task.target(spec.query);

  if (!task.is_list()) {
    std::vector<int> cands;
    for (int sym : task.input_domain) {
      if (sym != spec.query[0]) cands.push_back(sym);
    }
    const std::vector<int> xs = sample_distinct(cands, n_shots, rng);
    for (int x : xs) spec.exemplars.push_back({{x}, task.target({x})});
  } else {
    for (int i = 0; i < n_shots; ++i) {
      for (int attempt = 0;; ++attempt) {
        if (attempt >= kMaxResample) {
          throw CapacityError("task " + task.name + ": cannot sample distinct lists");
        }
        std::vector<int> x = sample_distinct(task.input_domain, task.list_len, rng);
        if (x == spec.query) continue;
        bool dup = false;
        for (const auto& [ex, ey] : spec.exemplars) {
          if (ex == x) { dup = true; break; }
        }
        if (dup) continue;
        spec.exemplars.push_back({x, task.target(x)});
        break;
      }
    }
  }

  if (shuffled) spec = shuffle_labels(spec, rng);

  return render(reg.vocab, spec);
}

PromptSpec shuffle_labels(const PromptSpec& spec, Rng& rng) {
  const int n = static_cast<int>(spec.exemplars.size());
  if (n < 2) {
    throw CapacityError("shuffle_labels: cannot shuffle " + std::to_string(n) +
                        " exemplar labels");
  }
  // uniform permutation, resampled until every label moves off its true pair
  // by value
  std::vector<int> truth(n);
  for (int i = 0; i < n; ++i) truth[i] = spec.exemplars[i].second;
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (int attempt = 0;; ++attempt) {
    if (attempt >= kMaxResample) {
      throw CapacityError("shuffle_labels: label multiset admits no derangement");
    }
    rng.shuffle(perm);
    bool ok = true;
    for (int i = 0; i < n; ++i) {
      if (truth[perm[i]] == truth[i]) { ok = false; break; }
    }
    if (ok) break;
  }
  PromptSpec out = spec;
  out.shuffled = true;
  for (int i = 0; i < n; ++i) out.exemplars[i].second = truth[perm[i]];
  return out;
}

TrainingExample to_training_example(const RenderedPrompt& p) {
  TrainingExample ex;
  ex.tokens = p.tokens;
  ex.targets.assign(p.tokens.size(), -1);
  for (int pos : p.output_positions) {
    ex.targets[pos - 1] = p.tokens[pos];  // the marker before y predicts y
  }
  ex.targets[p.final_pos] = p.spec.target;
  return ex;
}

CorpusGenerator::CorpusGenerator(const TaskRegistry& reg,
                                 std::vector<std::string> task_names, int shot_min,
                                 int shot_max, std::vector<int> template_ids,
                                 uint64_t seed)
    : reg_(reg), task_names_(std::move(task_names)), shot_min_(shot_min),
      shot_max_(shot_max), template_ids_(std::move(template_ids)), rng_(seed) {
  if (task_names_.empty()) throw CapacityError("CorpusGenerator: no tasks");
  if (shot_min_ < 0 || shot_max_ < shot_min_) {
    throw DomainError("CorpusGenerator: bad shot range");
  }
  if (template_ids_.empty()) template_ids_ = {0};
  for (const auto& name : task_names_) reg_.get(name);  // validate early
}

RenderedPrompt CorpusGenerator::next_prompt() {
  const TaskSpec& task = reg_.get(task_names_[count_ % task_names_.size()]);
  ++count_;
  // max of two draws: richer prompts carry more supervised inference
  // points, and the in-context disambiguation of same-domain tasks only
  // trains reliably when most prompts hold several exemplars
  const int span = shot_max_ - shot_min_ + 1;
  const int shots =
      shot_min_ + std::max(rng_.below_int(span), rng_.below_int(span));
  const Template tmpl =
      Template::from_id(reg_.vocab, template_ids_[rng_.below(template_ids_.size())]);
  return build_prompt(reg_, task, shots, rng_, tmpl, false, QueryPool::Train);
}

TrainingExample CorpusGenerator::next() { return to_training_example(next_prompt()); }

TestSets task_filtered_testset(const TaskRegistry& reg, const TaskSpec& task,
                               const ModelWeights& w, const ModelConfig& cfg, int size,
                               Rng& rng, const Template& tmpl, int n_shots) {
  TestSets sets;
  sets.unfiltered.reserve(size);
  for (int i = 0; i < size; ++i) {
    sets.unfiltered.push_back(
        build_prompt(reg, task, n_shots, rng, tmpl, false, QueryPool::Heldout));
  }
  sets.pass.assign(size, 0);
  parallel_for(size, [&](int i) {
    const auto out = forward(w, cfg, sets.unfiltered[i].tokens);
    sets.pass[i] = argmax_lowest(out.dist) == sets.unfiltered[i].spec.target ? 1 : 0;
  });
  for (int i = 0; i < size; ++i) {
    if (sets.pass[i]) sets.filtered.push_back(sets.unfiltered[i]);
  }
  return sets;
}

std::string prompt_to_jsonl(const Vocab& v, const PromptSpec& spec) {
  nlohmann::json j;
  j["task"] = spec.task;
  j["template_id"] = spec.template_id;
  j["shuffled"] = spec.shuffled;
  auto x_json = [&](const std::vector<int>& x) -> nlohmann::json {
    if (x.size() == 1) return v.name(x[0]);
    nlohmann::json arr = nlohmann::json::array();
    for (int s : x) arr.push_back(v.name(s));
    return arr;
  };
  nlohmann::json ex = nlohmann::json::array();
  for (const auto& [x, y] : spec.exemplars) {
    ex.push_back(nlohmann::json::array({x_json(x), v.name(y)}));
  }
  j["exemplars"] = ex;
  j["query"] = x_json(spec.query);
  j["target"] = v.name(spec.target);
  return j.dump();
}

PromptSpec prompt_from_jsonl(const Vocab& v, const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  PromptSpec spec;
  spec.task = j.at("task").get<std::string>();
  spec.template_id = j.at("template_id").get<int>();
  spec.shuffled = j.at("shuffled").get<bool>();
  auto x_parse = [&](const nlohmann::json& x) {
    std::vector<int> out;
    if (x.is_string()) {
      out.push_back(v.id(x.get<std::string>()));
    } else {
      for (const auto& s : x) out.push_back(v.id(s.get<std::string>()));
    }
    return out;
  };
  for (const auto& e : j.at("exemplars")) {
    spec.exemplars.push_back({x_parse(e.at(0)), v.id(e.at(1).get<std::string>())});
  }
  spec.query = x_parse(j.at("query"));
  spec.target = v.id(j.at("target").get<std::string>());
  return spec;
}

}  // namespace fvlab
