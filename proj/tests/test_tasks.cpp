#include <algorithm>
#include <set>

#include "doctest.h"
#include "fvlab/tasks.hpp"

using namespace fvlab;

TEST_CASE("vocab names and ids round trip") {
  Vocab v;
  CHECK(v.size() == 270);
  CHECK(v.name(0) == "t0");
  CHECK(v.name(255) == "t255");
  CHECK(v.name(v.qmark(0)) == "Q0");
  CHECK(v.name(v.amark(4)) == "A4");
  CHECK(v.name(v.sep(3)) == "S3");
  for (int id = 0; id < v.size(); ++id) CHECK(v.id(v.name(id)) == id);
  CHECK_THROWS_AS(v.id("Z9"), DomainError);
  CHECK_THROWS_AS(v.name(-1), DomainError);
}

TEST_CASE("default registry task semantics") {
  const auto reg = TaskRegistry::default_registry();
  CHECK(reg.tasks.size() == 8);

  const auto& succ = reg.get("succ");
  CHECK(succ.target({5}) == 6);
  CHECK(succ.target({63}) == 0);
  const auto& pred = reg.get("pred");
  CHECK(pred.target({0}) == 63);
  CHECK(pred.target({6}) == 5);
  const auto& pair = reg.get("pair");
  CHECK(pair.target({12}) == 76);
  const auto& copy = reg.get("copy");
  CHECK(copy.target({9}) == 9);

  CHECK(reg.get("first-copy").target({4, 7, 2}) == 4);
  CHECK(reg.get("last-copy").target({4, 7, 2}) == 2);
  CHECK(reg.get("first-pair").target({4, 7, 2}) == 68);
  CHECK(reg.get("last-pair").target({4, 7, 2}) == 66);

  CHECK_THROWS_AS(reg.get("nope"), DomainError);
  CHECK_THROWS_AS(succ.target({200}), DomainError);
}

TEST_CASE("cyclic tasks compose to the identity over the whole cycle") {
  const auto reg = TaskRegistry::default_registry();
  for (const char* name : {"succ", "pred"}) {
    const auto& task = reg.get(name);
    for (int start : task.cycle) {
      int x = start;
      for (size_t i = 0; i < task.cycle.size(); ++i) x = task.target({x});
      CHECK(x == start);
    }
  }
}

TEST_CASE("pairing maps between disjoint halves") {
  const auto reg = TaskRegistry::default_registry();
  const auto& pair = reg.get("pair");
  std::set<int> outputs;
  for (int x : pair.input_domain) {
    const int y = pair.target({x});
    CHECK(y >= 64);
    CHECK(y < 128);
    outputs.insert(y);
  }
  CHECK(outputs.size() == pair.input_domain.size());  // bijection
}

TEST_CASE("rendering places output tokens where the index says") {
  const auto reg = TaskRegistry::default_registry();
  Rng rng(3);
  for (const auto& task : reg.tasks) {
    const auto p = build_prompt(reg, task, 4, rng, Template::from_id(reg.vocab, 7),
                                false, QueryPool::Any);
    CHECK(p.output_positions.size() == 4);
    for (size_t k = 0; k < p.output_positions.size(); ++k) {
      CHECK(p.tokens[p.output_positions[k]] == p.spec.exemplars[k].second);
    }
    CHECK(p.final_pos == int(p.tokens.size()) - 1);
    // the sequence ends exactly at the answer slot
    const Template tmpl = Template::from_id(reg.vocab, p.spec.template_id);
    CHECK(p.tokens.back() == reg.vocab.amark(tmpl.prefix_style));
  }
}

TEST_CASE("build_prompt determinism and label correctness") {
  const auto reg = TaskRegistry::default_registry();
  const auto& succ = reg.get("succ");
  Rng a(11), b(11);
  const auto pa = build_prompt(reg, succ, 2, a, Template{}, false);
  const auto pb = build_prompt(reg, succ, 2, b, Template{}, false);
  CHECK(pa.tokens == pb.tokens);
  for (const auto& [x, y] : pa.spec.exemplars) {
    CHECK(y == succ.target(x));
  }
  CHECK(pa.spec.target == succ.target(pa.spec.query));
  // query never appears among exemplar inputs
  for (const auto& [x, y] : pa.spec.exemplars) CHECK(x != pa.spec.query);
}

TEST_CASE("zero-shot prompt renders only the query block") {
  const auto reg = TaskRegistry::default_registry();
  Rng rng(13);
  const auto p = build_prompt(reg, reg.get("pair"), 0, rng, Template{}, false);
  CHECK(p.spec.exemplars.empty());
  CHECK(p.tokens.size() == 3);  // marker, x, marker
  CHECK(p.output_positions.empty());
  CHECK(p.tokens[0] == reg.vocab.qmark(0));
  CHECK(p.tokens[2] == reg.vocab.amark(0));
}

TEST_CASE("shuffled prompts preserve the label multiset and move every label") {
  const auto reg = TaskRegistry::default_registry();
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const auto clean = build_prompt(reg, reg.get("succ"), 10, rng, Template{}, false);
    const auto shuffled = shuffle_labels(clean.spec, rng);
    std::multiset<int> a, b;
    int moved = 0;
    for (size_t k = 0; k < clean.spec.exemplars.size(); ++k) {
      a.insert(clean.spec.exemplars[k].second);
      b.insert(shuffled.exemplars[k].second);
      moved += shuffled.exemplars[k].second != clean.spec.exemplars[k].second ? 1 : 0;
    }
    CHECK(a == b);
    CHECK(moved >= 9);  // value-level derangement moves all ten
    CHECK(shuffled.query == clean.spec.query);
    CHECK(shuffled.target == clean.spec.target);
  }
  CHECK_THROWS_AS(build_prompt(reg, reg.get("succ"), 1, rng, Template{}, true),
                  CapacityError);
}

TEST_CASE("capacity errors for undersized domains") {
  const auto reg = TaskRegistry::default_registry();
  Rng rng(19);
  CHECK_THROWS_AS(build_prompt(reg, reg.get("succ"), 64, rng, Template{}, false),
                  CapacityError);
}

TEST_CASE("training example masks every non-output position") {
  const auto reg = TaskRegistry::default_registry();
  Rng rng(23);
  const auto p = build_prompt(reg, reg.get("copy"), 3, rng, Template{}, false);
  const auto ex = to_training_example(p);
  CHECK(ex.tokens == p.tokens);
  int n_targets = 0;
  for (size_t i = 0; i < ex.targets.size(); ++i) {
    if (ex.targets[i] < 0) continue;
    ++n_targets;
    if (int(i) != p.final_pos) {
      CHECK(ex.targets[i] == ex.tokens[i + 1]);  // exemplar outputs
    } else {
      CHECK(ex.targets[i] == p.spec.target);
    }
  }
  CHECK(n_targets == 4);  // 3 exemplars + final answer
}

TEST_CASE("corpus mixes tasks exactly uniformly and respects the held-out split") {
  const auto reg = TaskRegistry::default_registry();
  CorpusGenerator gen(reg, {"succ", "pair"}, 0, 4, {0}, 7);
  int succ_count = 0, pair_count = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto p = gen.next_prompt();
    if (p.spec.task == "succ") ++succ_count;
    if (p.spec.task == "pair") ++pair_count;
    CHECK_FALSE(reg.heldout_query(reg.get(p.spec.task), p.spec.query));
  }
  CHECK(succ_count == 500);
  CHECK(pair_count == 500);
}

TEST_CASE("corpus generation is bit reproducible") {
  const auto reg = TaskRegistry::default_registry();
  CorpusGenerator a(reg, {"succ", "last-pair"}, 0, 10, {0, 1, 5}, 99);
  CorpusGenerator b(reg, {"succ", "last-pair"}, 0, 10, {0, 1, 5}, 99);
  for (int i = 0; i < 50; ++i) {
    const auto ea = a.next();
    const auto eb = b.next();
    CHECK(ea.tokens == eb.tokens);
    CHECK(ea.targets == eb.targets);
  }
}

TEST_CASE("corpus rejects an empty task list") {
  const auto reg = TaskRegistry::default_registry();
  CHECK_THROWS_AS(CorpusGenerator(reg, {}, 0, 10, {0}, 1), CapacityError);
}

TEST_CASE("twenty templates render distinct token sequences") {
  const auto reg = TaskRegistry::default_registry();
  CHECK(Template::count(reg.vocab) == 20);
  std::set<std::vector<int>> renderings;
  PromptSpec spec;
  spec.task = "succ";
  spec.exemplars = {{{1}, 2}, {{3}, 4}};
  spec.query = {5};
  spec.target = 6;
  for (int tid = 0; tid < 20; ++tid) {
    spec.template_id = tid;
    renderings.insert(render(reg.vocab, spec).tokens);
  }
  CHECK(renderings.size() == 20);
}

TEST_CASE("heldout split reserves a quarter of the base domain") {
  const auto reg = TaskRegistry::default_registry();
  int held = 0;
  for (int s = 0; s < 64; ++s) held += reg.heldout_symbol(s) ? 1 : 0;
  CHECK(held == 16);
  // list queries follow the selected item
  CHECK(reg.heldout_query(reg.get("first-copy"), {3, 0, 1}));
  CHECK_FALSE(reg.heldout_query(reg.get("first-copy"), {0, 3, 1}));
  CHECK(reg.heldout_query(reg.get("last-pair"), {0, 1, 7}));
}

TEST_CASE("jsonl round trip with symbol names") {
  const auto reg = TaskRegistry::default_registry();
  Rng rng(29);
  for (const char* name : {"succ", "last-pair"}) {
    const auto p = build_prompt(reg, reg.get(name), 3, rng, Template::from_id(reg.vocab, 9),
                                false);
    const std::string line = prompt_to_jsonl(reg.vocab, p.spec);
    CHECK(line.find("\"task\"") != std::string::npos);
    CHECK(line.find("t") != std::string::npos);
    const auto back = prompt_from_jsonl(reg.vocab, line);
    CHECK(back.task == p.spec.task);
    CHECK(back.exemplars == p.spec.exemplars);
    CHECK(back.query == p.spec.query);
    CHECK(back.target == p.spec.target);
    CHECK(back.template_id == p.spec.template_id);
    CHECK(back.shuffled == p.spec.shuffled);
  }
}

TEST_CASE("filtered test set on an untrained model is near empty") {
  const auto reg = TaskRegistry::default_registry();
  ModelConfig cfg;
  cfg.vocab_size = reg.vocab.size();
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_head = 8;
  cfg.max_seq = 80;
  const auto w = random_weights(cfg, 5, 0.1f);
  Rng rng(31);
  const auto sets =
      task_filtered_testset(reg, reg.get("succ"), w, cfg, 24, rng, Template{});
  CHECK(sets.unfiltered.size() == 24);
  CHECK(sets.pass.size() == 24);
  // untrained: essentially chance-level (1/270 per prompt)
  CHECK(sets.filtered.size() <= 3);
  for (const auto& p : sets.filtered) {
    CHECK(reg.heldout_query(reg.get("succ"), p.spec.query));
  }
}
