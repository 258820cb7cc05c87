#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "gradsae/datagen.hpp"
#include "gradsae/error.hpp"

using namespace gradsae;
using namespace gradsae::data;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("gradsae_datagen_" + name);
}

bool contains_span(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

}  // namespace

TEST_CASE("generated groups have the configured shape") {
  GeneratorConfig cfg;
  cfg.n_groups = 60;
  const auto groups = generate_corpus(cfg);
  REQUIRE(groups.size() == 60);
  for (const auto& g : groups) {
    CHECK(g.examples.size() == 5);
    CHECK(g.steer_eligible());
    std::set<std::string> questions;
    const auto ctx = split_words(g.context);
    for (const auto& ex : g.examples) {
      CHECK(ex.context == g.context);
      CHECK(split_words(ex.question).back() == kQuestionMarker);
      CHECK(contains_span(ctx, split_words(ex.answer)));
      CHECK(g.context.find(ex.answer) != std::string::npos);
      questions.insert(ex.question);
    }
    CHECK(questions.size() == g.examples.size());
  }
  CHECK(groups[7].group_id == "g00007");
}

TEST_CASE("answers in one context share no tokens") {
  GeneratorConfig cfg;
  cfg.n_groups = 40;
  for (const auto& g : generate_corpus(cfg)) {
    std::multiset<std::string> tokens;
    for (const auto& ex : g.examples) {
      for (const auto& w : split_words(ex.answer)) tokens.insert(w);
    }
    for (const auto& w : tokens) CHECK(tokens.count(w) == 1);
  }
}

TEST_CASE("generation is deterministic in the seed") {
  GeneratorConfig cfg;
  cfg.n_groups = 20;
  const auto a = generate_corpus(cfg);
  CHECK(generate_corpus(cfg) == a);
  cfg.seed = 43;
  CHECK(generate_corpus(cfg) != a);
}

TEST_CASE("infeasible generator settings are rejected") {
  GeneratorConfig cfg;
  cfg.questions_per_group = 7;
  CHECK_THROWS_AS(generate_corpus(cfg), GenerationError);
  cfg = GeneratorConfig{};
  cfg.facts_per_context = 40;
  cfg.questions_per_group = 5;
  CHECK_THROWS_AS(generate_corpus(cfg), GenerationError);
  cfg = GeneratorConfig{};
  cfg.facts_per_context = 9;  // only eight relations
  cfg.questions_per_group = 5;
  CHECK_THROWS_AS(generate_corpus(cfg), GenerationError);
  cfg = GeneratorConfig{};
  cfg.two_word_fraction = 1.5;
  CHECK_THROWS_AS(generate_corpus(cfg), GenerationError);
}

TEST_CASE("corpus stats on a hand-built group") {
  QAGroup g{"x", "a b c d e f g h", {{"a b c d e f g h", "what a ?", "b c"}, {"a b c d e f g h", "what x y ?", "d"}}};
  const std::vector<QAGroup> one{g};
  const auto s = corpus_stats(one);
  CHECK(s.context_length == 8.0);
  CHECK(s.question_length == 3.5);
  CHECK(s.answer_length == 1.5);
  CHECK(s.questions_per_context == 2.0);
  CHECK(s.examples == 2);
  const auto text = format_stats(s, "synthetic");
  CHECK(text.find("Context Avg. Length\t8.00") != std::string::npos);
  CHECK(text.find("Avg. Questions / Context\t2.00") != std::string::npos);
}

TEST_CASE("corpus stats ignore group order and match the shape target") {
  GeneratorConfig cfg;
  cfg.n_groups = 50;
  auto groups = generate_corpus(cfg);
  const auto s = corpus_stats(groups);
  std::reverse(groups.begin(), groups.end());
  const auto r = corpus_stats(groups);
  CHECK(r.context_length == s.context_length);
  CHECK(r.answer_length == s.answer_length);
  CHECK(s.context_length >= 10.0 * s.answer_length);
}

TEST_CASE("split keeps groups whole") {
  GeneratorConfig cfg;
  cfg.n_groups = 30;
  const auto groups = generate_corpus(cfg);
  const auto sp = split_by_group(groups, 0.1, 42);
  CHECK(sp.valid.size() == 3);
  CHECK(sp.train.size() == 27);
  std::set<std::string> train_ctx;
  for (const auto& g : sp.train) train_ctx.insert(g.context);
  for (const auto& g : sp.valid) CHECK(train_ctx.count(g.context) == 0);
  CHECK(split_by_group(groups, 0.1, 42).valid == sp.valid);
  CHECK_THROWS_AS(split_by_group(groups, 1.5, 42), InputError);
}

TEST_CASE("native corpus round-trips") {
  GeneratorConfig cfg;
  cfg.n_groups = 12;
  const auto groups = generate_corpus(cfg);
  const auto path = temp_file("roundtrip.jsonl");
  write_native(path, groups);
  CHECK(read_native(path) == groups);

  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  CHECK(first.rfind("{\"answer\":", 0) == 0);
  std::filesystem::remove(path);
}

TEST_CASE("native reader reports the failing line") {
  const auto path = temp_file("bad.jsonl");
  {
    std::ofstream out(path);
    out << R"({"group_id":"g","context":"c","question":"q ?","answer":"a"})" << "\n";
    out << R"({"group_id":"g","context":"c","question":"q ?"})" << "\n";
  }
  try {
    read_native(path);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find(":2: missing string field 'answer'") != std::string::npos);
  }
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_native(temp_file("missing.jsonl")), IoError);
  CHECK_THROWS_AS(write_native("/nonexistent-dir/x.jsonl", std::vector<QAGroup>{}), IoError);
}

TEST_CASE("squad ingestion") {
  const auto path = temp_file("squad.json");
  {
    std::ofstream out(path);
    out << R"({"data":[{"title":"t","paragraphs":[{"context":"The cat sat on the mat.",
      "qas":[{"id":"1","question":"Who sat?","answers":[{"text":"The cat","answer_start":0},{"text":"cat"}]},
             {"id":"2","question":"Where?","answers":[{"text":"the mat","answer_start":15}]}]},
      {"context":"Solo.","qas":[{"id":"3","question":"What?","answers":[{"text":"Solo"}]}]}]}]})";
  }
  const auto groups = ingest_squad(path);
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].group_id == "squad-0-0");
  REQUIRE(groups[0].examples.size() == 2);
  CHECK(groups[0].examples[0].answer == "The cat");
  CHECK(groups[0].examples[1].question == "Where?");
  CHECK(groups[0].steer_eligible());
  CHECK_FALSE(groups[1].steer_eligible());

  {
    std::ofstream out(path);
    out << R"({"data":[{"paragraphs":[{"context":"c","qas":[{"question":"q"},{"question":"r"}]}]}]})";
  }
  try {
    ingest_squad(path);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("data[0].paragraphs[0].qas[0]: missing 'answers' array") != std::string::npos);
  }
  std::filesystem::remove(path);
}
