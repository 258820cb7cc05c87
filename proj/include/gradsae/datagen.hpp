#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

// Synthetic reading-comprehension corpus: every context is a short list of
// "subject relation object ." facts, every question asks for the object of
// one fact, and every answer is the object span copied from the context.
namespace gradsae::data {

struct QAExample {
  std::string context;
  std::string question;
  std::string answer;

  friend bool operator==(const QAExample&, const QAExample&) = default;
};

struct QAGroup {
  std::string group_id;
  std::string context;
  std::vector<QAExample> examples;

  // Steering needs a donor question sharing the context.
  bool steer_eligible() const noexcept { return examples.size() >= 2; }

  friend bool operator==(const QAGroup&, const QAGroup&) = default;
};

inline constexpr const char* kQuestionMarker = "?";
inline constexpr const char* kFactSeparator = ".";

// Word lists the fact grammar draws from. Words are lowercase letters only so
// answer normalization leaves them intact.
struct Lexicon {
  std::vector<std::string> subjects;
  std::vector<std::string> relations;
  std::vector<std::string> adjectives;
  std::vector<std::string> nouns;

  static Lexicon standard();
};

struct GeneratorConfig {
  std::size_t n_groups = 1400;
  std::size_t questions_per_group = 5;
  std::size_t facts_per_context = 6;
  // Probability that an object is "adjective noun" rather than "noun".
  double two_word_fraction = 0.5;
  std::uint64_t seed = 42;
};

// Deterministic given cfg.seed. Within one context subjects, relations, nouns
// and adjectives are all distinct, so no two answers share a token and either
// the subject or the relation of a question picks out its fact.
std::vector<QAGroup> generate_corpus(const GeneratorConfig& cfg, const Lexicon& lex = Lexicon::standard());

struct CorpusStats {
  double context_length = 0.0;
  double question_length = 0.0;
  double answer_length = 0.0;
  double questions_per_context = 0.0;
  std::size_t examples = 0;
  std::size_t contexts = 0;
};

// Lengths are whitespace-token counts averaged over examples.
CorpusStats corpus_stats(std::span<const QAGroup> groups);

// Rendered in the row order of the usual dataset-statistics table.
std::string format_stats(const CorpusStats& stats, const std::string& column_label);

struct Split {
  std::vector<QAGroup> train;
  std::vector<QAGroup> valid;
};

// Whole groups go to one side, so no context appears in both splits.
Split split_by_group(std::span<const QAGroup> groups, double valid_fraction, std::uint64_t seed);

// Native corpus: one JSON object per line with keys group_id, context,
// question, answer. Records of one group are contiguous.
void write_native(const std::filesystem::path& path, std::span<const QAGroup> groups);
std::vector<QAGroup> read_native(const std::filesystem::path& path);

// SQuAD v1.1 layout: data[] → paragraphs[] → qas[] → answers[].
// Uses the first annotated answer of each question.
std::vector<QAGroup> ingest_squad(const std::filesystem::path& path);

std::vector<std::string> split_words(const std::string& text);

}  // namespace gradsae::data
