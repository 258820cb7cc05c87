#include "gradsae/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "gradsae/error.hpp"
#include "gradsae/rng.hpp"
#include "json.hpp"

namespace gradsae::data {
namespace {

using nlohmann::json;

// k distinct indices out of [0, n), in draw order.
std::vector<std::size_t> draw_distinct(rng::Engine& e, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng::uniform_index(e, n - i)]);
  idx.resize(k);
  return idx;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace

Lexicon Lexicon::standard() {
  Lexicon lex;
  lex.subjects = {"alice", "bob",   "carol", "dave",  "erin", "frank", "grace", "heidi",
                  "ivan",  "judy",  "karl",  "liam",  "mona", "nina",  "oscar", "peggy",
                  "quinn", "rita",  "sam",   "tina",  "uma",  "victor", "wendy", "xavier"};
  lex.relations = {"owns", "likes", "found", "sold", "wants", "painted", "hid", "fears"};
  lex.adjectives = {"red", "blue", "green", "old",   "new",   "small",  "big",    "shiny",
                    "broken", "wooden", "golden", "quiet", "heavy", "tiny", "bright", "dusty"};
  lex.nouns = {"house", "car",  "boat", "lamp", "chair", "clock", "drum",  "kite",  "ring",   "book",  "coin",
               "hat",   "vase", "bell", "map",  "key",   "rope",  "tent",  "cup",   "fork",   "sock",  "harp",
               "flute", "mask", "bowl", "shoe", "sword", "crown", "glove", "wagon", "mirror", "barrel"};
  return lex;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

std::vector<QAGroup> generate_corpus(const GeneratorConfig& cfg, const Lexicon& lex) {
  const std::size_t f = cfg.facts_per_context;
  if (cfg.questions_per_group == 0 || cfg.questions_per_group > f) {
    throw GenerationError("questions_per_group must be in [1, facts_per_context]; got " +
                          std::to_string(cfg.questions_per_group) + " with " + std::to_string(f) + " facts");
  }
  if (f > lex.subjects.size() || f > lex.relations.size() || f > lex.nouns.size() || f > lex.adjectives.size()) {
    throw GenerationError("lexicon too small for " + std::to_string(f) + " facts per context");
  }
  if (cfg.two_word_fraction < 0.0 || cfg.two_word_fraction > 1.0) {
    throw GenerationError("two_word_fraction must lie in [0, 1]");
  }
  rng::Engine e(cfg.seed);
  std::vector<QAGroup> groups;
  groups.reserve(cfg.n_groups);
  for (std::size_t g = 0; g < cfg.n_groups; ++g) {
    const auto subj = draw_distinct(e, lex.subjects.size(), f);
    const auto noun = draw_distinct(e, lex.nouns.size(), f);
    const auto adj = draw_distinct(e, lex.adjectives.size(), f);
    const auto rel = draw_distinct(e, lex.relations.size(), f);
    std::vector<std::string> ctx_words;
    std::vector<std::string> objects(f);
    std::vector<std::string> rels(f);
    for (std::size_t i = 0; i < f; ++i) {
      rels[i] = lex.relations[rel[i]];
      const bool two = rng::uniform01(e) < cfg.two_word_fraction;
      objects[i] = two ? lex.adjectives[adj[i]] + " " + lex.nouns[noun[i]] : lex.nouns[noun[i]];
      ctx_words.push_back(lex.subjects[subj[i]]);
      ctx_words.push_back(rels[i]);
      for (auto& w : split_words(objects[i])) ctx_words.push_back(w);
      ctx_words.push_back(kFactSeparator);
    }
    QAGroup group;
    std::ostringstream id;
    id << "g" << std::setw(5) << std::setfill('0') << g;
    group.group_id = id.str();
    group.context = join(ctx_words);
    for (std::size_t q : draw_distinct(e, f, cfg.questions_per_group)) {
      QAExample ex;
      ex.context = group.context;
      ex.question = "what " + lex.subjects[subj[q]] + " " + rels[q] + " " + kQuestionMarker;
      ex.answer = objects[q];
      group.examples.push_back(std::move(ex));
    }
    groups.push_back(std::move(group));
  }
  return groups;
}

CorpusStats corpus_stats(std::span<const QAGroup> groups) {
  CorpusStats s;
  double ctx = 0.0;
  double q = 0.0;
  double a = 0.0;
  for (const auto& g : groups) {
    ++s.contexts;
    for (const auto& ex : g.examples) {
      ++s.examples;
      ctx += static_cast<double>(split_words(ex.context).size());
      q += static_cast<double>(split_words(ex.question).size());
      a += static_cast<double>(split_words(ex.answer).size());
    }
  }
  if (s.examples > 0) {
    const double n = static_cast<double>(s.examples);
    s.context_length = ctx / n;
    s.question_length = q / n;
    s.answer_length = a / n;
  }
  if (s.contexts > 0) s.questions_per_context = static_cast<double>(s.examples) / static_cast<double>(s.contexts);
  return s;
}

std::string format_stats(const CorpusStats& stats, const std::string& column_label) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "statistic\t" << column_label << "\n";
  os << "Context Avg. Length\t" << stats.context_length << "\n";
  os << "Question Avg. Length\t" << stats.question_length << "\n";
  os << "Answer Avg. Length\t" << stats.answer_length << "\n";
  os << "Avg. Questions / Context\t" << stats.questions_per_context << "\n";
  os << "#Ex.\t" << stats.examples << "\n";
  return os.str();
}

Split split_by_group(std::span<const QAGroup> groups, double valid_fraction, std::uint64_t seed) {
  if (valid_fraction < 0.0 || valid_fraction > 1.0) throw InputError("valid_fraction must lie in [0, 1]");
  std::vector<std::size_t> order(groups.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng::Engine e(seed);
  rng::shuffle(order, e);
  const auto n_valid = static_cast<std::size_t>(std::ceil(valid_fraction * static_cast<double>(groups.size())));
  std::vector<bool> is_valid(groups.size(), false);
  for (std::size_t i = 0; i < n_valid && i < order.size(); ++i) is_valid[order[i]] = true;
  Split split;
  for (std::size_t i = 0; i < groups.size(); ++i) (is_valid[i] ? split.valid : split.train).push_back(groups[i]);
  return split;
}

void write_native(const std::filesystem::path& path, std::span<const QAGroup> groups) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open corpus file for writing: " + path.string());
  for (const auto& g : groups) {
    for (const auto& ex : g.examples) {
      json rec = {{"group_id", g.group_id}, {"context", ex.context}, {"question", ex.question}, {"answer", ex.answer}};
      os << rec.dump() << '\n';
    }
  }
  if (!os) throw IoError("failed writing corpus file: " + path.string());
}

std::vector<QAGroup> read_native(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open corpus file: " + path.string());
  std::vector<QAGroup> groups;
  std::map<std::string, std::size_t> index;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& err) {
      throw ParseError(where + ": " + err.what());
    }
    for (const char* key : {"group_id", "context", "question", "answer"}) {
      if (!rec.contains(key) || !rec[key].is_string()) throw ParseError(where + ": missing string field '" + key + "'");
    }
    QAExample ex{rec["context"].get<std::string>(), rec["question"].get<std::string>(),
                 rec["answer"].get<std::string>()};
    const auto gid = rec["group_id"].get<std::string>();
    auto it = index.find(gid);
    if (it == index.end()) {
      index.emplace(gid, groups.size());
      groups.push_back(QAGroup{gid, ex.context, {}});
      it = index.find(gid);
    }
    QAGroup& g = groups[it->second];
    if (g.context != ex.context) throw ParseError(where + ": context differs within group " + gid);
    g.examples.push_back(std::move(ex));
  }
  return groups;
}

std::vector<QAGroup> ingest_squad(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open SQuAD file: " + path.string());
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::parse_error& err) {
    throw ParseError(path.string() + ": " + err.what());
  }
  auto need_array = [&](const json& obj, const char* key, const std::string& where) -> const json& {
    if (!obj.is_object() || !obj.contains(key) || !obj[key].is_array()) {
      throw ParseError(path.string() + ": " + where + ": missing '" + key + "' array");
    }
    return obj[key];
  };
  auto need_string = [&](const json& obj, const char* key, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key) || !obj[key].is_string()) {
      throw ParseError(path.string() + ": " + where + ": missing '" + key + "' string");
    }
    return obj[key].get<std::string>();
  };

  std::vector<QAGroup> groups;
  const json& data = need_array(doc, "data", "root");
  for (std::size_t a = 0; a < data.size(); ++a) {
    const std::string art = "data[" + std::to_string(a) + "]";
    const json& paragraphs = need_array(data[a], "paragraphs", art);
    for (std::size_t p = 0; p < paragraphs.size(); ++p) {
      const std::string par = art + ".paragraphs[" + std::to_string(p) + "]";
      QAGroup g;
      g.group_id = "squad-" + std::to_string(a) + "-" + std::to_string(p);
      g.context = need_string(paragraphs[p], "context", par);
      const json& qas = need_array(paragraphs[p], "qas", par);
      for (std::size_t q = 0; q < qas.size(); ++q) {
        const std::string qa = par + ".qas[" + std::to_string(q) + "]";
        const json& answers = need_array(qas[q], "answers", qa);
        if (answers.empty()) throw ParseError(path.string() + ": " + qa + ": empty 'answers' array");
        g.examples.push_back(QAExample{g.context, need_string(qas[q], "question", qa),
                                       need_string(answers[0], "text", qa + ".answers[0]")});
      }
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

}  // namespace gradsae::data
