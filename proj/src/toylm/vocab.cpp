#include <algorithm>
#include <map>

#include "gradsae/error.hpp"
#include "gradsae/rng.hpp"
#include "gradsae/toylm.hpp"

namespace gradsae::lm {

Vocab::Vocab() : words_{"<pad>", "<unk>", "<eos>"} {
  for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<int>(i));
}

Vocab Vocab::from_words(std::vector<std::string> words) {
  Vocab v;
  for (auto& w : words) {
    if (w == "<pad>" || w == "<unk>" || w == "<eos>") continue;
    if (!v.index_.emplace(w, static_cast<int>(v.words_.size())).second) {
      throw VocabError("duplicate vocabulary word '" + w + "'");
    }
    v.words_.push_back(std::move(w));
  }
  return v;
}

Vocab Vocab::build(std::span<const data::QAGroup> groups, std::size_t max_size) {
  if (max_size < 4) throw VocabError("vocabulary limit must leave room for at least one word");
  std::map<std::string, std::size_t> counts;
  for (const auto& g : groups) {
    for (const auto& w : data::split_words(g.context)) ++counts[w];
    for (const auto& ex : g.examples) {
      for (const auto& w : data::split_words(ex.question)) ++counts[w];
      for (const auto& w : data::split_words(ex.answer)) ++counts[w];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  const std::size_t room = max_size - 3;
  if (ranked.size() > room) {
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    ranked.resize(room);
    std::sort(ranked.begin(), ranked.end());
  }
  std::vector<std::string> words;
  words.reserve(ranked.size());
  for (auto& [w, c] : ranked) words.push_back(w);
  return from_words(std::move(words));
}

int Vocab::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw VocabError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(words_.size()));
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& w : data::split_words(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (int t : ids) {
    if (t == kEos) break;
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

TokenSeq make_prompt(const Vocab& vocab, const data::QAExample& ex) {
  TokenSeq s;
  s.ids = vocab.encode(ex.context);
  const auto q = vocab.encode(ex.question);
  s.ids.insert(s.ids.end(), q.begin(), q.end());
  s.prompt_len = s.ids.size();
  return s;
}

TokenSeq make_example(const Vocab& vocab, const data::QAExample& ex) {
  TokenSeq s = make_prompt(vocab, ex);
  const auto a = vocab.encode(ex.answer);
  s.ids.insert(s.ids.end(), a.begin(), a.end());
  s.ids.push_back(Vocab::kEos);
  s.answer_len = a.size() + 1;
  return s;
}

std::size_t TrainSeq::target_count() const {
  std::size_t n = 0;
  for (const auto& [b, e] : spans) n += e - b;
  return n;
}

TrainSeq to_train_seq(const TokenSeq& seq) {
  if (seq.prompt_len == 0 || seq.answer_len == 0) throw InputError("to_train_seq: sequence needs a prompt and answer");
  return TrainSeq{seq.ids, {{seq.prompt_len, seq.prompt_len + seq.answer_len}}};
}

TrainSeq make_packed(const Vocab& vocab, const data::QAGroup& group, std::uint64_t seed) {
  if (group.examples.empty()) throw InputError("make_packed: group " + group.group_id + " has no questions");
  std::vector<std::size_t> order(group.examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng::Engine e(seed);
  rng::shuffle(order, e);
  TrainSeq s;
  s.ids = vocab.encode(group.context);
  for (std::size_t i : order) {
    const auto& ex = group.examples[i];
    const std::size_t begin = s.ids.size();
    const auto q = vocab.encode(ex.question);
    s.ids.insert(s.ids.end(), q.begin(), q.end());
    const auto a = vocab.encode(ex.answer);
    s.ids.insert(s.ids.end(), a.begin(), a.end());
    s.ids.push_back(Vocab::kEos);
    s.spans.emplace_back(begin, s.ids.size());
  }
  return s;
}

std::vector<int> teacher_forced_input(const TokenSeq& seq) {
  if (seq.answer_len == 0) throw InputError("teacher_forced_input: sequence has no answer");
  return {seq.ids.begin(), seq.ids.end() - 1};
}

}  // namespace gradsae::lm
