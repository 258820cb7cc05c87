#include "gradsae/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>

namespace gradsae::metrics {

NormalizedAnswer normalize(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (uc < 128 && std::ispunct(uc)) continue;
    cleaned.push_back(static_cast<char>(uc < 128 ? std::tolower(uc) : uc));
  }
  NormalizedAnswer out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty() && cur != "a" && cur != "an" && cur != "the") out.push_back(cur);
    cur.clear();
  };
  for (char ch : cleaned) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      cur.push_back(ch);
    }
  }
  flush();
  return out;
}

int exact_match(std::string_view pred, std::string_view gold) { return normalize(pred) == normalize(gold) ? 1 : 0; }

double token_f1(const NormalizedAnswer& pred, const NormalizedAnswer& gold) {
  if (pred.empty() && gold.empty()) return 1.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : gold) ++counts[t];
  int common = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(common) / static_cast<double>(gold.size());
  return 2.0 * precision * recall / (precision + recall);
}

double token_f1(std::string_view pred, std::string_view gold) { return token_f1(normalize(pred), normalize(gold)); }

double overlap_percent(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.empty()) return 0.0;
  const std::set<std::size_t> sb(b.begin(), b.end());
  const std::set<std::size_t> sa(a.begin(), a.end());
  std::size_t hit = 0;
  for (std::size_t x : sa) hit += sb.count(x);
  return 100.0 * static_cast<double>(hit) / static_cast<double>(sa.size());
}

OverlapReport overlap_stats(std::span<const ExampleSelections> selections) {
  OverlapReport r;
  r.examples = selections.size();
  if (selections.empty()) return r;
  for (const auto& s : selections) {
    r.cross_top += overlap_percent(s.baseline_high, s.gradsae_high);
    r.cross_bottom += overlap_percent(s.baseline_low, s.gradsae_low);
  }
  r.cross_top /= static_cast<double>(selections.size());
  r.cross_bottom /= static_cast<double>(selections.size());

  std::map<std::string, std::vector<const ExampleSelections*>> by_group;
  for (const auto& s : selections) by_group[s.group_id].push_back(&s);
  for (const auto& [gid, members] : by_group) {
    if (members.size() < 2) {
      ++r.contexts_skipped;
      continue;
    }
    for (std::size_t i = 0; i < members.size(); ++i) {
      for (std::size_t j = 0; j < members.size(); ++j) {
        if (i == j) continue;
        const auto& a = *members[i];
        const auto& b = *members[j];
        r.inner_top_baseline += overlap_percent(a.baseline_high, b.baseline_high);
        r.inner_top_gradsae += overlap_percent(a.gradsae_high, b.gradsae_high);
        r.inner_bottom_baseline += overlap_percent(a.baseline_low, b.baseline_low);
        r.inner_bottom_gradsae += overlap_percent(a.gradsae_low, b.gradsae_low);
        ++r.inner_pairs;
      }
    }
  }
  if (r.inner_pairs > 0) {
    const double n = static_cast<double>(r.inner_pairs);
    r.inner_top_baseline /= n;
    r.inner_top_gradsae /= n;
    r.inner_bottom_baseline /= n;
    r.inner_bottom_gradsae /= n;
  }
  return r;
}

}  // namespace gradsae::metrics
