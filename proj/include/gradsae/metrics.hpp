#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// SQuAD-style answer scoring and latent-set overlap statistics.
namespace gradsae::metrics {

// Lowercased tokens with ASCII punctuation removed and the articles
// a / an / the dropped.
using NormalizedAnswer = std::vector<std::string>;

NormalizedAnswer normalize(std::string_view text);

int exact_match(std::string_view pred, std::string_view gold);

// Clipped multiset overlap F1. Both empty → 1, exactly one empty → 0.
double token_f1(std::string_view pred, std::string_view gold);
double token_f1(const NormalizedAnswer& pred, const NormalizedAnswer& gold);

// |a ∩ b| / |a| in percent; 0 when a is empty. Inputs need not be sorted.
double overlap_percent(std::span<const std::size_t> a, std::span<const std::size_t> b);

// TopK / BottomK sets of one example under both selection methods.
struct ExampleSelections {
  std::string group_id;
  std::vector<std::size_t> baseline_high;
  std::vector<std::size_t> baseline_low;
  std::vector<std::size_t> gradsae_high;
  std::vector<std::size_t> gradsae_low;
};

struct OverlapReport {
  // Mean over examples of |baseline ∩ gradsae| / |baseline|.
  double cross_top = 0.0;
  double cross_bottom = 0.0;
  // Mean over ordered pairs (i ≠ j) of questions sharing a context of
  // |S_i ∩ S_j| / |S_i|, pooled over all contexts.
  double inner_top_baseline = 0.0;
  double inner_top_gradsae = 0.0;
  double inner_bottom_baseline = 0.0;
  double inner_bottom_gradsae = 0.0;
  std::size_t examples = 0;
  std::size_t inner_pairs = 0;
  std::size_t contexts_skipped = 0;  // fewer than two questions
};

OverlapReport overlap_stats(std::span<const ExampleSelections> selections);

}  // namespace gradsae::metrics
