#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gradsae/influence.hpp"
#include "gradsae/perturb.hpp"

// Local steering: within one context, swap a question's own top latents for
// those of a different question and check whether the model now produces the
// other question's answer.
namespace gradsae::steer {

using influence::KSpec;
using influence::Method;
using num::Matrix;
using perturb::Example;
using perturb::SetKind;

// Indices into the example list the pairs were built from.
struct SteerPair {
  std::size_t target = 0;
  std::size_t donor = 0;

  friend bool operator==(const SteerPair&, const SteerPair&) = default;
};

struct PairBuild {
  std::vector<SteerPair> pairs;
  std::size_t skipped = 0;  // targets with no other question on their context
};

// One pair per target; the donor is drawn uniformly from the other examples
// of the same group, in example order, from a generator seeded with seed.
PairBuild build_steer_pairs(std::span<const Example> examples, std::uint64_t seed);

// Copy of h with own_high zeroed at every row, then donor_high overwritten
// with donor_values at every row.
Matrix inject_latents(const Matrix& h, std::span<const std::size_t> own_high, std::span<const std::size_t> donor_high,
                      std::span<const double> donor_values);

struct SteerReport {
  std::vector<Method> methods;
  std::vector<KSpec> k_grid;
  std::size_t pairs = 0;           // retained pairs
  std::size_t dropped_overlap = 0; // unsteered output already scored against the donor answer
  std::size_t skipped_targets = 0; // from pair building
  double unsteered_em = 0.0;       // against the donor answer, on retained pairs
  double unsteered_f1 = 0.0;
  std::map<perturb::CellKey, perturb::Cell> cells;

  const perturb::Cell& at(Method m, SetKind s, std::size_t k_index) const;
};

SteerReport run_local_steering(std::span<const Example> examples, const PairBuild& pairs,
                               const lm::LanguageModel& model, const sae::SAEParams& sae,
                               std::span<const Method> methods, std::span<const KSpec> k_grid,
                               const perturb::RunOptions& opt);

void write_tsv(std::ostream& os, const SteerReport& r, std::span<const std::string> header_comments);

}  // namespace gradsae::steer
