#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradsae/datagen.hpp"
#include "gradsae/influence.hpp"
#include "gradsae/sae.hpp"
#include "gradsae/toylm.hpp"

// Masking experiment: zero the selected latents at every token while the
// spliced model decodes, and score how much of the answer survives.
namespace gradsae::perturb {

using influence::KSpec;
using influence::Method;
using num::Matrix;

enum class SetKind { topk, bottomk };

std::string_view set_kind_name(SetKind k);

// One question of the evaluation set, tokenized with its gold answer.
struct Example {
  std::string id;  // "<group_id>-q<index>"
  std::string group_id;
  data::QAExample qa;
  lm::TokenSeq seq;
};

std::vector<Example> make_examples(const lm::Vocab& vocab, std::span<const data::QAGroup> groups);

struct RunOptions {
  std::size_t max_new_tokens = 8;
  std::size_t threads = 1;
  influence::ValueMode value_mode = influence::ValueMode::mean;
};

// Spliced greedy decode of the example's prompt under an optional latent edit,
// returned as text.
std::string decode_answer(const lm::LanguageModel& model, const sae::SAEParams& sae, const Example& ex,
                          const lm::LatentEdit& edit, const RunOptions& opt);

struct FilterResult {
  std::vector<Example> kept;
  std::size_t dropped = 0;
};

// Keeps examples the unedited spliced model answers exactly. Throws
// ExperimentError when nothing survives.
FilterResult filter_correct(std::span<const Example> examples, const lm::LanguageModel& model,
                            const sae::SAEParams& sae, const RunOptions& opt);

struct MaskPlan {
  std::string example_id;
  Method method = Method::gradsae;
  SetKind set_kind = SetKind::topk;
  KSpec k_spec;
  std::vector<std::size_t> indices;
};

MaskPlan make_plan(const Example& ex, Method method, SetKind kind, const KSpec& k,
                   const influence::LatentSelection& sel);

struct Cell {
  double em_sum = 0.0;
  double f1_sum = 0.0;
  std::size_t count = 0;
  std::size_t skipped = 0;
  double k_sum = 0.0;  // resolved K (before exhaustion), summed over scored examples

  double em() const { return count == 0 ? 0.0 : 100.0 * em_sum / static_cast<double>(count); }
  double f1() const { return count == 0 ? 0.0 : 100.0 * f1_sum / static_cast<double>(count); }
  double mean_k() const { return count == 0 ? 0.0 : k_sum / static_cast<double>(count); }
};

struct CellKey {
  Method method;
  SetKind set_kind;
  std::size_t k_index;

  friend auto operator<=>(const CellKey&, const CellKey&) = default;
};

struct PerturbReport {
  std::vector<Method> methods;
  std::vector<KSpec> k_grid;
  std::size_t examples = 0;
  double unperturbed_em = 0.0;
  double unperturbed_f1 = 0.0;
  std::map<CellKey, Cell> cells;

  const Cell& at(Method m, SetKind s, std::size_t k_index) const;
};

// Every example is scored for each method, set kind and K. An example whose
// selection is empty for a method counts as skipped in that method's cells.
PerturbReport run_perturbation(std::span<const Example> examples, const lm::LanguageModel& model,
                               const sae::SAEParams& sae, std::span<const Method> methods,
                               std::span<const KSpec> k_grid, const RunOptions& opt);

// Rows method × set kind; columns w/o-Task then EM and F1 per K.
void write_tsv(std::ostream& os, const PerturbReport& r, std::span<const std::string> header_comments);

}  // namespace gradsae::perturb
