#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradsae/numcore/matrix.hpp"
#include "gradsae/sae.hpp"
#include "gradsae/toylm.hpp"

// Latent influence on the gold answer's log-likelihood p(Y|H), where H is the
// SAE code of the teacher-forced sequence at the SAE's layer. Rows of H that
// belong to the prompt are the ones scored and aggregated.
namespace gradsae::influence {

using num::Matrix;

enum class Method { gradsae, baseline };

std::string_view method_name(Method m);
Method parse_method(std::string_view s);  // ParseError on unknown names

// Latent codes and gold objective of one example.
struct ExampleLatents {
  Matrix h;                     // one row per teacher-forced input token
  std::size_t prompt_rows = 0;  // leading rows that belong to the prompt
  double objective = 0.0;       // p(Y|H), a sum of log-probabilities

  Matrix prompt_h() const { return num::slice_rows(h, 0, prompt_rows); }
};

ExampleLatents example_latents(const lm::LanguageModel& model, const sae::SAEParams& sae, const lm::TokenSeq& seq);

// g_{n,c} = (∂p(Y|H)/∂H_{n,c}) · H_{n,c} over the prompt rows (N×C).
struct InfluenceMatrix {
  Matrix g;
};

InfluenceMatrix grad_influence(const lm::LanguageModel& model, const sae::SAEParams& sae, const lm::TokenSeq& seq,
                               const ExampleLatents& latents);
InfluenceMatrix grad_influence(const lm::LanguageModel& model, const sae::SAEParams& sae, const lm::TokenSeq& seq);

// p(Y|H) − p(Y|H with entry (n, c) zeroed), from two spliced forwards.
double exact_ablation(const lm::LanguageModel& model, const sae::SAEParams& sae, const lm::TokenSeq& seq,
                      const ExampleLatents& latents, std::size_t n, std::size_t c);

// p(Y|H) − p(Y|H with latent c zeroed on every prompt row). To first order
// this is Σ_n g_{n,c}.
double column_ablation(const lm::LanguageModel& model, const sae::SAEParams& sae, const lm::TokenSeq& seq,
                       const ExampleLatents& latents, std::size_t c);

struct InfluenceVector {
  std::vector<double> g;
  Method method = Method::gradsae;
};

// Column mean of G.
InfluenceVector aggregate(const InfluenceMatrix& g);
// Column mean of the prompt activations; entrywise ≥ 0.
InfluenceVector baseline_influence(const Matrix& h_prompt);

// Influence of either method for one example.
InfluenceVector influence_for(Method m, const lm::LanguageModel& model, const sae::SAEParams& sae,
                              const lm::TokenSeq& seq, const ExampleLatents& latents);

// Fixed K, or half the active latents of the last prompt token (rounded up,
// at least 1).
struct KSpec {
  std::size_t k = 10;
  bool half = false;

  static KSpec fixed(std::size_t k) { return {k, false}; }
  static KSpec half_nonzero() { return {0, true}; }
  std::string to_string() const;
  friend bool operator==(const KSpec&, const KSpec&) = default;
};

KSpec parse_kspec(std::string_view s);  // "10" or "half"
std::vector<KSpec> parse_kgrid(std::string_view s);  // comma separated
std::size_t resolve_k(const KSpec& spec, const Matrix& h_prompt);

// Value carried along with each selected latent (used for injection).
enum class ValueMode { mean, last_token };

std::string_view value_mode_name(ValueMode m);
ValueMode parse_value_mode(std::string_view s);

struct LatentSelection {
  std::vector<std::size_t> z_high;  // descending g
  std::vector<std::size_t> z_low;   // ascending g
  std::vector<double> high_values;  // aligned with z_high
  std::vector<double> low_values;   // aligned with z_low
  std::size_t k = 0;                // resolved K before exhaustion
  std::size_t nonzero = 0;          // |Z_NZ|

  friend bool operator==(const LatentSelection&, const LatentSelection&) = default;
};

// Top-k and bottom-k of g restricted to Z_NZ = {c : g_c > 0}, ties broken by
// ascending latent index. Throws SelectionError when Z_NZ is empty.
LatentSelection select(const InfluenceVector& g, const KSpec& spec, const Matrix& h_prompt,
                       ValueMode mode = ValueMode::mean);

// Outcome of the scaling sweep behind the first-order check. Each sample
// contributes error(s/2)/error(s) for consecutive scales.
struct TaylorResult {
  double median_ratio = 0.0;
  std::size_t ratios = 0;
  std::size_t skipped = 0;    // ratios whose error(s) was at rounding level
  bool exact_linear = false;  // every ratio skipped; median_ratio is 0
};

// One sampled entry: g is the first-order estimate of delta(1), and delta(s)
// is the exact change when the entry is scaled down by the fraction s.
struct TaylorProbe {
  double g = 0.0;
  std::function<double(double s)> delta;
};

inline constexpr double kDefaultScales[] = {1.0, 0.5, 0.25};

// error(s) = |delta(s) − g·s|. scales must halve from one to the next.
TaylorResult taylor_convergence(std::span<const TaylorProbe> probes,
                                std::span<const double> scales = kDefaultScales);

struct Entry {
  std::size_t n = 0;
  std::size_t c = 0;
};

TaylorResult taylor_convergence(const lm::LanguageModel& model, const sae::SAEParams& sae, const lm::TokenSeq& seq,
                                const ExampleLatents& latents, const InfluenceMatrix& g,
                                std::span<const Entry> samples);

// One line per nonzero score: example_id, method, latent, g_c.
void write_influence_dump(std::ostream& os, std::string_view example_id, const InfluenceVector& g);

}  // namespace gradsae::influence
