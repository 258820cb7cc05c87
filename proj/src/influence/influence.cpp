#include "gradsae/influence.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "gradsae/error.hpp"

namespace gradsae::influence {

std::string_view method_name(Method m) { return m == Method::gradsae ? "gradsae" : "baseline"; }

Method parse_method(std::string_view s) {
  if (s == "gradsae") return Method::gradsae;
  if (s == "baseline") return Method::baseline;
  throw ParseError("unknown method '" + std::string(s) + "' (expected gradsae or baseline)");
}

ExampleLatents example_latents(const lm::LanguageModel& model, const sae::SAEParams& sae, const lm::TokenSeq& seq) {
  ExampleLatents out;
  out.h = lm::teacher_forced_latents(model, seq, sae);
  out.prompt_rows = seq.prompt_len;
  out.objective = lm::objective(model, seq, out.h, sae);
  return out;
}

InfluenceMatrix grad_influence(const lm::LanguageModel& model, const sae::SAEParams& sae, const lm::TokenSeq& seq,
                               const ExampleLatents& latents) {
  const auto og = lm::objective_with_grad(model, seq, latents.h, sae);
  InfluenceMatrix out{Matrix(latents.prompt_rows, latents.h.cols())};
  for (std::size_t n = 0; n < latents.prompt_rows; ++n) {
    for (std::size_t c = 0; c < latents.h.cols(); ++c) {
      const double h = latents.h(n, c);
      // An inactive latent has no influence by definition, whatever its gradient.
      out.g(n, c) = h == 0.0 ? 0.0 : og.grad_h(n, c) * h;
    }
  }
  return out;
}

InfluenceMatrix grad_influence(const lm::LanguageModel& model, const sae::SAEParams& sae, const lm::TokenSeq& seq) {
  return grad_influence(model, sae, seq, example_latents(model, sae, seq));
}

namespace {

void check_entry(const ExampleLatents& latents, std::size_t n, std::size_t c) {
  if (n >= latents.prompt_rows || c >= latents.h.cols()) {
    throw IndexError("entry (" + std::to_string(n) + ", " + std::to_string(c) + ") outside " +
                     std::to_string(latents.prompt_rows) + "x" + std::to_string(latents.h.cols()));
  }
}

}  // namespace

double exact_ablation(const lm::LanguageModel& model, const sae::SAEParams& sae, const lm::TokenSeq& seq,
                      const ExampleLatents& latents, std::size_t n, std::size_t c) {
  check_entry(latents, n, c);
  if (latents.h(n, c) == 0.0) return 0.0;
  Matrix h = latents.h;
  h(n, c) = 0.0;
  return latents.objective - lm::objective(model, seq, h, sae);
}

double column_ablation(const lm::LanguageModel& model, const sae::SAEParams& sae, const lm::TokenSeq& seq,
                       const ExampleLatents& latents, std::size_t c) {
  check_entry(latents, 0, c);
  Matrix h = latents.h;
  bool changed = false;
  for (std::size_t n = 0; n < latents.prompt_rows; ++n) {
    changed = changed || h(n, c) != 0.0;
    h(n, c) = 0.0;
  }
  if (!changed) return 0.0;
  return latents.objective - lm::objective(model, seq, h, sae);
}

InfluenceVector aggregate(const InfluenceMatrix& g) {
  if (g.g.rows() == 0) throw InputError("aggregate: influence matrix has no rows");
  return {num::column_mean(g.g), Method::gradsae};
}

InfluenceVector baseline_influence(const Matrix& h_prompt) {
  if (h_prompt.rows() == 0) throw InputError("baseline_influence: no activation rows");
  return {num::column_mean(h_prompt), Method::baseline};
}

InfluenceVector influence_for(Method m, const lm::LanguageModel& model, const sae::SAEParams& sae,
                              const lm::TokenSeq& seq, const ExampleLatents& latents) {
  if (m == Method::baseline) return baseline_influence(latents.prompt_h());
  return aggregate(grad_influence(model, sae, seq, latents));
}

std::string KSpec::to_string() const { return half ? "half" : std::to_string(k); }

KSpec parse_kspec(std::string_view s) {
  if (s == "half") return KSpec::half_nonzero();
  std::size_t k = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), k);
  if (ec != std::errc() || ptr != s.data() + s.size() || k == 0) {
    throw ParseError("bad K '" + std::string(s) + "' (expected a positive integer or 'half')");
  }
  return KSpec::fixed(k);
}

std::vector<KSpec> parse_kgrid(std::string_view s) {
  std::vector<KSpec> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t end = std::min(s.find(',', start), s.size());
    out.push_back(parse_kspec(s.substr(start, end - start)));
    start = end + 1;
  }
  return out;
}

std::size_t resolve_k(const KSpec& spec, const Matrix& h_prompt) {
  if (!spec.half) return spec.k;
  if (h_prompt.rows() == 0) throw InputError("resolve_k: no prompt rows");
  const std::size_t nnz = sae::row_nonzeros(h_prompt, h_prompt.rows() - 1);
  return std::max<std::size_t>(1, (nnz + 1) / 2);
}

std::string_view value_mode_name(ValueMode m) { return m == ValueMode::mean ? "mean" : "last_token"; }

ValueMode parse_value_mode(std::string_view s) {
  if (s == "mean") return ValueMode::mean;
  if (s == "last_token") return ValueMode::last_token;
  throw ParseError("unknown value mode '" + std::string(s) + "' (expected mean or last_token)");
}

LatentSelection select(const InfluenceVector& g, const KSpec& spec, const Matrix& h_prompt, ValueMode mode) {
  if (h_prompt.cols() != g.g.size()) {
    throw ShapeError("select: influence length " + std::to_string(g.g.size()) + " vs activations " +
                     h_prompt.shape_string());
  }
  std::vector<std::size_t> nz;
  for (std::size_t c = 0; c < g.g.size(); ++c) {
    if (g.g[c] > 0.0) nz.push_back(c);
  }
  if (nz.empty()) throw SelectionError("select: no latent has positive influence");

  LatentSelection s;
  s.k = resolve_k(spec, h_prompt);
  s.nonzero = nz.size();
  const std::size_t take = std::min(s.k, nz.size());

  auto high = nz;
  std::stable_sort(high.begin(), high.end(), [&](std::size_t a, std::size_t b) { return g.g[a] > g.g[b]; });
  s.z_high.assign(high.begin(), high.begin() + static_cast<std::ptrdiff_t>(take));
  auto low = nz;
  std::stable_sort(low.begin(), low.end(), [&](std::size_t a, std::size_t b) { return g.g[a] < g.g[b]; });
  s.z_low.assign(low.begin(), low.begin() + static_cast<std::ptrdiff_t>(take));

  const std::vector<double> means = num::column_mean(h_prompt);
  auto value = [&](std::size_t c) {
    return mode == ValueMode::mean ? means[c] : h_prompt(h_prompt.rows() - 1, c);
  };
  for (std::size_t c : s.z_high) s.high_values.push_back(value(c));
  for (std::size_t c : s.z_low) s.low_values.push_back(value(c));
  return s;
}

namespace {

// Below this an error is indistinguishable from rounding in p(Y|H).
constexpr double kErrorFloor = 1e-13;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

TaylorResult taylor_convergence(std::span<const TaylorProbe> probes, std::span<const double> scales) {
  if (probes.empty()) throw InputError("taylor_convergence: no samples");
  if (scales.size() < 2) throw InputError("taylor_convergence: need at least two scales");
  for (std::size_t i = 0; i + 1 < scales.size(); ++i) {
    if (!(scales[i] > 0.0) || scales[i + 1] != scales[i] / 2.0) {
      throw InputError("taylor_convergence: scales must be positive and halve at each step");
    }
  }
  TaylorResult r;
  std::vector<double> ratios;
  for (const auto& p : probes) {
    std::vector<double> err;
    for (double s : scales) err.push_back(std::fabs(p.delta(s) - p.g * s));
    for (std::size_t i = 0; i + 1 < err.size(); ++i) {
      if (err[i] < kErrorFloor) {
        ++r.skipped;
        continue;
      }
      ratios.push_back(err[i + 1] / err[i]);
    }
  }
  r.ratios = ratios.size();
  if (ratios.empty()) {
    r.exact_linear = true;
    return r;
  }
  r.median_ratio = median(std::move(ratios));
  return r;
}

TaylorResult taylor_convergence(const lm::LanguageModel& model, const sae::SAEParams& sae, const lm::TokenSeq& seq,
                                const ExampleLatents& latents, const InfluenceMatrix& g,
                                std::span<const Entry> samples) {
  std::vector<TaylorProbe> probes;
  for (const auto& e : samples) {
    check_entry(latents, e.n, e.c);
    if (!(latents.h(e.n, e.c) > 0.0)) {
      throw InputError("taylor_convergence: sampled entry (" + std::to_string(e.n) + ", " + std::to_string(e.c) +
                       ") is not active");
    }
    probes.push_back({g.g(e.n, e.c), [&, e](double s) {
                        Matrix h = latents.h;
                        h(e.n, e.c) *= 1.0 - s;
                        return latents.objective - lm::objective(model, seq, h, sae);
                      }});
  }
  return taylor_convergence(probes);
}

void write_influence_dump(std::ostream& os, std::string_view example_id, const InfluenceVector& g) {
  char buf[64];
  for (std::size_t c = 0; c < g.g.size(); ++c) {
    if (g.g[c] == 0.0) continue;
    std::snprintf(buf, sizeof buf, "%.17g", g.g[c]);
    os << example_id << '\t' << method_name(g.method) << '\t' << c << '\t' << buf << '\n';
  }
}

}  // namespace gradsae::influence
