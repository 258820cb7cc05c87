#include "gradsae/steer.hpp"

#include <cstdio>
#include <map>
#include <optional>
#include <ostream>

#include "gradsae/error.hpp"
#include "gradsae/metrics.hpp"
#include "gradsae/parallel.hpp"
#include "gradsae/rng.hpp"

namespace gradsae::steer {

PairBuild build_steer_pairs(std::span<const Example> examples, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> by_group;
  for (std::size_t i = 0; i < examples.size(); ++i) by_group[examples[i].group_id].push_back(i);
  rng::Engine e(seed);
  PairBuild out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& members = by_group[examples[i].group_id];
    std::vector<std::size_t> others;
    for (std::size_t j : members) {
      if (j != i && examples[j].qa.question != examples[i].qa.question) others.push_back(j);
    }
    if (others.empty()) {
      ++out.skipped;
      continue;
    }
    out.pairs.push_back({i, others[rng::uniform_index(e, others.size())]});
  }
  return out;
}

Matrix inject_latents(const Matrix& h, std::span<const std::size_t> own_high, std::span<const std::size_t> donor_high,
                      std::span<const double> donor_values) {
  if (donor_high.size() != donor_values.size()) {
    throw InputError("inject_latents: " + std::to_string(donor_high.size()) + " donor latents but " +
                     std::to_string(donor_values.size()) + " values");
  }
  for (std::size_t c : donor_high) {
    if (c >= h.cols()) {
      throw IndexError("inject_latents: latent " + std::to_string(c) + " outside [0, " + std::to_string(h.cols()) +
                       ")");
    }
  }
  Matrix out = sae::mask_latents(h, own_high);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t j = 0; j < donor_high.size(); ++j) out(r, donor_high[j]) = donor_values[j];
  }
  return out;
}

const perturb::Cell& SteerReport::at(Method m, SetKind s, std::size_t k_index) const {
  auto it = cells.find({m, s, k_index});
  if (it == cells.end()) throw InputError("steer report has no cell for the requested method/K");
  return it->second;
}

namespace {

using Selections = std::vector<std::optional<influence::LatentSelection>>;  // [method][k] flattened

Selections selections_for(const Example& ex, const lm::LanguageModel& model, const sae::SAEParams& sae,
                          std::span<const Method> methods, std::span<const KSpec> k_grid,
                          influence::ValueMode mode) {
  const auto latents = influence::example_latents(model, sae, ex.seq);
  const Matrix h_prompt = latents.prompt_h();
  Selections out;
  for (Method m : methods) {
    const auto g = influence::influence_for(m, model, sae, ex.seq, latents);
    for (const auto& k : k_grid) {
      try {
        out.emplace_back(influence::select(g, k, h_prompt, mode));
      } catch (const SelectionError&) {
        out.emplace_back(std::nullopt);
      }
    }
  }
  return out;
}

struct Outcome {
  perturb::CellKey key;
  bool skipped = false;
  double em = 0.0;
  double f1 = 0.0;
  std::size_t k = 0;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

SteerReport run_local_steering(std::span<const Example> examples, const PairBuild& pairs,
                               const lm::LanguageModel& model, const sae::SAEParams& sae,
                               std::span<const Method> methods, std::span<const KSpec> k_grid,
                               const perturb::RunOptions& opt) {
  SteerReport r;
  r.methods.assign(methods.begin(), methods.end());
  r.k_grid.assign(k_grid.begin(), k_grid.end());
  r.skipped_targets = pairs.skipped;
  for (const auto& p : pairs.pairs) {
    if (p.target >= examples.size() || p.donor >= examples.size()) {
      throw IndexError("run_local_steering: pair refers outside the example list");
    }
  }

  std::vector<char> used(examples.size(), 0);
  for (const auto& p : pairs.pairs) used[p.target] = used[p.donor] = 1;
  std::vector<Selections> sel(examples.size());
  std::vector<std::string> unsteered(examples.size());
  parallel_for(examples.size(), opt.threads, [&](std::size_t i) {
    if (!used[i]) return;
    sel[i] = selections_for(examples[i], model, sae, methods, k_grid, opt.value_mode);
    unsteered[i] = perturb::decode_answer(model, sae, examples[i], {}, opt);
  });

  std::vector<std::size_t> retained;
  for (std::size_t p = 0; p < pairs.pairs.size(); ++p) {
    const auto& pr = pairs.pairs[p];
    const auto& donor_answer = examples[pr.donor].qa.answer;
    const std::string& base = unsteered[pr.target];
    if (metrics::exact_match(base, donor_answer) != 0 || metrics::token_f1(base, donor_answer) != 0.0) {
      ++r.dropped_overlap;
      continue;
    }
    retained.push_back(p);
  }
  if (retained.empty()) throw ExperimentError("run_local_steering: no steering pair survives the unsteered check");
  r.pairs = retained.size();

  std::vector<std::vector<Outcome>> outcomes(retained.size());
  parallel_for(retained.size(), opt.threads, [&](std::size_t ri) {
    const auto& pr = pairs.pairs[retained[ri]];
    const Example& target = examples[pr.target];
    const std::string& gold = examples[pr.donor].qa.answer;
    std::map<std::pair<std::vector<std::size_t>, std::vector<double>>, std::string> memo;
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      for (std::size_t ki = 0; ki < k_grid.size(); ++ki) {
        const auto& own = sel[pr.target][mi * k_grid.size() + ki];
        const auto& donor = sel[pr.donor][mi * k_grid.size() + ki];
        for (SetKind kind : {SetKind::topk, SetKind::bottomk}) {
          Outcome o{{methods[mi], kind, ki}};
          if (!own || !donor) {
            o.skipped = true;
            outcomes[ri].push_back(o);
            continue;
          }
          const bool top = kind == SetKind::topk;
          const auto& own_idx = top ? own->z_high : own->z_low;
          const auto& donor_idx = top ? donor->z_high : donor->z_low;
          const auto& donor_val = top ? donor->high_values : donor->low_values;
          auto key = std::make_pair(own_idx, donor_val);
          key.first.push_back(static_cast<std::size_t>(-1));
          key.first.insert(key.first.end(), donor_idx.begin(), donor_idx.end());
          auto it = memo.find(key);
          if (it == memo.end()) {
            const auto edit = [&](const Matrix& h) { return inject_latents(h, own_idx, donor_idx, donor_val); };
            it = memo.emplace(std::move(key), perturb::decode_answer(model, sae, target, edit, opt)).first;
          }
          o.em = metrics::exact_match(it->second, gold);
          o.f1 = metrics::token_f1(it->second, gold);
          o.k = own->k;
          outcomes[ri].push_back(o);
        }
      }
    }
  });

  for (Method m : methods) {
    for (std::size_t ki = 0; ki < k_grid.size(); ++ki) {
      for (SetKind kind : {SetKind::topk, SetKind::bottomk}) r.cells[{m, kind, ki}] = perturb::Cell{};
    }
  }
  for (std::size_t ri = 0; ri < retained.size(); ++ri) {
    const auto& pr = pairs.pairs[retained[ri]];
    r.unsteered_em += metrics::exact_match(unsteered[pr.target], examples[pr.donor].qa.answer);
    r.unsteered_f1 += metrics::token_f1(unsteered[pr.target], examples[pr.donor].qa.answer);
    for (const auto& o : outcomes[ri]) {
      auto& c = r.cells[o.key];
      if (o.skipped) {
        ++c.skipped;
        continue;
      }
      c.em_sum += o.em;
      c.f1_sum += o.f1;
      c.k_sum += static_cast<double>(o.k);
      ++c.count;
    }
  }
  r.unsteered_em *= 100.0 / static_cast<double>(r.pairs);
  r.unsteered_f1 *= 100.0 / static_cast<double>(r.pairs);
  return r;
}

void write_tsv(std::ostream& os, const SteerReport& r, std::span<const std::string> header_comments) {
  for (const auto& h : header_comments) os << "# " << h << '\n';
  os << "# pairs=" << r.pairs << " dropped_overlap=" << r.dropped_overlap << " skipped_targets=" << r.skipped_targets
     << '\n';
  os << "method\tset\tw/o_task_em\tw/o_task_f1";
  for (const auto& k : r.k_grid) os << "\tk=" << k.to_string() << "_em\tk=" << k.to_string() << "_f1";
  os << "\tscored\tskipped\n";
  for (Method m : r.methods) {
    for (SetKind kind : {SetKind::topk, SetKind::bottomk}) {
      os << influence::method_name(m) << '\t' << perturb::set_kind_name(kind) << '\t' << fmt(r.unsteered_em) << '\t'
         << fmt(r.unsteered_f1);
      std::size_t scored = 0, skipped = 0;
      for (std::size_t ki = 0; ki < r.k_grid.size(); ++ki) {
        const auto& c = r.at(m, kind, ki);
        os << '\t' << fmt(c.em()) << '\t' << fmt(c.f1());
        scored = std::max(scored, c.count);
        skipped = std::max(skipped, c.skipped);
      }
      os << '\t' << scored << '\t' << skipped << '\n';
    }
  }
}

}  // namespace gradsae::steer
