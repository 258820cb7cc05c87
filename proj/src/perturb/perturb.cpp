#include "gradsae/perturb.hpp"

#include <algorithm>
#include <cstdio>
#include <optional>
#include <ostream>

#include "gradsae/error.hpp"
#include "gradsae/metrics.hpp"
#include "gradsae/parallel.hpp"

namespace gradsae::perturb {

std::string_view set_kind_name(SetKind k) { return k == SetKind::topk ? "topk" : "bottomk"; }

std::vector<Example> make_examples(const lm::Vocab& vocab, std::span<const data::QAGroup> groups) {
  std::vector<Example> out;
  for (const auto& g : groups) {
    for (std::size_t i = 0; i < g.examples.size(); ++i) {
      out.push_back({g.group_id + "-q" + std::to_string(i), g.group_id, g.examples[i],
                     lm::make_example(vocab, g.examples[i])});
    }
  }
  return out;
}

std::string decode_answer(const lm::LanguageModel& model, const sae::SAEParams& sae, const Example& ex,
                          const lm::LatentEdit& edit, const RunOptions& opt) {
  const lm::Splice splice{&sae, edit};
  const auto r = lm::greedy_decode(model, ex.seq.prompt(), opt.max_new_tokens, &splice);
  return model.vocab.decode(r.tokens);
}

FilterResult filter_correct(std::span<const Example> examples, const lm::LanguageModel& model,
                            const sae::SAEParams& sae, const RunOptions& opt) {
  std::vector<int> ok(examples.size(), 0);
  parallel_for(examples.size(), opt.threads, [&](std::size_t i) {
    ok[i] = metrics::exact_match(decode_answer(model, sae, examples[i], {}, opt), examples[i].qa.answer);
  });
  FilterResult r;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (ok[i] == 1) {
      r.kept.push_back(examples[i]);
    } else {
      ++r.dropped;
    }
  }
  if (r.kept.empty()) {
    throw ExperimentError("no example is answered correctly through the SAE splice; retrain the model or the SAE");
  }
  return r;
}

MaskPlan make_plan(const Example& ex, Method method, SetKind kind, const KSpec& k,
                   const influence::LatentSelection& sel) {
  return {ex.id, method, kind, k, kind == SetKind::topk ? sel.z_high : sel.z_low};
}

const Cell& PerturbReport::at(Method m, SetKind s, std::size_t k_index) const {
  auto it = cells.find({m, s, k_index});
  if (it == cells.end()) throw InputError("perturb report has no cell for the requested method/K");
  return it->second;
}

namespace {

struct Outcome {
  CellKey key;
  bool skipped = false;
  double em = 0.0;
  double f1 = 0.0;
  std::size_t k = 0;
};

std::vector<Outcome> score_example(const Example& ex, const lm::LanguageModel& model, const sae::SAEParams& sae,
                                   std::span<const Method> methods, std::span<const KSpec> k_grid,
                                   const RunOptions& opt) {
  const auto latents = influence::example_latents(model, sae, ex.seq);
  const Matrix h_prompt = latents.prompt_h();
  std::map<std::vector<std::size_t>, std::string> memo;
  auto decode_masked = [&](std::vector<std::size_t> idx) -> const std::string& {
    std::sort(idx.begin(), idx.end());
    auto it = memo.find(idx);
    if (it == memo.end()) {
      const auto edit = [&idx](const Matrix& h) { return sae::mask_latents(h, idx); };
      it = memo.emplace(idx, decode_answer(model, sae, ex, edit, opt)).first;
    }
    return it->second;
  };

  std::vector<Outcome> out;
  for (Method m : methods) {
    const auto g = influence::influence_for(m, model, sae, ex.seq, latents);
    for (std::size_t ki = 0; ki < k_grid.size(); ++ki) {
      std::optional<influence::LatentSelection> sel;
      try {
        sel = influence::select(g, k_grid[ki], h_prompt, opt.value_mode);
      } catch (const SelectionError&) {
      }
      for (SetKind kind : {SetKind::topk, SetKind::bottomk}) {
        Outcome o{{m, kind, ki}};
        if (!sel) {
          o.skipped = true;
        } else {
          const auto plan = make_plan(ex, m, kind, k_grid[ki], *sel);
          const std::string& pred = decode_masked(plan.indices);
          o.em = metrics::exact_match(pred, ex.qa.answer);
          o.f1 = metrics::token_f1(pred, ex.qa.answer);
          o.k = sel->k;
        }
        out.push_back(o);
      }
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

PerturbReport run_perturbation(std::span<const Example> examples, const lm::LanguageModel& model,
                               const sae::SAEParams& sae, std::span<const Method> methods,
                               std::span<const KSpec> k_grid, const RunOptions& opt) {
  if (examples.empty()) throw ExperimentError("run_perturbation: empty example set");
  PerturbReport r;
  r.methods.assign(methods.begin(), methods.end());
  r.k_grid.assign(k_grid.begin(), k_grid.end());
  r.examples = examples.size();

  std::vector<std::vector<Outcome>> per_example(examples.size());
  std::vector<std::string> unperturbed(examples.size());
  parallel_for(examples.size(), opt.threads, [&](std::size_t i) {
    unperturbed[i] = decode_answer(model, sae, examples[i], {}, opt);
    per_example[i] = score_example(examples[i], model, sae, methods, k_grid, opt);
  });

  for (Method m : methods) {
    for (std::size_t ki = 0; ki < k_grid.size(); ++ki) {
      for (SetKind kind : {SetKind::topk, SetKind::bottomk}) r.cells[{m, kind, ki}] = Cell{};
    }
  }
  for (std::size_t i = 0; i < examples.size(); ++i) {
    r.unperturbed_em += metrics::exact_match(unperturbed[i], examples[i].qa.answer);
    r.unperturbed_f1 += metrics::token_f1(unperturbed[i], examples[i].qa.answer);
    for (const auto& o : per_example[i]) {
      Cell& c = r.cells[o.key];
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
  r.unperturbed_em *= 100.0 / static_cast<double>(examples.size());
  r.unperturbed_f1 *= 100.0 / static_cast<double>(examples.size());
  return r;
}

void write_tsv(std::ostream& os, const PerturbReport& r, std::span<const std::string> header_comments) {
  for (const auto& h : header_comments) os << "# " << h << '\n';
  os << "# examples=" << r.examples << '\n';
  os << "method\tset\tw/o_task_em\tw/o_task_f1";
  for (const auto& k : r.k_grid) os << "\tk=" << k.to_string() << "_em\tk=" << k.to_string() << "_f1";
  os << "\tscored\tskipped\tmean_k_half\n";
  for (Method m : r.methods) {
    for (SetKind kind : {SetKind::topk, SetKind::bottomk}) {
      os << influence::method_name(m) << '\t' << set_kind_name(kind) << '\t' << fmt(r.unperturbed_em) << '\t'
         << fmt(r.unperturbed_f1);
      double mean_k_half = 0.0;
      std::size_t scored = 0, skipped = 0;
      for (std::size_t ki = 0; ki < r.k_grid.size(); ++ki) {
        const Cell& c = r.at(m, kind, ki);
        os << '\t' << fmt(c.em()) << '\t' << fmt(c.f1());
        if (r.k_grid[ki].half) mean_k_half = c.mean_k();
        scored = std::max(scored, c.count);
        skipped = std::max(skipped, c.skipped);
      }
      os << '\t' << scored << '\t' << skipped << '\t' << fmt(mean_k_half) << '\n';
    }
  }
}

}  // namespace gradsae::perturb
