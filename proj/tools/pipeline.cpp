#include "pipeline.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>

#include "gradsae/checkpoint.hpp"
#include "gradsae/datagen.hpp"
#include "gradsae/error.hpp"
#include "gradsae/metrics.hpp"
#include "gradsae/parallel.hpp"
#include "gradsae/perturb.hpp"
#include "gradsae/sae.hpp"
#include "gradsae/steer.hpp"
#include "gradsae/toylm.hpp"

namespace gradsae::cli {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t end = std::min(s.find(',', start), s.size());
    out.push_back(trim(s.substr(start, end - start)));
    start = end + 1;
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ParseError("config key '" + key + "': bad number '" + value + "'");
  }
  return out;
}

std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string shortest(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t x : v) out += (out.empty() ? "" : ",") + std::to_string(x);
  return out;
}

struct Field {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::map<std::string, Field> fields(RunConfig& c) {
  auto size_field = [](std::size_t& x, const std::string& key) {
    return Field{[&x, key](const std::string& v) { x = parse_number<std::size_t>(key, v); },
                 [&x] { return std::to_string(x); }};
  };
  auto real_field = [](double& x, const std::string& key) {
    return Field{[&x, key](const std::string& v) { x = parse_number<double>(key, v); }, [&x] { return shortest(x); }};
  };
  std::map<std::string, Field> f;
  f["seed"] = {[&c](const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); },
               [&c] { return std::to_string(c.seed); }};
  f["n_groups"] = size_field(c.n_groups, "n_groups");
  f["questions_per_group"] = size_field(c.questions_per_group, "questions_per_group");
  f["facts_per_context"] = size_field(c.facts_per_context, "facts_per_context");
  f["two_word_fraction"] = real_field(c.two_word_fraction, "two_word_fraction");
  f["valid_fraction"] = real_field(c.valid_fraction, "valid_fraction");
  f["dim"] = size_field(c.dim, "dim");
  f["layers"] = size_field(c.layers, "layers");
  f["heads"] = size_field(c.heads, "heads");
  f["context_len"] = size_field(c.context_len, "context_len");
  f["mlp_mult"] = size_field(c.mlp_mult, "mlp_mult");
  f["lm_steps"] = size_field(c.lm_steps, "lm_steps");
  f["lm_batch"] = size_field(c.lm_batch, "lm_batch");
  f["lm_lr"] = real_field(c.lm_lr, "lm_lr");
  f["hook_layers"] = {[&c](const std::string& v) {
                        c.hook_layers.clear();
                        for (const auto& s : split_list(v)) c.hook_layers.push_back(parse_number<std::size_t>("hook_layers", s));
                      },
                      [&c] { return join(c.hook_layers); }};
  f["latent_dim"] = size_field(c.latent_dim, "latent_dim");
  f["l1_coeff"] = real_field(c.l1_coeff, "l1_coeff");
  f["sae_steps"] = size_field(c.sae_steps, "sae_steps");
  f["sae_batch"] = size_field(c.sae_batch, "sae_batch");
  f["sae_lr"] = real_field(c.sae_lr, "sae_lr");
  f["sae_harvest_examples"] = size_field(c.sae_harvest_examples, "sae_harvest_examples");
  f["layer"] = size_field(c.layer, "layer");
  f["k_grid"] = {[&c](const std::string& v) {
                   influence::parse_kgrid(v);
                   c.k_grid = v;
                 },
                 [&c] { return c.k_grid; }};
  f["methods"] = {[&c](const std::string& v) {
                    c.methods.clear();
                    for (const auto& s : split_list(v)) c.methods.push_back(influence::parse_method(s));
                  },
                  [&c] {
                    std::string out;
                    for (auto m : c.methods) out += (out.empty() ? "" : ",") + std::string(influence::method_name(m));
                    return out;
                  }};
  f["value_mode"] = {[&c](const std::string& v) { c.value_mode = influence::parse_value_mode(v); },
                     [&c] { return std::string(influence::value_mode_name(c.value_mode)); }};
  f["max_examples"] = size_field(c.max_examples, "max_examples");
  f["max_new_tokens"] = size_field(c.max_new_tokens, "max_new_tokens");
  f["threads"] = size_field(c.threads, "threads");
  f["eval_examples"] = size_field(c.eval_examples, "eval_examples");
  f["min_train_em"] = real_field(c.min_train_em, "min_train_em");
  f["min_valid_em"] = real_field(c.min_valid_em, "min_valid_em");
  f["max_sae_rel_error"] = real_field(c.max_sae_rel_error, "max_sae_rel_error");
  f["min_filtered"] = size_field(c.min_filtered, "min_filtered");
  f["run_dir"] = {[&c](const std::string& v) { c.run_dir = v; }, [&c] { return c.run_dir.string(); }};
  f["report_dir"] = {[&c](const std::string& v) { c.report_dir = v; }, [&c] { return c.report_dir.string(); }};
  return f;
}

// Paths and the thread count do not change any result, so they stay out of
// the hash and two runs in different directories share it.
bool hashed(const std::string& key) { return key != "run_dir" && key != "report_dir" && key != "threads"; }

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  auto f = fields(*this);
  auto it = f.find(key);
  if (it == f.end()) throw ParseError("unknown config key '" + key + "'");
  it->second.set(trim(value));
}

std::string RunConfig::canonical() const {
  auto f = fields(const_cast<RunConfig&>(*this));
  std::string out;
  for (const auto& [key, field] : f) {
    if (hashed(key)) out += key + "=" + field.get() + "\n";
  }
  return out;
}

std::string RunConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

fs::path RunConfig::corpus_path() const { return run_dir / "corpus.jsonl"; }
fs::path RunConfig::lm_path() const { return run_dir / "lm.ckpt"; }
fs::path RunConfig::sae_path(std::size_t hook_layer) const {
  return run_dir / ("sae_l" + std::to_string(hook_layer) + ".ckpt");
}
fs::path RunConfig::reports() const {
  if (const char* env = std::getenv("GRADSAE_REPORT_DIR"); env != nullptr && *env != '\0') return env;
  return report_dir.empty() ? run_dir / "reports" : report_dir;
}

std::map<std::string, std::string> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open config file");
  std::map<std::string, std::string> out;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError(path.string() + ":" + std::to_string(no) + ": expected key = value");
    }
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

void write_failures(std::ostream& os, const std::vector<Failure>& failures) {
  for (const auto& f : failures) os << "threshold_failure\t" << f.name << '\t' << f.observed << '\t' << f.required << '\n';
}

namespace {

using influence::KSpec;
using influence::Method;
using num::Matrix;

std::vector<std::string> report_header(const RunConfig& cfg) {
  return {"config_hash=" + cfg.hash() + " seed=" + std::to_string(cfg.seed) + " layer=" + std::to_string(cfg.layer) +
          " value_mode=" + std::string(influence::value_mode_name(cfg.value_mode))};
}

std::ofstream open_report(const RunConfig& cfg, const std::string& name, fs::path& path) {
  const fs::path dir = cfg.reports();
  fs::create_directories(dir);
  path = dir / name;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  return out;
}

data::Split load_split(const RunConfig& cfg) {
  if (!fs::exists(cfg.corpus_path())) {
    throw IoError(cfg.corpus_path().string() + ": corpus missing; run gen-data first");
  }
  const auto groups = data::read_native(cfg.corpus_path());
  return data::split_by_group(groups, cfg.valid_fraction, cfg.seed);
}

perturb::RunOptions run_options(const RunConfig& cfg) {
  return {cfg.max_new_tokens, cfg.threads, cfg.value_mode};
}

}  // namespace

lm::LanguageModel load_model(const RunConfig& cfg) {
  if (!fs::exists(cfg.lm_path())) throw IoError(cfg.lm_path().string() + ": model checkpoint missing; run train first");
  return ckpt::load_lm(cfg.lm_path());
}

sae::SAEParams load_autoencoder(const RunConfig& cfg) {
  const fs::path p = cfg.sae_path(cfg.layer);
  if (!fs::exists(p)) {
    throw IoError(p.string() + ": no autoencoder for layer " + std::to_string(cfg.layer) +
                  "; add it to hook_layers and run train");
  }
  return ckpt::load_sae(p);
}

// Candidates are decoded in blocks, stopping once enough are kept.
std::vector<perturb::Example> filtered_examples(const RunConfig& cfg, const lm::LanguageModel& model,
                                                const sae::SAEParams& sae, std::ostream& log,
                                                std::vector<Failure>& failures) {
  const auto split = load_split(cfg);
  const auto all = perturb::make_examples(model.vocab, split.valid);
  std::vector<perturb::Example> kept;
  std::size_t considered = 0;
  const std::size_t block = std::max<std::size_t>(1, cfg.max_examples);
  while (kept.size() < cfg.max_examples && considered < all.size()) {
    const std::size_t end = std::min(all.size(), considered + block);
    const std::span<const perturb::Example> chunk(all.data() + considered, end - considered);
    considered = end;
    try {
      auto r = perturb::filter_correct(chunk, model, sae, run_options(cfg));
      for (auto& ex : r.kept) {
        if (kept.size() < cfg.max_examples) kept.push_back(std::move(ex));
      }
    } catch (const ExperimentError&) {
    }
  }
  log << "filter: kept " << kept.size() << " of " << considered << " held-out examples decoded\n";
  if (kept.empty()) {
    throw ExperimentError("no held-out example is answered correctly through the autoencoder splice; rerun train");
  }
  if (kept.size() < cfg.min_filtered) {
    failures.push_back({"filtered_examples", std::to_string(kept.size()), ">=" + std::to_string(cfg.min_filtered)});
  }
  return kept;
}

namespace {

double greedy_em(const lm::LanguageModel& model, std::span<const data::QAGroup> groups, std::size_t limit,
                 const RunConfig& cfg) {
  std::vector<data::QAExample> exs;
  for (const auto& g : groups) {
    for (const auto& ex : g.examples) {
      if (exs.size() < limit) exs.push_back(ex);
    }
  }
  if (exs.empty()) throw InputError("no examples to evaluate");
  std::vector<int> ok(exs.size(), 0);
  parallel_for(exs.size(), cfg.threads, [&](std::size_t i) {
    const auto r = lm::greedy_decode(model, lm::make_prompt(model.vocab, exs[i]).ids, cfg.max_new_tokens);
    ok[i] = metrics::exact_match(model.vocab.decode(r.tokens), exs[i].answer);
  });
  double sum = 0.0;
  for (int v : ok) sum += v;
  return 100.0 * sum / static_cast<double>(exs.size());
}

}  // namespace

CommandResult cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
  data::GeneratorConfig gc;
  gc.n_groups = cfg.n_groups;
  gc.questions_per_group = cfg.questions_per_group;
  gc.facts_per_context = cfg.facts_per_context;
  gc.two_word_fraction = cfg.two_word_fraction;
  gc.seed = cfg.seed;
  const auto groups = data::generate_corpus(gc);
  fs::create_directories(cfg.run_dir);
  data::write_native(cfg.corpus_path(), groups);
  const auto split = data::split_by_group(groups, cfg.valid_fraction, cfg.seed);
  log << "wrote " << cfg.corpus_path().string() << " (" << groups.size() << " contexts)\n";
  log << "train split\n" << data::format_stats(data::corpus_stats(split.train), "synthetic");
  log << "valid split\n" << data::format_stats(data::corpus_stats(split.valid), "synthetic");
  return {{}, {cfg.corpus_path()}};
}

CommandResult cmd_train(const RunConfig& cfg, std::ostream& log) {
  CommandResult res;
  const auto split = load_split(cfg);
  const auto vocab = lm::Vocab::build(split.train, 512);

  std::vector<lm::TrainSeq> packed;
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    packed.push_back(lm::make_packed(vocab, split.train[i], cfg.seed * 1000003ULL + i));
  }
  lm::LMConfig lc;
  lc.vocab_size = vocab.size();
  lc.dim = cfg.dim;
  lc.layers = cfg.layers;
  lc.heads = cfg.heads;
  lc.context_len = cfg.context_len;
  lc.mlp_mult = cfg.mlp_mult;
  lm::TrainConfig tc;
  tc.steps = cfg.lm_steps;
  tc.batch_size = cfg.lm_batch;
  tc.lr = cfg.lm_lr;
  tc.seed = cfg.seed;
  lm::TrainReport lr;
  const auto model = lm::train_lm(packed, lc, vocab, tc, &lr, [&](std::size_t step, double loss) {
    if (step % 250 == 0) log << "lm step " << step << " loss " << fmt(loss, 4) << '\n' << std::flush;
  });
  ckpt::save_lm(cfg.lm_path(), model);
  res.outputs.push_back(cfg.lm_path());

  const double train_em = greedy_em(model, split.train, cfg.eval_examples, cfg);
  const double valid_em = greedy_em(model, split.valid, cfg.eval_examples, cfg);
  log << "lm greedy EM: train " << fmt(train_em) << " valid " << fmt(valid_em) << '\n';
  if (train_em < cfg.min_train_em) res.failures.push_back({"lm_train_em", fmt(train_em), ">=" + fmt(cfg.min_train_em)});
  if (valid_em < cfg.min_valid_em) res.failures.push_back({"lm_valid_em", fmt(valid_em), ">=" + fmt(cfg.min_valid_em)});

  std::vector<lm::TokenSeq> harvest;
  for (const auto& g : split.train) {
    for (const auto& ex : g.examples) {
      if (harvest.size() < cfg.sae_harvest_examples) harvest.push_back(lm::make_example(vocab, ex));
    }
  }
  fs::path report_path;
  auto report = open_report(cfg, "train.tsv", report_path);
  for (const auto& h : report_header(cfg)) report << "# " << h << '\n';
  report << "artifact\tlayer\tinitial_loss\tfinal_loss\ttrain_em\tvalid_em\trelative_error\tmean_nonzero\n";
  report << "lm\t-\t" << fmt(lr.initial_loss, 4) << '\t' << fmt(lr.final_loss, 4) << '\t' << fmt(train_em) << '\t'
         << fmt(valid_em) << "\t-\t-\n";

  for (std::size_t layer : cfg.hook_layers) {
    const auto acts = lm::harvest_activations(model, harvest, layer);
    sae::TrainConfig sc;
    sc.latent_dim = cfg.latent_dim;
    sc.l1_coeff = cfg.l1_coeff;
    sc.lr = cfg.sae_lr;
    sc.steps = cfg.sae_steps;
    sc.batch_size = cfg.sae_batch;
    sc.seed = cfg.seed + layer;
    sae::TrainReport sr;
    const auto s = sae::train_sae(acts, layer, sc, &sr);
    ckpt::save_sae(cfg.sae_path(layer), s);
    res.outputs.push_back(cfg.sae_path(layer));
    log << "sae layer " << layer << ": relative error " << fmt(sr.relative_error, 4) << ", mean active "
        << fmt(sr.mean_nonzero) << '\n';
    report << "sae\t" << layer << '\t' << fmt(sr.initial_loss, 4) << '\t' << fmt(sr.final_loss, 4) << "\t-\t-\t"
           << fmt(sr.relative_error, 4) << '\t' << fmt(sr.mean_nonzero) << '\n';
    if (sr.relative_error > cfg.max_sae_rel_error) {
      res.failures.push_back({"sae_l" + std::to_string(layer) + "_relative_error", fmt(sr.relative_error, 4),
                              "<=" + fmt(cfg.max_sae_rel_error, 4)});
    }
  }
  res.outputs.push_back(report_path);
  return res;
}

CommandResult cmd_perturb(const RunConfig& cfg, std::ostream& log) {
  CommandResult res;
  const auto model = load_model(cfg);
  const auto s = load_autoencoder(cfg);
  const auto examples = filtered_examples(cfg, model, s, log, res.failures);
  const auto k_grid = influence::parse_kgrid(cfg.k_grid);
  const auto report = perturb::run_perturbation(examples, model, s, cfg.methods, k_grid, run_options(cfg));
  fs::path path;
  auto out = open_report(cfg, "perturb_l" + std::to_string(cfg.layer) + ".tsv", path);
  perturb::write_tsv(out, report, report_header(cfg));
  log << "wrote " << path.string() << '\n';
  res.outputs.push_back(path);
  return res;
}

CommandResult cmd_steer(const RunConfig& cfg, std::ostream& log) {
  CommandResult res;
  const auto model = load_model(cfg);
  const auto s = load_autoencoder(cfg);
  const auto examples = filtered_examples(cfg, model, s, log, res.failures);
  const auto k_grid = influence::parse_kgrid(cfg.k_grid);
  const auto pairs = steer::build_steer_pairs(examples, cfg.seed);
  log << "steer: " << pairs.pairs.size() << " pairs, " << pairs.skipped << " targets without a donor\n";
  const auto report = steer::run_local_steering(examples, pairs, model, s, cfg.methods, k_grid, run_options(cfg));
  log << "steer: " << report.dropped_overlap << " pairs dropped because the unsteered answer overlaps the donor's\n";
  fs::path path;
  auto out = open_report(cfg, "steer_l" + std::to_string(cfg.layer) + ".tsv", path);
  steer::write_tsv(out, report, report_header(cfg));
  log << "wrote " << path.string() << '\n';
  res.outputs.push_back(path);
  return res;
}

CommandResult cmd_stats(const RunConfig& cfg, std::ostream& log) {
  CommandResult res;
  const auto model = load_model(cfg);
  const auto s = load_autoencoder(cfg);
  const auto examples = filtered_examples(cfg, model, s, log, res.failures);
  const KSpec half = KSpec::half_nonzero();

  std::vector<Matrix> prompts(examples.size());
  std::vector<std::optional<metrics::ExampleSelections>> sel(examples.size());
  parallel_for(examples.size(), cfg.threads, [&](std::size_t i) {
    const auto latents = influence::example_latents(model, s, examples[i].seq);
    prompts[i] = latents.prompt_h();
    try {
      const auto b = influence::select(influence::baseline_influence(prompts[i]), half, prompts[i], cfg.value_mode);
      const auto g = influence::select(influence::influence_for(Method::gradsae, model, s, examples[i].seq, latents),
                                       half, prompts[i], cfg.value_mode);
      sel[i] = metrics::ExampleSelections{examples[i].group_id, b.z_high, b.z_low, g.z_high, g.z_low};
    } catch (const SelectionError&) {
    }
  });
  std::vector<metrics::ExampleSelections> usable;
  for (auto& x : sel) {
    if (x) usable.push_back(std::move(*x));
  }
  if (usable.empty()) throw ExperimentError("stats: no example has a positive-influence latent; retrain with cmd train");
  const auto act = sae::activation_stats(prompts);
  const auto ov = metrics::overlap_stats(usable);

  fs::path path;
  auto out = open_report(cfg, "stats_l" + std::to_string(cfg.layer) + ".tsv", path);
  for (const auto& h : report_header(cfg)) out << "# " << h << '\n';
  out << "# k=half examples=" << ov.examples << " selection_skipped=" << examples.size() - usable.size()
      << " inner_pairs=" << ov.inner_pairs << " contexts_skipped=" << ov.contexts_skipped << '\n';
  out << "# inner overlap: mean over ordered question pairs (i, j) sharing a context of |S_i & S_j| / |S_i|\n";
  out << "# shared rows repeat one value in both columns\n";
  out << "statistic\tbaseline\tgradsae\n";
  out << "Activation Avg.\t" << fmt(act.activation_avg) << '\t' << fmt(act.activation_avg) << '\n';
  out << "50% Avg.\t" << fmt(act.half_avg) << '\t' << fmt(act.half_avg) << '\n';
  out << "Cross TopK Overlap\t" << fmt(ov.cross_top) << '\t' << fmt(ov.cross_top) << '\n';
  out << "Cross BottomK Overlap\t" << fmt(ov.cross_bottom) << '\t' << fmt(ov.cross_bottom) << '\n';
  out << "Inner TopK Overlap\t" << fmt(ov.inner_top_baseline) << '\t' << fmt(ov.inner_top_gradsae) << '\n';
  out << "Inner BottomK Overlap\t" << fmt(ov.inner_bottom_baseline) << '\t' << fmt(ov.inner_bottom_gradsae) << '\n';
  log << "wrote " << path.string() << '\n';
  res.outputs.push_back(path);
  return res;
}

}  // namespace gradsae::cli
