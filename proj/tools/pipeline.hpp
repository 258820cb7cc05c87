#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "gradsae/influence.hpp"
#include "gradsae/perturb.hpp"
#include "gradsae/sae.hpp"
#include "gradsae/toylm.hpp"

// The experiment driver behind the gradsae command. Every subcommand reads
// a RunConfig, writes its artifacts under the run directory and returns the
// thresholds it missed.
namespace gradsae::cli {

struct RunConfig {
  std::uint64_t seed = 42;

  // Corpus.
  std::size_t n_groups = 6000;
  std::size_t questions_per_group = 5;
  std::size_t facts_per_context = 6;
  double two_word_fraction = 0.5;
  double valid_fraction = 0.1;

  // Language model.
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t context_len = 160;
  std::size_t mlp_mult = 4;
  std::size_t lm_steps = 1200;
  std::size_t lm_batch = 16;
  double lm_lr = 3e-3;

  // Autoencoders, one per hook layer.
  std::vector<std::size_t> hook_layers{1, 2};
  std::size_t latent_dim = 512;
  double l1_coeff = 0.5;
  std::size_t sae_steps = 3000;
  std::size_t sae_batch = 256;
  double sae_lr = 3e-3;
  std::size_t sae_harvest_examples = 4000;

  // Experiments. `layer` picks the autoencoder the experiments splice in.
  std::size_t layer = 1;
  std::string k_grid = "1,10,20,30,half";
  std::vector<influence::Method> methods{influence::Method::baseline, influence::Method::gradsae};
  influence::ValueMode value_mode = influence::ValueMode::mean;
  std::size_t max_examples = 400;
  std::size_t max_new_tokens = 8;
  std::size_t threads = 1;
  std::size_t eval_examples = 600;

  // Thresholds; a miss makes the subcommand exit nonzero.
  double min_train_em = 95.0;
  double min_valid_em = 90.0;
  double max_sae_rel_error = 0.15;
  std::size_t min_filtered = 300;

  std::filesystem::path run_dir = "run";
  // Empty means <run_dir>/reports; GRADSAE_REPORT_DIR overrides either.
  std::filesystem::path report_dir;

  // Throws ParseError for an unknown key or a malformed value.
  void set(const std::string& key, const std::string& value);
  // Sorted key=value lines; the hashed form of the config.
  std::string canonical() const;
  // FNV-1a 64 of canonical(), as 16 hex digits.
  std::string hash() const;

  std::filesystem::path corpus_path() const;
  std::filesystem::path lm_path() const;
  std::filesystem::path sae_path(std::size_t hook_layer) const;
  std::filesystem::path reports() const;
};

// key = value lines; '#' starts a comment. Later keys win.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

struct Failure {
  std::string name;
  std::string observed;
  std::string required;
};

struct CommandResult {
  std::vector<Failure> failures;
  std::vector<std::filesystem::path> outputs;
};

// Loaders shared by the experiment subcommands; each names the subcommand
// to run when its input is missing.
lm::LanguageModel load_model(const RunConfig& cfg);
sae::SAEParams load_autoencoder(const RunConfig& cfg);

// The first max_examples held-out examples the spliced model answers exactly.
// Adds a failure when fewer than min_filtered survive.
std::vector<perturb::Example> filtered_examples(const RunConfig& cfg, const lm::LanguageModel& model,
                                                const sae::SAEParams& sae, std::ostream& log,
                                                std::vector<Failure>& failures);

CommandResult cmd_gen_data(const RunConfig& cfg, std::ostream& log);
CommandResult cmd_train(const RunConfig& cfg, std::ostream& log);
CommandResult cmd_perturb(const RunConfig& cfg, std::ostream& log);
CommandResult cmd_steer(const RunConfig& cfg, std::ostream& log);
CommandResult cmd_stats(const RunConfig& cfg, std::ostream& log);

// `threshold_failure\t<name>\t<observed>\t<required>` per miss.
void write_failures(std::ostream& os, const std::vector<Failure>& failures);

}  // namespace gradsae::cli
