#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "gradsae/datagen.hpp"
#include "gradsae/numcore/matrix.hpp"
#include "gradsae/sae.hpp"

// A small pre-norm causal transformer with learned positions, queries and keys
// that also read the previous position, and a tied unembedding. The residual stream
// after any block can be read out, or replaced by an SAE reconstruction
// before the remaining blocks run.
namespace gradsae::lm {

using num::Matrix;

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kEos = 2;

  Vocab();
  // Specials first, then words ordered alphabetically. When the corpus has
  // more distinct words than fit, the most frequent ones are kept.
  static Vocab build(std::span<const data::QAGroup> groups, std::size_t max_size);
  static Vocab from_words(std::vector<std::string> words);

  std::size_t size() const noexcept { return words_.size(); }
  int id(const std::string& word) const;
  const std::string& word(int id) const;
  const std::vector<std::string>& words() const noexcept { return words_; }

  std::vector<int> encode(const std::string& text) const;
  // Joins words with single spaces; stops at the first end token.
  std::string decode(std::span<const int> ids) const;

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.words_ == b.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

// Prompt X (context + question) followed by answer Y (answer words + end token).
struct TokenSeq {
  std::vector<int> ids;
  std::size_t prompt_len = 0;
  std::size_t answer_len = 0;

  std::span<const int> prompt() const { return {ids.data(), prompt_len}; }
  std::span<const int> answer() const { return {ids.data() + prompt_len, answer_len}; }

  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

TokenSeq make_example(const Vocab& vocab, const data::QAExample& ex);
// Prompt only (answer_len = 0).
TokenSeq make_prompt(const Vocab& vocab, const data::QAExample& ex);

// Inputs of the teacher-forced pass: every token except the last. Row
// prompt_len-1+i of its output predicts answer token i.
std::vector<int> teacher_forced_input(const TokenSeq& seq);

// A training sequence with one or more supervised spans [begin, end) of ids;
// each supervised token is predicted from the row before it.
struct TrainSeq {
  std::vector<int> ids;
  std::vector<std::pair<std::size_t, std::size_t>> spans;

  std::size_t target_count() const;
  friend bool operator==(const TrainSeq&, const TrainSeq&) = default;
};

TrainSeq to_train_seq(const TokenSeq& seq);
// The group's context followed by every question and answer (with end token)
// in an order drawn from seed. Questions are supervised along with answers:
// predicting the relation after "what <subject>" is the same lookup the
// answer needs, so it gives that circuit extra signal.
TrainSeq make_packed(const Vocab& vocab, const data::QAGroup& group, std::uint64_t seed);

struct LMConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t context_len = 160;
  std::size_t hook_layer = 1;
  std::size_t mlp_mult = 4;

  void validate() const;
  friend bool operator==(const LMConfig&, const LMConfig&) = default;
};

struct BlockParams {
  Matrix ln1;  // 1×D gain
  Matrix wq, wk, wv, wo;  // D×D
  Matrix wq_prev, wk_prev;  // D×D, query/key contributions of the previous position
  Matrix ln2;  // 1×D gain
  Matrix w1;   // D×(mlp_mult·D)
  Matrix b1;   // 1×(mlp_mult·D)
  Matrix w2;   // (mlp_mult·D)×D
  Matrix b2;   // 1×D

  friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

struct LMParams {
  Matrix tok_emb;  // V×D, also the unembedding
  Matrix pos_emb;  // context_len×D
  std::vector<BlockParams> blocks;
  Matrix ln_f;  // 1×D gain

  static LMParams init(const LMConfig& cfg, std::uint64_t seed);

  // Fixed traversal order shared by the optimizer and checkpoints.
  std::vector<Matrix*> tensors();
  std::vector<const Matrix*> tensors() const;

  friend bool operator==(const LMParams&, const LMParams&) = default;
};

struct LanguageModel {
  LMConfig config;
  Vocab vocab;
  LMParams params;

  friend bool operator==(const LanguageModel&, const LanguageModel&) = default;
};

struct HookedForward {
  Matrix logits;  // N×V
  Matrix hidden;  // N×D residual after block `layer`
};

HookedForward forward_with_hook(const LanguageModel& model, std::span<const int> ids, std::size_t layer);
HookedForward forward_with_hook(const LanguageModel& model, std::span<const int> ids);

// Residual stream after block `layer` (1-based); runs only blocks 1..layer.
Matrix hidden_at(const LanguageModel& model, std::span<const int> ids, std::size_t layer);

// Replaces the residual after block sae.layer with h_override·W_dec and runs
// the remaining blocks. h_override must have one row per id.
Matrix forward_spliced(const LanguageModel& model, std::span<const int> ids, const Matrix& h_override,
                       const sae::SAEParams& sae);

// Latents of the teacher-forced input: encode(hidden_at(teacher_forced_input)).
Matrix teacher_forced_latents(const LanguageModel& model, const TokenSeq& seq, const sae::SAEParams& sae);

// Sum of gold-token log-probabilities over the answer positions on the spliced
// forward, with h_override (one row per teacher-forced input token) standing in
// for the encoded residual.
double objective(const LanguageModel& model, const TokenSeq& seq, const Matrix& h_override,
                 const sae::SAEParams& sae);

struct ObjectiveGrad {
  double value = 0.0;
  Matrix grad_h;  // ∂objective/∂h_override
};

ObjectiveGrad objective_with_grad(const LanguageModel& model, const TokenSeq& seq, const Matrix& h_override,
                                  const sae::SAEParams& sae);

// Rewrites the latent activations at each decoding step. Receives and returns
// an (N_current × C) matrix.
using LatentEdit = std::function<Matrix(const Matrix&)>;

struct Splice {
  const sae::SAEParams* sae = nullptr;
  LatentEdit edit;  // may be empty
};

struct DecodeResult {
  std::vector<int> tokens;  // generated tokens, end token excluded
  bool hit_end = false;
};

// Argmax decoding (ties → lowest id) until the end token or max_len steps.
// With a splice, every step runs encode → edit → decode at the SAE's layer.
DecodeResult greedy_decode(const LanguageModel& model, std::span<const int> prompt, std::size_t max_len,
                           const Splice* splice = nullptr);

struct TrainConfig {
  std::size_t steps = 2500;
  std::size_t batch_size = 16;
  double lr = 3e-3;
  std::size_t warmup = 100;
  double min_lr_fraction = 0.05;
  double clip_norm = 1.0;
  std::uint64_t seed = 42;
};

struct TrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<std::pair<std::size_t, double>> curve;
};

// Mean negative log-likelihood per answer token (end token included).
double answer_loss(const LanguageModel& model, std::span<const TokenSeq> seqs);

// Next-token cross-entropy on the supervised spans, Adam with warmup and
// cosine decay. Deterministic given cfg.seed. Throws TrainingError naming the
// step if the loss stops being finite.
LanguageModel train_lm(std::span<const TrainSeq> corpus, const LMConfig& config, const Vocab& vocab,
                       const TrainConfig& cfg, TrainReport* report = nullptr,
                       const std::function<void(std::size_t step, double loss)>& progress = {});

// Layer-`layer` residual rows of every teacher-forced input, stacked.
Matrix harvest_activations(const LanguageModel& model, std::span<const TokenSeq> seqs, std::size_t layer);

}  // namespace gradsae::lm
