#include <cmath>
#include <numbers>
#include <optional>

#include "gradsae/error.hpp"
#include "gradsae/numcore/adam.hpp"
#include "gradsae/numcore/kernels.hpp"
#include "gradsae/rng.hpp"
#include "graph.hpp"

namespace gradsae::lm {
namespace {

using detail::Tape;
using detail::Var;

// Returns Σ log p over the supervised spans; adds d(weight·Σ log p)/dθ into
// grads (ordered like LMParams::tensors()) when grads is non-null.
double sequence_logprob(const LanguageModel& model, const TrainSeq& seq, double weight, std::vector<Matrix>* grads) {
  const std::vector<int> input(seq.ids.begin(), seq.ids.end() - 1);
  Tape tape;
  const auto bp = detail::bind(tape, model.params, grads != nullptr, grads);
  Var x = detail::embed(tape, bp, input, model.config);
  x = detail::run_blocks(tape, bp, x, 0, model.config.layers, model.config);
  std::optional<Var> total;
  for (const auto& [begin, end] : seq.spans) {
    const Var logits = detail::unembed(tape, bp, x, begin - 1, end - 1);
    const Var lp = tape.logprob_of_targets(logits, std::span<const int>(seq.ids.data() + begin, end - begin));
    total = total ? tape.add(*total, lp) : lp;
  }
  const double value = tape.value(*total)(0, 0);
  if (grads != nullptr) tape.backward(tape.scale(*total, weight));
  return value;
}

double lr_at(const TrainConfig& cfg, std::size_t step) {
  if (step < cfg.warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
  const double span = static_cast<double>(std::max<std::size_t>(1, cfg.steps - cfg.warmup));
  const double progress = static_cast<double>(step - cfg.warmup) / span;
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return cfg.lr * (cfg.min_lr_fraction + (1.0 - cfg.min_lr_fraction) * cosine);
}

}  // namespace

double answer_loss(const LanguageModel& model, std::span<const TokenSeq> seqs) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& s : seqs) {
    total -= sequence_logprob(model, to_train_seq(s), 0.0, nullptr);
    tokens += s.answer_len;
  }
  return tokens == 0 ? 0.0 : total / static_cast<double>(tokens);
}

LanguageModel train_lm(std::span<const TrainSeq> corpus, const LMConfig& config, const Vocab& vocab,
                       const TrainConfig& cfg, TrainReport* report,
                       const std::function<void(std::size_t, double)>& progress) {
  if (corpus.empty()) throw InputError("train_lm: empty corpus");
  if (config.vocab_size != vocab.size()) {
    throw InputError("train_lm: config vocab_size " + std::to_string(config.vocab_size) + " != vocabulary size " +
                     std::to_string(vocab.size()));
  }
  for (const auto& s : corpus) {
    for (const auto& [b, e] : s.spans) {
      if (b == 0 || b >= e || e > s.ids.size()) throw InputError("train_lm: supervised span outside its sequence");
    }
    if (s.spans.empty()) throw InputError("train_lm: every sequence needs a supervised span");
  }
  LanguageModel model{config, vocab, LMParams::init(config, cfg.seed)};
  rng::Engine e(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  num::Adam adam;
  auto tensors = model.params.tensors();

  std::vector<Matrix> grads;
  for (const Matrix* t : tensors) grads.emplace_back(t->rows(), t->cols());

  double ema = 0.0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> batch(cfg.batch_size);
    std::size_t answer_tokens = 0;
    for (auto& b : batch) {
      b = rng::uniform_index(e, corpus.size());
      answer_tokens += corpus[b].target_count();
    }
    for (Matrix& g : grads) std::fill(g.values().begin(), g.values().end(), 0.0);
    const double weight = -1.0 / static_cast<double>(answer_tokens);
    double loss = 0.0;
    for (std::size_t b : batch) loss += weight * sequence_logprob(model, corpus[b], weight, &grads);
    if (!std::isfinite(loss)) throw TrainingError("language model loss diverged at step " + std::to_string(step));
    num::clip_global_norm(grads, cfg.clip_norm);
    adam.step(tensors, grads, lr_at(cfg, step));

    ema = step == 0 ? loss : 0.98 * ema + 0.02 * loss;
    if (report != nullptr) {
      if (step == 0) report->initial_loss = loss;
      if (step % 50 == 0 || step + 1 == cfg.steps) report->curve.emplace_back(step, ema);
      report->final_loss = ema;
    }
    if (progress) progress(step, ema);
  }
  return model;
}

}  // namespace gradsae::lm
