#include <algorithm>
#include <cmath>

#include "gradsae/error.hpp"
#include "gradsae/rng.hpp"
#include "graph.hpp"

namespace gradsae::lm {

void LMConfig::validate() const {
  if (vocab_size < 4 || vocab_size > 512) {
    throw InputError("vocab_size must be in [4, 512]; got " + std::to_string(vocab_size));
  }
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw InputError("dim " + std::to_string(dim) + " must be a positive multiple of heads " + std::to_string(heads));
  }
  if (layers == 0) throw InputError("layers must be positive");
  if (hook_layer < 1 || hook_layer > layers) {
    throw InputError("hook_layer " + std::to_string(hook_layer) + " outside [1, " + std::to_string(layers) + "]");
  }
  if (context_len == 0 || mlp_mult == 0) throw InputError("context_len and mlp_mult must be positive");
}

LMParams LMParams::init(const LMConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  rng::Engine e(seed);
  auto normal = [&](std::size_t r, std::size_t c, double sd) {
    Matrix m(r, c);
    for (double& v : m.values()) v = sd * rng::normal(e);
    return m;
  };
  const std::size_t d = cfg.dim;
  const std::size_t hidden = cfg.mlp_mult * d;
  const double in_sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_sd = in_sd / std::sqrt(2.0 * static_cast<double>(cfg.layers));
  LMParams p;
  p.tok_emb = normal(cfg.vocab_size, d, 0.1);
  // Sinusoidal start for positions; relative offsets are then linear maps,
  // which lets previous-token attention form early.
  p.pos_emb = Matrix(cfg.context_len, d);
  for (std::size_t t = 0; t < cfg.context_len; ++t) {
    for (std::size_t i = 0; i + 1 < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      p.pos_emb(t, i) = 0.15 * std::sin(static_cast<double>(t) * freq);
      p.pos_emb(t, i + 1) = 0.15 * std::cos(static_cast<double>(t) * freq);
    }
  }
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    BlockParams b;
    b.ln1 = Matrix(1, d, 1.0);
    b.wq = normal(d, d, in_sd);
    b.wk = normal(d, d, in_sd);
    b.wq_prev = normal(d, d, in_sd);
    b.wk_prev = normal(d, d, in_sd);
    b.wv = normal(d, d, in_sd);
    b.wo = normal(d, d, out_sd);
    b.ln2 = Matrix(1, d, 1.0);
    b.w1 = normal(d, hidden, in_sd);
    b.b1 = Matrix(1, hidden);
    b.w2 = normal(hidden, d, out_sd / std::sqrt(static_cast<double>(cfg.mlp_mult)));
    b.b2 = Matrix(1, d);
    p.blocks.push_back(std::move(b));
  }
  p.ln_f = Matrix(1, d, 1.0);
  return p;
}

std::vector<Matrix*> LMParams::tensors() {
  std::vector<Matrix*> out{&tok_emb, &pos_emb};
  for (auto& b : blocks) {
    for (Matrix* m : {&b.ln1, &b.wq, &b.wq_prev, &b.wk, &b.wk_prev, &b.wv, &b.wo, &b.ln2, &b.w1, &b.b1, &b.w2, &b.b2}) out.push_back(m);
  }
  out.push_back(&ln_f);
  return out;
}

std::vector<const Matrix*> LMParams::tensors() const {
  auto mut = const_cast<LMParams*>(this)->tensors();
  return {mut.begin(), mut.end()};
}

namespace detail {

BoundParams bind(Tape& tape, const LMParams& params, bool trainable, std::vector<Matrix>* sinks) {
  std::size_t next = 0;
  auto leaf = [&](const Matrix& m) {
    if (!trainable) return tape.constant_ref(m);
    return sinks ? tape.parameter(m, &sinks->at(next++)) : tape.parameter(m);
  };
  BoundParams bp;
  bp.tok_emb = leaf(params.tok_emb);
  bp.pos_emb = leaf(params.pos_emb);
  bp.all = {bp.tok_emb, bp.pos_emb};
  for (const auto& b : params.blocks) {
    BoundBlock bb{leaf(b.ln1), leaf(b.wq), leaf(b.wq_prev), leaf(b.wk), leaf(b.wk_prev), leaf(b.wv), leaf(b.wo),
                  leaf(b.ln2), leaf(b.w1), leaf(b.b1), leaf(b.w2), leaf(b.b2)};
    for (Var v : {bb.ln1, bb.wq, bb.wq_prev, bb.wk, bb.wk_prev, bb.wv, bb.wo, bb.ln2, bb.w1, bb.b1, bb.w2, bb.b2}) bp.all.push_back(v);
    bp.blocks.push_back(bb);
  }
  bp.ln_f = leaf(params.ln_f);
  bp.all.push_back(bp.ln_f);
  return bp;
}

void check_ids(std::span<const int> ids, const LMConfig& cfg) {
  if (ids.empty()) throw LengthError("empty token sequence");
  if (ids.size() > cfg.context_len) {
    throw LengthError("sequence of " + std::to_string(ids.size()) + " tokens exceeds context_len " +
                      std::to_string(cfg.context_len));
  }
  for (int t : ids) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw VocabError("token id " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(cfg.vocab_size));
    }
  }
}

Var embed(Tape& tape, const BoundParams& p, std::span<const int> ids, const LMConfig& cfg) {
  check_ids(ids, cfg);
  std::vector<int> pos(ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
  return tape.add(tape.embedding(p.tok_emb, ids), tape.embedding(p.pos_emb, pos));
}

Var block(Tape& tape, const BoundBlock& b, Var x, const LMConfig& cfg) {
  const Var h = tape.layer_norm(x, b.ln1);
  // Queries and keys also read the previous position, so a head can match
  // "the token before me" against "the token before you" without first
  // learning offset attention from the position table.
  const Var prev = tape.shift_rows(h);
  const Var q = tape.add(tape.matmul(h, b.wq), tape.matmul(prev, b.wq_prev));
  const Var k = tape.add(tape.matmul(h, b.wk), tape.matmul(prev, b.wk_prev));
  const Var att = tape.causal_attention(q, k, tape.matmul(h, b.wv), cfg.heads);
  x = tape.add(x, tape.matmul(att, b.wo));
  const Var h2 = tape.layer_norm(x, b.ln2);
  const Var mid = tape.gelu(tape.add_row_bias(tape.matmul(h2, b.w1), b.b1));
  return tape.add(x, tape.add_row_bias(tape.matmul(mid, b.w2), b.b2));
}

Var run_blocks(Tape& tape, const BoundParams& p, Var x, std::size_t first, std::size_t last, const LMConfig& cfg) {
  for (std::size_t l = first; l < last; ++l) x = block(tape, p.blocks[l], x, cfg);
  return x;
}

Var unembed(Tape& tape, const BoundParams& p, Var x, std::size_t row_begin, std::size_t row_end) {
  Var rows = x;
  if (row_begin != 0 || row_end != tape.value(x).rows()) rows = tape.slice_rows(x, row_begin, row_end);
  return tape.matmul_nt(tape.layer_norm(rows, p.ln_f), p.tok_emb);
}

}  // namespace detail

namespace {

using detail::Tape;
using detail::Var;

void check_layer(const LMConfig& cfg, std::size_t layer) {
  if (layer < 1 || layer > cfg.layers) {
    throw InputError("hook layer " + std::to_string(layer) + " outside [1, " + std::to_string(cfg.layers) + "]");
  }
}

void check_sae(const LanguageModel& model, const sae::SAEParams& sae) {
  sae::validate(sae);
  if (sae.input_dim() != model.config.dim) {
    throw ShapeError("SAE input width " + std::to_string(sae.input_dim()) + " does not match model width " +
                     std::to_string(model.config.dim));
  }
  check_layer(model.config, sae.layer);
}

// Spliced tail on a tape: Ẑ = H·W_dec, then blocks sae.layer+1.., returning
// logits for rows [row_begin, row_end).
Var spliced_logits(Tape& tape, const LanguageModel& model, Var h, const sae::SAEParams& sae, std::size_t row_begin,
                   std::size_t row_end) {
  const auto bp = detail::bind(tape, model.params, false);
  const Var zhat = tape.matmul(h, tape.constant_ref(sae.w_dec));
  const Var x = detail::run_blocks(tape, bp, zhat, sae.layer, model.config.layers, model.config);
  return detail::unembed(tape, bp, x, row_begin, row_end);
}

void check_override(const Matrix& h, std::size_t rows, const sae::SAEParams& sae) {
  if (h.rows() != rows || h.cols() != sae.latent_dim()) {
    throw ShapeError("latent override " + h.shape_string() + " does not match " + std::to_string(rows) + "x" +
                     std::to_string(sae.latent_dim()));
  }
}

int argmax_lowest(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return static_cast<int>(best);
}

}  // namespace

HookedForward forward_with_hook(const LanguageModel& model, std::span<const int> ids, std::size_t layer) {
  check_layer(model.config, layer);
  Tape tape;
  const auto bp = detail::bind(tape, model.params, false);
  Var x = detail::embed(tape, bp, ids, model.config);
  x = detail::run_blocks(tape, bp, x, 0, layer, model.config);
  HookedForward out;
  out.hidden = tape.value(x);
  x = detail::run_blocks(tape, bp, x, layer, model.config.layers, model.config);
  out.logits = tape.value(detail::unembed(tape, bp, x, 0, ids.size()));
  return out;
}

HookedForward forward_with_hook(const LanguageModel& model, std::span<const int> ids) {
  return forward_with_hook(model, ids, model.config.hook_layer);
}

Matrix hidden_at(const LanguageModel& model, std::span<const int> ids, std::size_t layer) {
  check_layer(model.config, layer);
  Tape tape;
  const auto bp = detail::bind(tape, model.params, false);
  Var x = detail::embed(tape, bp, ids, model.config);
  x = detail::run_blocks(tape, bp, x, 0, layer, model.config);
  return tape.value(x);
}

Matrix forward_spliced(const LanguageModel& model, std::span<const int> ids, const Matrix& h_override,
                       const sae::SAEParams& sae) {
  check_sae(model, sae);
  detail::check_ids(ids, model.config);
  check_override(h_override, ids.size(), sae);
  Tape tape;
  const Var h = tape.constant_ref(h_override);
  return tape.value(spliced_logits(tape, model, h, sae, 0, ids.size()));
}

Matrix teacher_forced_latents(const LanguageModel& model, const TokenSeq& seq, const sae::SAEParams& sae) {
  check_sae(model, sae);
  return sae::encode(hidden_at(model, teacher_forced_input(seq), sae.layer), sae);
}

namespace {

ObjectiveGrad objective_impl(const LanguageModel& model, const TokenSeq& seq, const Matrix& h_override,
                             const sae::SAEParams& sae, bool want_grad) {
  check_sae(model, sae);
  if (seq.answer_len == 0) throw InputError("objective: answer is empty");
  const auto input = teacher_forced_input(seq);
  detail::check_ids(input, model.config);
  check_override(h_override, input.size(), sae);
  Tape tape;
  const Var h = want_grad ? tape.variable(h_override) : tape.constant_ref(h_override);
  const std::size_t first = seq.prompt_len - 1;
  const Var logits = spliced_logits(tape, model, h, sae, first, first + seq.answer_len);
  const auto targets = seq.answer();
  const Var obj = tape.logprob_of_targets(logits, targets);
  ObjectiveGrad out;
  out.value = tape.value(obj)(0, 0);
  if (!std::isfinite(out.value)) throw NumericError("objective is not finite");
  if (want_grad) {
    tape.backward(obj);
    out.grad_h = tape.grad(h);
    if (!num::all_finite(out.grad_h)) throw NumericError("non-finite gradient with respect to latents");
  }
  return out;
}

}  // namespace

double objective(const LanguageModel& model, const TokenSeq& seq, const Matrix& h_override,
                 const sae::SAEParams& sae) {
  return objective_impl(model, seq, h_override, sae, false).value;
}

ObjectiveGrad objective_with_grad(const LanguageModel& model, const TokenSeq& seq, const Matrix& h_override,
                                  const sae::SAEParams& sae) {
  return objective_impl(model, seq, h_override, sae, true);
}

DecodeResult greedy_decode(const LanguageModel& model, std::span<const int> prompt, std::size_t max_len,
                           const Splice* splice) {
  if (max_len == 0) throw InputError("greedy_decode: max_len must be at least 1");
  if (splice != nullptr && splice->sae != nullptr) check_sae(model, *splice->sae);
  std::vector<int> ids(prompt.begin(), prompt.end());
  DecodeResult out;
  for (std::size_t step = 0; step < max_len; ++step) {
    Tape tape;
    const auto bp = detail::bind(tape, model.params, false);
    Var x = detail::embed(tape, bp, ids, model.config);
    std::size_t resume = 0;
    if (splice != nullptr && splice->sae != nullptr) {
      const auto& sae = *splice->sae;
      x = detail::run_blocks(tape, bp, x, 0, sae.layer, model.config);
      Matrix h = sae::encode(tape.value(x), sae);
      if (splice->edit) h = splice->edit(h);
      check_override(h, ids.size(), sae);
      x = tape.matmul(tape.constant(std::move(h)), tape.constant_ref(sae.w_dec));
      resume = sae.layer;
    }
    x = detail::run_blocks(tape, bp, x, resume, model.config.layers, model.config);
    const Var logits = detail::unembed(tape, bp, x, ids.size() - 1, ids.size());
    const int next = argmax_lowest(tape.value(logits).row(0));
    if (next == Vocab::kEos) {
      out.hit_end = true;
      break;
    }
    out.tokens.push_back(next);
    ids.push_back(next);
    if (ids.size() >= model.config.context_len) break;
  }
  return out;
}

Matrix harvest_activations(const LanguageModel& model, std::span<const TokenSeq> seqs, std::size_t layer) {
  std::size_t rows = 0;
  for (const auto& s : seqs) rows += s.ids.size() - 1;
  Matrix out(rows, model.config.dim);
  std::size_t r = 0;
  for (const auto& s : seqs) {
    const Matrix z = hidden_at(model, teacher_forced_input(s), layer);
    std::copy(z.data(), z.data() + z.size(), out.data() + r * out.cols());
    r += z.rows();
  }
  return out;
}

}  // namespace gradsae::lm
