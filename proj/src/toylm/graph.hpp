#pragma once

#include <span>
#include <vector>

#include "gradsae/numcore/tape.hpp"
#include "gradsae/toylm.hpp"

namespace gradsae::lm::detail {

using num::Tape;
using num::Var;

struct BoundBlock {
  Var ln1, wq, wq_prev, wk, wk_prev, wv, wo, ln2, w1, b1, w2, b2;
};

struct BoundParams {
  Var tok_emb, pos_emb, ln_f;
  std::vector<BoundBlock> blocks;
  // Same order as LMParams::tensors().
  std::vector<Var> all;
};

// Registers borrowed parameter leaves; trainable controls gradient tracking.
// With sinks (ordered like LMParams::tensors()), gradients accumulate there.
BoundParams bind(Tape& tape, const LMParams& params, bool trainable, std::vector<num::Matrix>* sinks = nullptr);

Var embed(Tape& tape, const BoundParams& p, std::span<const int> ids, const LMConfig& cfg);
Var block(Tape& tape, const BoundBlock& b, Var x, const LMConfig& cfg);
// Blocks [first, last) (0-based).
Var run_blocks(Tape& tape, const BoundParams& p, Var x, std::size_t first, std::size_t last, const LMConfig& cfg);
// Final norm + tied unembedding on rows [row_begin, row_end) of the residual.
Var unembed(Tape& tape, const BoundParams& p, Var x, std::size_t row_begin, std::size_t row_end);

void check_ids(std::span<const int> ids, const LMConfig& cfg);

}  // namespace gradsae::lm::detail
