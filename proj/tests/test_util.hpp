#pragma once

#include <random>

#include "gradsae/numcore/matrix.hpp"

namespace gradsae::testing {

inline num::Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo = -1.0,
                                 double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  num::Matrix m(rows, cols);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

}  // namespace gradsae::testing

#include "gradsae/datagen.hpp"
#include "gradsae/rng.hpp"
#include "gradsae/sae.hpp"
#include "gradsae/toylm.hpp"

namespace gradsae::testing {

// A small corpus and an untrained model over its vocabulary. Untrained weights
// are enough for properties that hold for any parameters.
struct TinySystem {
  std::vector<data::QAGroup> groups;
  lm::LanguageModel model;
  sae::SAEParams sae;
};

inline TinySystem tiny_system(std::uint64_t seed = 3, std::size_t latents = 24, std::size_t layers = 2) {
  data::GeneratorConfig gc;
  gc.n_groups = 4;
  gc.facts_per_context = 3;
  gc.questions_per_group = 3;
  gc.seed = seed;
  TinySystem t;
  t.groups = data::generate_corpus(gc);
  lm::LMConfig cfg;
  t.model.vocab = lm::Vocab::build(t.groups, 512);
  cfg.vocab_size = t.model.vocab.size();
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.layers = layers;
  cfg.context_len = 64;
  t.model.config = cfg;
  t.model.params = lm::LMParams::init(cfg, seed);
  // Larger embeddings so the untrained model's outputs depend on the input.
  for (double& v : t.model.params.tok_emb.values()) v *= 10.0;

  rng::Engine e(seed + 1);
  t.sae.layer = 1;
  t.sae.w_dec = num::Matrix(latents, cfg.dim);
  for (double& v : t.sae.w_dec.values()) v = rng::normal(e);
  t.sae.w_enc = num::transpose(t.sae.w_dec);
  for (double& v : t.sae.w_enc.values()) v += 0.3 * rng::normal(e);
  return t;
}

}  // namespace gradsae::testing
