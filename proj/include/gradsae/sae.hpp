#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "gradsae/numcore/matrix.hpp"

// Bias-free sparse autoencoder spliced into the residual stream:
//   H = ReLU(Z · W_enc),  Ẑ = H · W_dec
namespace gradsae::sae {

using num::Matrix;

struct SAEParams {
  Matrix w_enc;  // D×C
  Matrix w_dec;  // C×D
  // Residual-stream layer the autoencoder was trained on (1-based).
  std::size_t layer = 1;

  std::size_t input_dim() const noexcept { return w_enc.rows(); }
  std::size_t latent_dim() const noexcept { return w_enc.cols(); }

  friend bool operator==(const SAEParams&, const SAEParams&) = default;
};

// Throws ShapeError unless W_enc is D×C and W_dec is C×D.
void validate(const SAEParams& sae);

// N×C, entrywise ≥ 0.
Matrix encode(const Matrix& z, const SAEParams& sae);
Matrix decode(const Matrix& h, const SAEParams& sae);

// Copy of h with the listed latent columns zeroed at every row.
Matrix mask_latents(const Matrix& h, std::span<const std::size_t> columns);

// Count of strictly positive entries in row r.
std::size_t row_nonzeros(const Matrix& h, std::size_t r);

struct TrainConfig {
  std::size_t latent_dim = 512;
  double l1_coeff = 1e-3;
  double lr = 1e-3;
  std::size_t steps = 3000;
  std::size_t batch_size = 256;
  std::uint64_t seed = 42;
};

struct TrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double relative_error = 0.0;  // ‖Z − Ẑ‖ / ‖Z‖ on the training rows
  double mean_nonzero = 0.0;    // mean active latents per row
};

// Minimizes mean over rows of ‖z − ẑ‖² + l1_coeff·‖h‖₁ with Adam, renormalizing
// decoder rows to unit norm after every step. Deterministic given cfg.seed.
SAEParams train_sae(const Matrix& activations, std::size_t layer, const TrainConfig& cfg,
                    TrainReport* report = nullptr,
                    const std::function<void(std::size_t step, double loss)>& progress = {});

struct ReconstructionStats {
  double relative_error = 0.0;
  double mean_nonzero = 0.0;
};

ReconstructionStats reconstruction_stats(const Matrix& activations, const SAEParams& sae);

// Active-latent counts on the last prompt token, the row the half-K rule reads.
struct ActivationStats {
  double activation_avg = 0.0;  // mean nonzero latents
  double half_avg = 0.0;        // mean of max(1, ceil(nonzero / 2))
  std::size_t examples = 0;
};

// One entry per example: the prompt rows of its latent code.
ActivationStats activation_stats(std::span<const Matrix> prompt_latents);

}  // namespace gradsae::sae
