#include "gradsae/sae.hpp"

#include <algorithm>
#include <cmath>

#include "gradsae/error.hpp"
#include "gradsae/numcore/adam.hpp"
#include "gradsae/rng.hpp"

namespace gradsae::sae {

void validate(const SAEParams& sae) {
  if (sae.w_enc.rows() != sae.w_dec.cols() || sae.w_enc.cols() != sae.w_dec.rows() || sae.w_enc.empty()) {
    throw ShapeError("SAE weights inconsistent: W_enc " + sae.w_enc.shape_string() + ", W_dec " +
                     sae.w_dec.shape_string());
  }
}

Matrix encode(const Matrix& z, const SAEParams& sae) {
  if (z.cols() != sae.input_dim()) {
    throw ShapeError("encode: activations " + z.shape_string() + " do not match W_enc " + sae.w_enc.shape_string());
  }
  return num::relu(num::matmul(z, sae.w_enc));
}

Matrix decode(const Matrix& h, const SAEParams& sae) {
  if (h.cols() != sae.latent_dim()) {
    throw ShapeError("decode: latents " + h.shape_string() + " do not match W_dec " + sae.w_dec.shape_string());
  }
  return num::matmul(h, sae.w_dec);
}

Matrix mask_latents(const Matrix& h, std::span<const std::size_t> columns) {
  for (std::size_t c : columns) {
    if (c >= h.cols()) {
      throw IndexError("mask_latents: latent " + std::to_string(c) + " outside [0, " + std::to_string(h.cols()) + ")");
    }
  }
  Matrix out = h;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c : columns) out(r, c) = 0.0;
  }
  return out;
}

std::size_t row_nonzeros(const Matrix& h, std::size_t r) {
  const auto row = h.row(r);
  return static_cast<std::size_t>(std::count_if(row.begin(), row.end(), [](double v) { return v > 0.0; }));
}

namespace {

void normalize_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    double n = 0.0;
    for (double v : row) n += v * v;
    n = std::sqrt(n);
    if (n > 0.0) {
      for (double& v : row) v /= n;
    }
  }
}

}  // namespace

ReconstructionStats reconstruction_stats(const Matrix& activations, const SAEParams& sae) {
  ReconstructionStats s;
  if (activations.rows() == 0) return s;
  const Matrix h = encode(activations, sae);
  const Matrix zhat = decode(h, sae);
  const double denom = num::frobenius_norm(activations);
  s.relative_error = denom > 0.0 ? num::frobenius_norm(num::sub(zhat, activations)) / denom : 0.0;
  std::size_t nnz = 0;
  for (std::size_t r = 0; r < h.rows(); ++r) nnz += row_nonzeros(h, r);
  s.mean_nonzero = static_cast<double>(nnz) / static_cast<double>(h.rows());
  return s;
}

ActivationStats activation_stats(std::span<const Matrix> prompt_latents) {
  ActivationStats s;
  for (const Matrix& h : prompt_latents) {
    if (h.rows() == 0) throw InputError("activation_stats: example without prompt rows");
    const std::size_t nnz = row_nonzeros(h, h.rows() - 1);
    s.activation_avg += static_cast<double>(nnz);
    s.half_avg += static_cast<double>(std::max<std::size_t>(1, (nnz + 1) / 2));
  }
  s.examples = prompt_latents.size();
  if (s.examples > 0) {
    s.activation_avg /= static_cast<double>(s.examples);
    s.half_avg /= static_cast<double>(s.examples);
  }
  return s;
}

SAEParams train_sae(const Matrix& activations, std::size_t layer, const TrainConfig& cfg, TrainReport* report,
                    const std::function<void(std::size_t, double)>& progress) {
  if (activations.rows() == 0) throw InputError("train_sae: no activations");
  if (!(cfg.l1_coeff > 0.0)) throw InputError("train_sae: l1_coeff must be positive");
  const std::size_t d = activations.cols();
  const std::size_t c = cfg.latent_dim;
  if (c <= d) throw InputError("train_sae: latent_dim must exceed the input width (overcomplete)");
  rng::Engine e(cfg.seed);

  SAEParams sae;
  sae.layer = layer;
  sae.w_dec = Matrix(c, d);
  for (double& v : sae.w_dec.values()) v = rng::normal(e);
  normalize_rows(sae.w_dec);
  sae.w_enc = num::transpose(sae.w_dec);

  num::Adam adam(num::AdamConfig{0.9, 0.999, 1e-8});
  std::vector<Matrix*> params{&sae.w_enc, &sae.w_dec};
  const std::size_t bsz = std::min(cfg.batch_size, activations.rows());
  Matrix zb(bsz, d);
  double ema = 0.0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t i = 0; i < bsz; ++i) {
      const auto src = activations.row(rng::uniform_index(e, activations.rows()));
      std::copy(src.begin(), src.end(), zb.row(i).begin());
    }
    const Matrix pre = num::matmul(zb, sae.w_enc);
    const Matrix h = num::relu(pre);
    const Matrix resid = num::sub(num::matmul(h, sae.w_dec), zb);

    const double inv_b = 1.0 / static_cast<double>(bsz);
    double loss = 0.0;
    for (double v : resid.values()) loss += v * v;
    double l1 = 0.0;
    for (double v : h.values()) l1 += v;
    loss = (loss + cfg.l1_coeff * l1) * inv_b;
    if (!std::isfinite(loss)) throw TrainingError("SAE loss diverged at step " + std::to_string(step));

    const Matrix dzhat = num::scale(resid, 2.0 * inv_b);
    Matrix dh = num::matmul_nt(dzhat, sae.w_dec);
    for (std::size_t i = 0; i < dh.size(); ++i) {
      dh.data()[i] = pre.data()[i] > 0.0 ? dh.data()[i] + cfg.l1_coeff * inv_b : 0.0;
    }
    std::vector<Matrix> grads{num::matmul_tn(zb, dh), num::matmul_tn(h, dzhat)};
    adam.step(params, grads, cfg.lr);
    normalize_rows(sae.w_dec);

    ema = step == 0 ? loss : 0.98 * ema + 0.02 * loss;
    if (report != nullptr && step == 0) report->initial_loss = loss;
    if (progress) progress(step, ema);
  }
  if (!num::all_finite(sae.w_enc) || !num::all_finite(sae.w_dec)) {
    throw TrainingError("SAE weights became non-finite");
  }
  if (report != nullptr) {
    report->final_loss = ema;
    const auto stats = reconstruction_stats(activations, sae);
    report->relative_error = stats.relative_error;
    report->mean_nonzero = stats.mean_nonzero;
  }
  return sae;
}

}  // namespace gradsae::sae
