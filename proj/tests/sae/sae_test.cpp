#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gradsae/checkpoint.hpp"
#include "gradsae/error.hpp"
#include "gradsae/sae.hpp"
#include "test_util.hpp"

using namespace gradsae;
using num::Matrix;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("gradsae_sae_" + name);
}

// Points that lie on a handful of nonnegative directions, the setting where a
// sparse code exists.
Matrix sparse_mixture(std::size_t rows, std::size_t d, std::size_t atoms, std::uint64_t seed) {
  rng::Engine e(seed);
  Matrix dict(atoms, d);
  for (double& v : dict.values()) v = rng::normal(e);
  Matrix out(rows, d);
  for (std::size_t r = 0; r < rows; ++r) {
    for (int j = 0; j < 2; ++j) {
      const std::size_t a = rng::uniform_index(e, atoms);
      const double w = 0.5 + rng::uniform01(e);
      for (std::size_t c = 0; c < d; ++c) out(r, c) += w * dict(a, c);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("encode is a rectified linear map and decode is linear") {
  sae::SAEParams s;
  s.w_enc = Matrix::from_rows({{1.0, -1.0, 0.5}, {2.0, 0.0, -1.0}});
  s.w_dec = Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}});
  const Matrix z = Matrix::from_rows({{1.0, 1.0}, {-1.0, 0.5}});
  const Matrix h = sae::encode(z, s);
  CHECK(h == Matrix::from_rows({{3.0, 0.0, 0.0}, {0.0, 1.0, 0.0}}));
  CHECK(sae::decode(h, s) == Matrix::from_rows({{3.0, 0.0}, {0.0, 1.0}}));
  CHECK(sae::row_nonzeros(h, 0) == 1);
  CHECK_THROWS_AS(sae::encode(Matrix(1, 3), s), ShapeError);
  CHECK_THROWS_AS(sae::decode(Matrix(1, 2), s), ShapeError);
  s.w_dec = Matrix(2, 2);
  CHECK_THROWS_AS(sae::validate(s), ShapeError);
}

TEST_CASE("training reconstructs sparse data with a sparse code") {
  const Matrix acts = sparse_mixture(600, 8, 12, 4);
  sae::TrainConfig cfg;
  cfg.latent_dim = 32;
  cfg.steps = 600;
  cfg.batch_size = 64;
  cfg.lr = 5e-3;
  cfg.l1_coeff = 1e-2;
  sae::TrainReport rep;
  const auto s = sae::train_sae(acts, 2, cfg, &rep);
  CHECK(s.layer == 2);
  CHECK(rep.final_loss < rep.initial_loss);
  CHECK(rep.relative_error < 0.3);
  CHECK(rep.mean_nonzero < 16.0);
  for (std::size_t r = 0; r < s.w_dec.rows(); ++r) {
    double n = 0.0;
    for (double v : s.w_dec.row(r)) n += v * v;
    CHECK(std::sqrt(n) == doctest::Approx(1.0));
  }
  CHECK(sae::train_sae(acts, 2, cfg) == s);
  const auto stats = sae::reconstruction_stats(acts, s);
  CHECK(stats.relative_error == rep.relative_error);
}

TEST_CASE("training rejects unusable settings") {
  const Matrix acts(10, 8, 1.0);
  sae::TrainConfig cfg;
  cfg.latent_dim = 8;
  CHECK_THROWS_AS(sae::train_sae(acts, 1, cfg), InputError);
  cfg.latent_dim = 16;
  cfg.l1_coeff = 0.0;
  CHECK_THROWS_AS(sae::train_sae(acts, 1, cfg), InputError);
  cfg.l1_coeff = 1e-3;
  CHECK_THROWS_AS(sae::train_sae(Matrix(0, 8), 1, cfg), InputError);
}

TEST_CASE("activation stats read the last prompt row") {
  const std::vector<Matrix> lat{Matrix::from_rows({{1, 1, 1}, {1, 0, 2}}), Matrix::from_rows({{0, 0, 0}}),
                                Matrix::from_rows({{1, 1, 1}})};
  const auto s = sae::activation_stats(lat);
  CHECK(s.examples == 3);
  CHECK(s.activation_avg == doctest::Approx(5.0 / 3.0));
  CHECK(s.half_avg == doctest::Approx((1.0 + 1.0 + 2.0) / 3.0));
  const std::vector<Matrix> empty_row{Matrix(0, 3)};
  CHECK_THROWS_AS(sae::activation_stats(empty_row), InputError);
}

TEST_CASE("checkpoints round-trip bit for bit") {
  const auto t = testing::tiny_system(5, 24, 3);
  const auto lm_path = temp_file("lm.ckpt");
  const auto sae_path = temp_file("sae.ckpt");
  ckpt::save_lm(lm_path, t.model);
  ckpt::save_sae(sae_path, t.sae);
  const auto m = ckpt::load_lm(lm_path);
  CHECK(m == t.model);
  CHECK(ckpt::load_sae(sae_path) == t.sae);

  CHECK_THROWS_AS(ckpt::load_sae(lm_path), IoError);
  CHECK_THROWS_AS(ckpt::load_lm(sae_path), IoError);
  CHECK_THROWS_AS(ckpt::load_lm(temp_file("missing.ckpt")), IoError);

  const auto size = std::filesystem::file_size(lm_path);
  std::filesystem::resize_file(lm_path, size - 8);
  try {
    ckpt::load_lm(lm_path);
    FAIL("expected an error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
  }
  {
    std::ofstream out(lm_path, std::ios::binary | std::ios::trunc);
    out << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(ckpt::load_lm(lm_path), IoError);
  std::filesystem::remove(lm_path);
  std::filesystem::remove(sae_path);
  CHECK_THROWS_AS(ckpt::save_sae("/nonexistent-dir/s.ckpt", t.sae), IoError);
}
