#include "gradsae/numcore/matrix.hpp"

#include <cmath>
#include <random>
#include <string>

#include "doctest.h"
#include "gradsae/error.hpp"
#include "gradsae/numcore/tape.hpp"
#include "test_util.hpp"

using gradsae::num::Matrix;
namespace num = gradsae::num;

TEST_CASE("matmul hand examples") {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  CHECK(num::matmul(a, Matrix::identity(2)) == a);
  CHECK(num::matmul(Matrix::from_rows({{1, 0}}), Matrix::from_rows({{1, -1}, {0, 2}})) ==
        Matrix::from_rows({{1, -1}}));
}

TEST_CASE("matmul matches a brute-force triple loop") {
  std::mt19937_64 rng(3);
  const Matrix a = gradsae::testing::random_matrix(3, 4, rng);
  const Matrix b = gradsae::testing::random_matrix(4, 2, rng);
  const Matrix c = num::matmul(a, b);
  REQUIRE(c.rows() == 3);
  REQUIRE(c.cols() == 2);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < 4; ++p) s += a(i, p) * b(p, j);
      CHECK(c(i, j) == doctest::Approx(s).epsilon(1e-14));
    }
  }
  CHECK(num::max_abs_diff(num::matmul_nt(a, num::transpose(b)), c) < 1e-14);
  CHECK(num::max_abs_diff(num::matmul_tn(num::transpose(a), b), c) < 1e-14);
}

TEST_CASE("matmul is associative on random triples") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = gradsae::testing::random_matrix(5, 7, rng);
    const Matrix b = gradsae::testing::random_matrix(7, 6, rng);
    const Matrix c = gradsae::testing::random_matrix(6, 3, rng);
    CHECK(num::max_abs_diff(num::matmul(num::matmul(a, b), c), num::matmul(a, num::matmul(b, c))) < 1e-10);
  }
}

TEST_CASE("matmul shape error names both shapes") {
  try {
    (void)num::matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL("expected ShapeError");
  } catch (const gradsae::ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("x 2x3") != std::string::npos);
  }
}

TEST_CASE("relu examples") {
  CHECK(num::relu(Matrix::from_rows({{-1, 0, 2}})) == Matrix::from_rows({{0, 0, 2}}));
  CHECK(num::relu(Matrix::from_rows({{-1, -3}, {-0.5, -2}})) == Matrix(2, 2));
}

TEST_CASE("logprob_of_targets examples") {
  const std::vector<int> t0{0};
  CHECK(num::logprob_of_targets(Matrix::from_rows({{0, 0}}), t0) == doctest::Approx(-0.6931471805599453));
  CHECK(std::abs(num::logprob_of_targets(Matrix::from_rows({{10, -10}}), t0) - -2.061153620314381e-09) < 1e-15);
  const std::vector<int> t2{1, 3};
  CHECK(num::logprob_of_targets(Matrix(2, 4), t2) == doctest::Approx(2.0 * std::log(0.25)).epsilon(1e-15));
  const std::vector<int> bad{4};
  CHECK_THROWS_AS(num::logprob_of_targets(Matrix(1, 4), bad), gradsae::VocabError);
}

TEST_CASE("slice_rows and column_mean") {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
  CHECK(num::slice_rows(a, 1, 3) == Matrix::from_rows({{3, 4}, {5, 6}}));
  CHECK(num::column_mean(a) == std::vector<double>{3, 4});
  CHECK_THROWS_AS(num::slice_rows(a, 2, 4), gradsae::ShapeError);
}
