#include "gradsae/numcore/tape.hpp"

#include <random>

#include "doctest.h"
#include "gradsae/error.hpp"
#include "test_util.hpp"

using gradsae::num::Matrix;
using gradsae::num::Tape;
using gradsae::num::Var;
namespace num = gradsae::num;

TEST_CASE("relu backward uses subgradient 0 at the kink") {
  Tape t;
  const Var x = t.variable(Matrix::from_rows({{-1, 2, 0}}));
  const Var w = t.constant(Matrix::from_rows({{5}, {5}, {5}}));
  t.backward(t.matmul(t.relu(x), w));
  CHECK(t.grad(x) == Matrix::from_rows({{0, 5, 0}}));
}

TEST_CASE("grad_check on sum of squares matches the analytic gradient") {
  const num::TapedScalarFn f = [](Tape& t, Var x) { return t.sum_squares(x); };
  num::GradCheckOptions opts;
  const auto res = num::grad_check_detailed(f, Matrix::from_rows({{1, 2}}), opts);
  CHECK(res.analytic == std::vector<double>{2, 4});
  CHECK(std::abs(res.numeric[0] - 2.0) < 1e-8);
  CHECK(std::abs(res.numeric[1] - 4.0) < 1e-8);
  CHECK(res.max_rel_error < 1e-8);
}

TEST_CASE("constant function has exactly zero gradient") {
  const num::TapedScalarFn f = [](Tape& t, Var) { return t.constant(Matrix(1, 1, 3.0)); };
  Tape t;
  const Var x = t.variable(Matrix::from_rows({{1, 2}}));
  t.backward(f(t, x));
  CHECK(t.grad(x) == Matrix(1, 2));
  CHECK(t.grad_ptr(x) == nullptr);
  CHECK(num::grad_check(f, Matrix::from_rows({{1, 2}}), 1e-5) == 0.0);
}

TEST_CASE("unused operand receives zero gradient") {
  Tape t;
  const Var x = t.variable(Matrix::from_rows({{1, 2}}));
  const Var unused = t.variable(Matrix::from_rows({{3, 4}}));
  t.backward(t.sum_squares(x));
  CHECK(t.grad(unused) == Matrix(1, 2));
}

TEST_CASE("backward is linear in the output") {
  std::mt19937_64 rng(5);
  const Matrix x0 = gradsae::testing::random_matrix(3, 4, rng);
  const Matrix w = gradsae::testing::random_matrix(4, 2, rng);
  auto f1 = [&](Tape& t, Var x) { return t.sum_squares(t.matmul(x, t.constant_ref(w))); };
  auto f2 = [&](Tape& t, Var x) { return t.sum(t.gelu(x)); };
  Tape a;
  const Var xa = a.variable(x0);
  a.backward(f1(a, xa));
  Tape b;
  const Var xb = b.variable(x0);
  b.backward(f2(b, xb));
  Tape c;
  const Var xc = c.variable(x0);
  c.backward(c.add(f1(c, xc), f2(c, xc)));
  CHECK(num::max_abs_diff(c.grad(xc), num::add(a.grad(xa), b.grad(xb))) < 1e-13);
}

TEST_CASE("every taped primitive passes grad_check at random points") {
  std::mt19937_64 rng(17);
  const std::size_t n = 5;
  const std::size_t d = 8;
  const Matrix wq = gradsae::testing::random_matrix(d, d, rng);
  const Matrix wk = gradsae::testing::random_matrix(d, d, rng);
  const Matrix wv = gradsae::testing::random_matrix(d, d, rng);
  const Matrix gain = gradsae::testing::random_matrix(1, d, rng, 0.5, 1.5);
  const Matrix bias = gradsae::testing::random_matrix(1, d, rng);
  const Matrix table = gradsae::testing::random_matrix(6, d, rng);
  const std::vector<int> ids{1, 4, 4, 0, 5};
  const std::vector<int> targets{2, 0, 5, 1, 3};

  const std::vector<std::pair<const char*, num::TapedScalarFn>> cases = {
      {"relu", [&](Tape& t, Var x) { return t.sum_squares(t.relu(t.add_row_bias(x, t.constant_ref(bias)))); }},
      {"gelu", [&](Tape& t, Var x) { return t.sum_squares(t.gelu(x)); }},
      {"layer_norm",
       [&](Tape& t, Var x) {
         return t.sum(t.matmul(t.layer_norm(x, t.constant_ref(gain)), t.constant_ref(wq)));
       }},
      {"attention",
       [&](Tape& t, Var x) {
         const Var q = t.matmul(x, t.constant_ref(wq));
         const Var k = t.matmul(x, t.constant_ref(wk));
         const Var v = t.matmul(x, t.constant_ref(wv));
         return t.sum_squares(t.causal_attention(q, k, v, 2));
       }},
      {"logprob",
       [&](Tape& t, Var x) {
         const Var logits = t.matmul_nt(x, t.constant_ref(table));
         return t.logprob_of_targets(logits, targets);
       }},
      {"shift_rows",
       [&](Tape& t, Var x) { return t.sum_squares(t.add(x, t.matmul(t.shift_rows(x), t.constant_ref(wk)))); }},
      {"slice+scale", [&](Tape& t, Var x) { return t.scale(t.sum_squares(t.slice_rows(x, 1, 4)), -0.5); }},
  };
  for (const auto& [name, f] : cases) {
    CAPTURE(name);
    const Matrix x = gradsae::testing::random_matrix(n, d, rng);
    CHECK(num::grad_check(f, x, 1e-5) < 1e-4);
  }

  // Gradient with respect to an embedding table.
  const num::TapedScalarFn emb = [&](Tape& t, Var tab) {
    return t.sum_squares(t.matmul(t.embedding(tab, ids), t.constant_ref(wq)));
  };
  CHECK(num::grad_check(emb, table, 1e-5) < 1e-4);
}

TEST_CASE("shift_rows moves rows down by one") {
  Tape t;
  const Matrix x = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
  CHECK(t.value(t.shift_rows(t.constant(x))) == Matrix::from_rows({{0, 0}, {1, 2}, {3, 4}}));
  CHECK(t.value(t.shift_rows(t.constant(Matrix::from_rows({{7, 8}})))) == Matrix(1, 2));
}

TEST_CASE("attention is causal") {
  std::mt19937_64 rng(23);
  Matrix x = gradsae::testing::random_matrix(6, 4, rng);
  auto run = [](const Matrix& m) {
    Tape t;
    const Var v = t.constant(m);
    return t.value(t.causal_attention(v, v, v, 2));
  };
  const Matrix before = run(x);
  x(5, 0) += 3.0;
  const Matrix after = run(x);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 4; ++j) CHECK(before(i, j) == after(i, j));
  }
}

TEST_CASE("backward requires a scalar output") {
  Tape t;
  const Var x = t.variable(Matrix(2, 2));
  CHECK_THROWS_AS(t.backward(x), gradsae::ShapeError);
}

TEST_CASE("parameter sinks accumulate across tapes") {
  std::mt19937_64 rng(21);
  const Matrix w = gradsae::testing::random_matrix(3, 2, rng);
  const Matrix x = gradsae::testing::random_matrix(4, 3, rng);
  Matrix sink(3, 2);
  Matrix plain_grad;
  for (int pass = 0; pass < 2; ++pass) {
    Tape t;
    const Var wv = t.parameter(w, &sink);
    t.backward(t.sum_squares(t.matmul(t.constant_ref(x), wv)));
    Tape ref;
    const Var rv = ref.parameter(w);
    ref.backward(ref.sum_squares(ref.matmul(ref.constant_ref(x), rv)));
    plain_grad = ref.grad(rv);
    CHECK(t.grad(wv) == sink);
  }
  for (std::size_t i = 0; i < sink.size(); ++i) CHECK(sink.data()[i] == doctest::Approx(2.0 * plain_grad.data()[i]));
  Matrix wrong(2, 2);
  Tape t;
  CHECK_THROWS_AS(t.parameter(w, &wrong), gradsae::ShapeError);
  CHECK_THROWS_AS(t.parameter(w, nullptr), gradsae::ShapeError);
}
