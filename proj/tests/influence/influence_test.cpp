#include <doctest.h>

#include <cmath>
#include <sstream>

#include "gradsae/error.hpp"
#include "gradsae/influence.hpp"
#include "gradsae/numcore/tape.hpp"
#include "test_util.hpp"

using namespace gradsae;
using namespace gradsae::influence;
using num::Matrix;

namespace {

lm::TokenSeq first_seq(const testing::TinySystem& t) {
  return lm::make_example(t.model.vocab, t.groups[0].examples[0]);
}

}  // namespace

TEST_CASE("influence is zero wherever the latent is inactive") {
  const auto t = testing::tiny_system();
  for (const auto& ex : t.groups[1].examples) {
    const auto seq = lm::make_example(t.model.vocab, ex);
    const auto lat = example_latents(t.model, t.sae, seq);
    const auto g = grad_influence(t.model, t.sae, seq, lat);
    REQUIRE(g.g.rows() == seq.prompt_len);
    std::size_t zeros = 0;
    for (std::size_t n = 0; n < g.g.rows(); ++n) {
      for (std::size_t c = 0; c < g.g.cols(); ++c) {
        if (lat.h(n, c) == 0.0) {
          CHECK(g.g(n, c) == 0.0);
          ++zeros;
        }
      }
    }
    CHECK(zeros > 0);
  }
}

TEST_CASE("influence matches central differences times activation") {
  const auto t = testing::tiny_system();
  const auto seq = first_seq(t);
  const auto lat = example_latents(t.model, t.sae, seq);
  const auto g = grad_influence(t.model, t.sae, seq, lat);
  std::size_t checked = 0;
  for (std::size_t n = 0; n < lat.prompt_rows; n += 2) {
    for (std::size_t c = 0; c < lat.h.cols(); c += 3) {
      if (lat.h(n, c) == 0.0) continue;
      const double eps = 1e-5 * (1.0 + std::fabs(lat.h(n, c)));
      Matrix up = lat.h, down = lat.h;
      up(n, c) += eps;
      down(n, c) -= eps;
      const double fd = (lm::objective(t.model, seq, up, t.sae) - lm::objective(t.model, seq, down, t.sae)) / (2 * eps);
      const double expect = fd * lat.h(n, c);
      CHECK(std::fabs(g.g(n, c) - expect) <= 1e-3 * std::max({std::fabs(expect), std::fabs(g.g(n, c)), 1e-8}));
      ++checked;
    }
  }
  CHECK(checked >= 10);
}

TEST_CASE("objective sums the gold log-probabilities over answer positions") {
  const auto t = testing::tiny_system();
  auto seq = first_seq(t);
  const auto lat = example_latents(t.model, t.sae, seq);
  const auto both = lm::objective_with_grad(t.model, seq, lat.h, t.sae);
  double by_position = 0.0;
  for (std::size_t i = 0; i < seq.answer_len; ++i) {
    const Matrix logits = lm::forward_spliced(t.model, lm::teacher_forced_input(seq), lat.h, t.sae);
    const int target = seq.answer()[i];
    const Matrix row = num::slice_rows(logits, seq.prompt_len - 1 + i, seq.prompt_len + i);
    by_position += num::logprob_of_targets(row, std::span<const int>(&target, 1));
  }
  CHECK(both.value == doctest::Approx(by_position).epsilon(1e-12));
  CHECK(lat.objective == both.value);
}

TEST_CASE("exact ablation of an inactive entry is exactly zero") {
  const auto t = testing::tiny_system();
  const auto seq = first_seq(t);
  const auto lat = example_latents(t.model, t.sae, seq);
  bool saw_zero = false, saw_active = false;
  for (std::size_t c = 0; c < lat.h.cols(); ++c) {
    const double d = exact_ablation(t.model, t.sae, seq, lat, 1, c);
    if (lat.h(1, c) == 0.0) {
      CHECK(d == 0.0);
      saw_zero = true;
    } else {
      Matrix h = lat.h;
      h(1, c) = 0.0;
      CHECK(d == lat.objective - lm::objective(t.model, seq, h, t.sae));
      saw_active = true;
    }
  }
  CHECK(saw_zero);
  CHECK(saw_active);
  CHECK_THROWS_AS(exact_ablation(t.model, t.sae, seq, lat, lat.prompt_rows, 0), IndexError);
  CHECK_THROWS_AS(exact_ablation(t.model, t.sae, seq, lat, 0, lat.h.cols()), IndexError);
}

TEST_CASE("column ablation zeroes the latent on every prompt row") {
  const auto t = testing::tiny_system();
  const auto seq = first_seq(t);
  const auto lat = example_latents(t.model, t.sae, seq);
  for (std::size_t c = 0; c < 5; ++c) {
    Matrix h = lat.h;
    for (std::size_t n = 0; n < lat.prompt_rows; ++n) h(n, c) = 0.0;
    CHECK(column_ablation(t.model, t.sae, seq, lat, c) == lat.objective - lm::objective(t.model, seq, h, t.sae));
  }
}

TEST_CASE("aggregate and baseline are column means") {
  InfluenceMatrix g{Matrix::from_rows({{1.0, -2.0}, {2.0, 0.0}, {3.0, 5.0}})};
  const auto v = aggregate(g);
  CHECK(v.method == Method::gradsae);
  CHECK(v.g[0] == 2.0);
  CHECK(v.g[1] == 1.0);

  InfluenceMatrix one{Matrix::from_rows({{0.5, -0.25, 7.0}})};
  CHECK(aggregate(one).g == std::vector<double>{0.5, -0.25, 7.0});

  InfluenceMatrix perm{Matrix::from_rows({{3.0, 5.0}, {1.0, -2.0}, {2.0, 0.0}})};
  CHECK(aggregate(perm).g == v.g);

  const auto b = baseline_influence(Matrix::from_rows({{0.0, 0.0}, {4.0, 0.0}}));
  CHECK(b.method == Method::baseline);
  CHECK(b.g == std::vector<double>{2.0, 0.0});
  CHECK(baseline_influence(Matrix(3, 4)).g == std::vector<double>(4, 0.0));
  CHECK_THROWS_AS(aggregate(InfluenceMatrix{Matrix(0, 3)}), InputError);
}

TEST_CASE("select picks extremes among positive influences") {
  const InfluenceVector g{{0.5, -0.2, 0.0, 0.9}, Method::gradsae};
  const Matrix h = Matrix::from_rows({{1.0, 2.0, 0.0, 4.0}, {3.0, 0.0, 0.0, 0.0}});
  const auto s = select(g, KSpec::fixed(1), h);
  CHECK(s.z_high == std::vector<std::size_t>{3});
  CHECK(s.z_low == std::vector<std::size_t>{0});
  CHECK(s.nonzero == 2);
  CHECK(s.high_values == std::vector<double>{2.0});
  CHECK(s.low_values == std::vector<double>{2.0});

  const auto last = select(g, KSpec::fixed(1), h, ValueMode::last_token);
  CHECK(last.high_values == std::vector<double>{0.0});
  CHECK(last.low_values == std::vector<double>{3.0});

  const auto all = select(g, KSpec::fixed(5), h);
  CHECK(all.z_high == std::vector<std::size_t>{3, 0});
  CHECK(all.z_low == std::vector<std::size_t>{0, 3});
  CHECK(all.k == 5);
}

TEST_CASE("select breaks ties by latent index and ignores positive scaling") {
  const InfluenceVector g{{0.3, 0.3, 0.1, 0.3, 0.1}, Method::gradsae};
  const Matrix h(1, 5, 1.0);
  const auto s = select(g, KSpec::fixed(2), h);
  CHECK(s.z_high == std::vector<std::size_t>{0, 1});
  CHECK(s.z_low == std::vector<std::size_t>{2, 4});
  CHECK(s.z_high != s.z_low);

  InfluenceVector scaled = g;
  for (double& v : scaled.g) v *= 37.5;
  const auto s2 = select(scaled, KSpec::fixed(2), h);
  CHECK(s2.z_high == s.z_high);
  CHECK(s2.z_low == s.z_low);
  CHECK(select(g, KSpec::fixed(2), h) == s);
}

TEST_CASE("select throws when nothing has positive influence") {
  const InfluenceVector g{{0.0, -1.0}, Method::gradsae};
  CHECK_THROWS_AS(select(g, KSpec::fixed(1), Matrix(1, 2)), SelectionError);
  CHECK_THROWS_AS(select(g, KSpec::fixed(1), Matrix(1, 3)), ShapeError);
}

TEST_CASE("half K rounds up the last prompt row's active count") {
  Matrix h(2, 10);
  for (std::size_t c = 0; c < 7; ++c) h(1, c) = 1.0;
  h(0, 9) = 1.0;
  CHECK(resolve_k(KSpec::half_nonzero(), h) == 4);
  CHECK(resolve_k(KSpec::half_nonzero(), Matrix(1, 10)) == 1);
  h(1, 7) = 1.0;
  CHECK(resolve_k(KSpec::half_nonzero(), h) == 4);
  CHECK(resolve_k(KSpec::fixed(20), h) == 20);
}

TEST_CASE("K grid parsing") {
  const auto grid = parse_kgrid("1,10,20,30,half");
  REQUIRE(grid.size() == 5);
  CHECK(grid[0] == KSpec::fixed(1));
  CHECK(grid[4] == KSpec::half_nonzero());
  CHECK(grid[3].to_string() == "30");
  CHECK(grid[4].to_string() == "half");
  CHECK_THROWS_AS(parse_kspec("0"), ParseError);
  CHECK_THROWS_AS(parse_kspec("ten"), ParseError);
  CHECK_THROWS_AS(parse_kgrid("1,,2"), ParseError);
  CHECK(parse_method("baseline") == Method::baseline);
  CHECK_THROWS_AS(parse_method("saliency"), ParseError);
  CHECK(parse_value_mode("last_token") == ValueMode::last_token);
}

TEST_CASE("taylor ratio on analytic functions") {
  // f(x) = x² at x = 1: delta(s) = 1 − (1 − s)², g = f'(1)·1 = 2, error = s².
  std::vector<TaylorProbe> quad{{2.0, [](double s) { return 1.0 - (1.0 - s) * (1.0 - s); }}};
  const auto q = taylor_convergence(quad);
  CHECK(q.median_ratio == 0.25);
  CHECK(q.ratios == 2);
  CHECK_FALSE(q.exact_linear);

  std::vector<TaylorProbe> lin{{3.0, [](double s) { return 3.0 * s; }}, {-1.0, [](double s) { return -s; }}};
  const auto l = taylor_convergence(lin);
  CHECK(l.exact_linear);
  CHECK(l.median_ratio == 0.0);

  CHECK_THROWS_AS(taylor_convergence(std::span<const TaylorProbe>{}), InputError);
  const double bad[] = {1.0, 0.4};
  CHECK_THROWS_AS(taylor_convergence(quad, bad), InputError);
}

TEST_CASE("taylor ratio on the spliced model rejects inactive samples") {
  const auto t = testing::tiny_system();
  const auto seq = first_seq(t);
  const auto lat = example_latents(t.model, t.sae, seq);
  const auto g = grad_influence(t.model, t.sae, seq, lat);
  std::vector<Entry> active, inactive;
  for (std::size_t n = 0; n < lat.prompt_rows; ++n) {
    for (std::size_t c = 0; c < lat.h.cols(); ++c) (lat.h(n, c) > 0.0 ? active : inactive).push_back({n, c});
  }
  REQUIRE(!inactive.empty());
  CHECK_THROWS_AS(taylor_convergence(t.model, t.sae, seq, lat, g, std::span(inactive).first(1)), InputError);
  const auto r = taylor_convergence(t.model, t.sae, seq, lat, g, active);
  CHECK(r.ratios > 0);
  CHECK(r.median_ratio > 0.0);
  CHECK(r.median_ratio < 1.0);
}

TEST_CASE("influence dump lists nonzero scores") {
  std::ostringstream os;
  write_influence_dump(os, "g00001-q2", InfluenceVector{{0.0, 0.25, -1.5}, Method::baseline});
  CHECK(os.str() == "g00001-q2\tbaseline\t1\t0.25\ng00001-q2\tbaseline\t2\t-1.5\n");
}
