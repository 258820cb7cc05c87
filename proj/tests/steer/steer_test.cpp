#include <doctest.h>

#include <set>
#include <sstream>

#include "gradsae/error.hpp"
#include "gradsae/steer.hpp"
#include "test_util.hpp"

using namespace gradsae;
using namespace gradsae::steer;
using num::Matrix;

namespace {

std::vector<Example> examples_with_groups(const std::vector<std::pair<std::string, std::string>>& gq) {
  std::vector<Example> out;
  for (const auto& [g, q] : gq) {
    Example e;
    e.group_id = g;
    e.id = g + "-" + q;
    e.qa.question = q;
    out.push_back(e);
  }
  return out;
}

}  // namespace

TEST_CASE("pairs stay within a context and never pair a question with itself") {
  const auto ex = examples_with_groups(
      {{"a", "q1"}, {"a", "q2"}, {"b", "q1"}, {"b", "q2"}, {"b", "q3"}, {"c", "q1"}, {"b", "q4"}});
  const auto p = build_steer_pairs(ex, 42);
  CHECK(p.skipped == 1);
  CHECK(p.pairs.size() == 6);
  for (const auto& pr : p.pairs) {
    CHECK(pr.target != pr.donor);
    CHECK(ex[pr.target].group_id == ex[pr.donor].group_id);
  }
  CHECK(p.pairs[0] == SteerPair{0, 1});
  CHECK(p.pairs[1] == SteerPair{1, 0});
  CHECK(build_steer_pairs(ex, 42).pairs == p.pairs);

  std::set<std::size_t> donors;
  for (std::uint64_t seed = 0; seed < 40; ++seed) donors.insert(build_steer_pairs(ex, seed).pairs[2].donor);
  CHECK(donors == std::set<std::size_t>{3, 4, 6});
}

TEST_CASE("injection overwrites after zeroing") {
  std::mt19937_64 rng(11);
  const Matrix h = testing::random_matrix(4, 8, rng, 0.0, 1.0);
  const std::vector<std::size_t> own{1, 5}, donor{2, 6};
  const std::vector<double> vals{0.7, 1.5};
  const Matrix out = inject_latents(h, own, donor, vals);
  for (std::size_t r = 0; r < h.rows(); ++r) {
    for (std::size_t c = 0; c < h.cols(); ++c) {
      double expect = h(r, c);
      if (c == 1 || c == 5) expect = 0.0;
      if (c == 2) expect = 0.7;
      if (c == 6) expect = 1.5;
      CHECK(out(r, c) == expect);
    }
  }

  const std::vector<std::size_t> overlap_donor{5};
  const std::vector<double> overlap_val{0.25};
  CHECK(inject_latents(h, own, overlap_donor, overlap_val)(0, 5) == 0.25);

  const std::vector<double> zeros(2, 0.0);
  CHECK(inject_latents(h, own, own, zeros) == sae::mask_latents(h, own));
  CHECK(inject_latents(h, own, {}, {}) == sae::mask_latents(h, own));

  Matrix constant_cols = h;
  for (std::size_t r = 0; r < h.rows(); ++r) constant_cols(r, 1) = constant_cols(r, 5) = 0.4;
  const std::vector<double> same{0.4, 0.4};
  CHECK(inject_latents(constant_cols, own, own, same) == constant_cols);

  const std::vector<std::size_t> bad{8};
  const std::vector<double> one{1.0};
  CHECK_THROWS_AS(inject_latents(h, own, bad, one), IndexError);
  CHECK_THROWS_AS(inject_latents(h, bad, own, vals), IndexError);
  CHECK_THROWS_AS(inject_latents(h, own, donor, one), InputError);
}

TEST_CASE("steering report keeps the unsteered score at zero") {
  const auto t = testing::tiny_system();
  perturb::RunOptions opt;
  opt.max_new_tokens = 3;
  auto ex = perturb::make_examples(t.model.vocab, t.groups);
  // Each question's gold answer is a distinct word the untrained model never
  // emits, so unsteered outputs score zero against every donor.
  for (std::size_t i = 0; i < ex.size(); ++i) {
    ex[i].qa.answer = "unseen" + std::to_string(i);
    ex[i].seq = lm::make_example(t.model.vocab, ex[i].qa);
  }
  const auto pairs = build_steer_pairs(ex, 42);
  const std::vector<Method> methods{Method::gradsae, Method::baseline};
  const auto grid = influence::parse_kgrid("1,half");
  const auto r = run_local_steering(ex, pairs, t.model, t.sae, methods, grid, opt);
  CHECK(r.pairs == ex.size());
  CHECK(r.unsteered_em == 0.0);
  CHECK(r.unsteered_f1 == 0.0);
  for (const auto& [key, cell] : r.cells) CHECK(cell.count + cell.skipped == r.pairs);

  opt.threads = 2;
  const auto again = run_local_steering(ex, pairs, t.model, t.sae, methods, grid, opt);
  std::ostringstream a, b;
  write_tsv(a, r, {});
  write_tsv(b, again, {});
  CHECK(a.str() == b.str());
  CHECK(a.str().find("gradsae\ttopk\t0.00\t0.00") != std::string::npos);
}

TEST_CASE("pairs whose unsteered output already matches the donor are dropped") {
  const auto t = testing::tiny_system();
  perturb::RunOptions opt;
  opt.max_new_tokens = 3;
  auto ex = perturb::make_examples(t.model.vocab, t.groups);
  for (auto& e : ex) {
    e.qa.answer = perturb::decode_answer(t.model, t.sae, e, {}, opt);
    e.seq = lm::make_example(t.model.vocab, e.qa);
  }
  std::vector<Example> same = {ex[0], ex[1]};
  same[1].qa.answer = same[0].qa.answer;
  PairBuild pb{{SteerPair{0, 1}}, 0};
  const std::vector<Method> methods{Method::baseline};
  const auto grid = influence::parse_kgrid("1");
  CHECK_THROWS_AS(run_local_steering(same, pb, t.model, t.sae, methods, grid, opt), ExperimentError);
}
