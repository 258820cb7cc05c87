#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "gradsae/numcore/matrix.hpp"

namespace gradsae::num {

// Handle to a value recorded on a Tape. Only meaningful for the tape that
// issued it.
struct Var {
  std::uint32_t id = 0;
};

// Record-and-replay reverse-mode differentiation over Matrix values.
//
// A tape is built for one forward pass, replayed once by backward(), then
// dropped. Leaves are either owned (variable/constant) or borrowed
// (parameter/constant_ref); borrowed leaves must outlive the tape. Nodes
// whose inputs carry no gradient skip recording a backward closure, so
// constant-only subgraphs cost only their forward arithmetic.
//
// A tape is not thread-safe; use one per thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var variable(Matrix value);
  Var parameter(const Matrix& value);
  // As parameter(), but backward() adds the gradient straight into *sink
  // (same shape as value) instead of a tape-owned buffer, and grad() reads
  // it back from there. The sink is never cleared by the tape.
  Var parameter(const Matrix& value, Matrix* sink);
  Var constant(Matrix value);
  Var constant_ref(const Matrix& value);

  const Matrix& value(Var v) const;
  bool requires_grad(Var v) const;

  // Gradient from the last backward(); a zero matrix when v received none.
  Matrix grad(Var v) const;
  // nullptr when v received no gradient.
  const Matrix* grad_ptr(Var v) const;

  // Seeds d(out)/d(out) = 1 for a 1x1 output and replays in reverse order.
  void backward(Var out);

  std::size_t size() const noexcept { return nodes_.size(); }

  Var matmul(Var a, Var b);
  // a · bᵀ
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  // bias is 1×cols, added to every row.
  Var add_row_bias(Var a, Var bias);
  Var scale(Var a, double s);
  Var relu(Var a);
  // tanh approximation
  Var gelu(Var a);
  // Row-wise normalization with a 1×cols gain and no bias.
  Var layer_norm(Var x, Var gain, double eps = 1e-5);
  // Gathers rows of table by id.
  Var embedding(Var table, std::span<const int> ids);
  // Multi-head causal softmax attention on N×D q, k, v.
  Var causal_attention(Var q, Var k, Var v, std::size_t heads);
  Var slice_rows(Var a, std::size_t begin, std::size_t end);
  // Row i of the result is row i-1 of a; row 0 is zero.
  Var shift_rows(Var a);
  // Σ_i log_softmax(logits.row(i))[targets[i]], one target per row. 1×1.
  Var logprob_of_targets(Var logits, std::span<const int> targets);
  // Σ x². 1×1.
  Var sum_squares(Var a);
  // Σ x. 1×1.
  Var sum(Var a);

 private:
  using Backward = std::function<void(Tape&, const Matrix& grad_out)>;

  struct Node {
    Matrix owned;
    const Matrix* borrowed = nullptr;
    Matrix grad;
    Matrix* sink = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;

    const Matrix& value() const { return borrowed ? *borrowed : owned; }
  };

  Var push(Matrix value, bool requires_grad, Backward backward);
  Node& node(Var v);
  const Node& node(Var v) const;
  // Lazily zero-initialised gradient buffer of v.
  Matrix& grad_buffer(Var v);
  bool any_requires_grad(std::initializer_list<Var> vs) const;

  std::vector<Node> nodes_;
};

// Scalar log-probability of targets under row-wise softmax of logits,
// computed without a tape.
double logprob_of_targets(const Matrix& logits, std::span<const int> targets);

using TapedScalarFn = std::function<Var(Tape&, Var x)>;

struct GradCheckOptions {
  double eps = 1e-5;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double abs_floor = 1e-6;
  // Flat indices to check; empty means every entry.
  std::vector<std::size_t> entries;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_entry = 0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

// Compares the tape gradient of f at `at` with central finite differences
// using step eps·(1+|x_i|) per entry.
GradCheckResult grad_check_detailed(const TapedScalarFn& f, const Matrix& at, const GradCheckOptions& opts);

double grad_check(const TapedScalarFn& f, const Matrix& at, double eps);

}  // namespace gradsae::num
