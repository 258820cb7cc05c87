#include "gradsae/numcore/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "gradsae/error.hpp"
#include "gradsae/numcore/kernels.hpp"

namespace gradsae::num {
namespace {

Matrix column_block(const Matrix& m, std::size_t begin, std::size_t width) {
  Matrix out(m.rows(), width);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    std::copy_n(m.data() + i * m.cols() + begin, width, out.data() + i * width);
  }
  return out;
}

void add_column_block(Matrix& dst, const Matrix& src, std::size_t begin) {
  for (std::size_t i = 0; i < src.rows(); ++i) {
    double* d = dst.data() + i * dst.cols() + begin;
    const double* s = src.data() + i * src.cols();
    for (std::size_t j = 0; j < src.cols(); ++j) d[j] += s[j];
  }
}

void check_vocab(const Matrix& logits, std::span<const int> targets) {
  if (logits.rows() != targets.size()) {
    throw ShapeError("logprob_of_targets: " + std::to_string(logits.rows()) + " logit rows for " +
                     std::to_string(targets.size()) + " targets");
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= logits.cols()) {
      throw VocabError("target id " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(logits.cols()));
    }
  }
}

double row_logsumexp(std::span<const double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - mx);
  return mx + std::log(s);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

double logprob_of_targets(const Matrix& logits, std::span<const int> targets) {
  check_vocab(logits, targets);
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto row = logits.row(i);
    total += row[static_cast<std::size_t>(targets[i])] - row_logsumexp(row);
  }
  return total;
}

Tape::Node& Tape::node(Var v) { return nodes_.at(v.id); }
const Tape::Node& Tape::node(Var v) const { return nodes_.at(v.id); }

Var Tape::push(Matrix value, bool requires_grad, Backward backward) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

bool Tape::any_requires_grad(std::initializer_list<Var> vs) const {
  return std::any_of(vs.begin(), vs.end(), [&](Var v) { return node(v).requires_grad; });
}

Var Tape::variable(Matrix value) { return push(std::move(value), true, nullptr); }

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::parameter(const Matrix& value) {
  Var v = push(Matrix{}, true, nullptr);
  node(v).borrowed = &value;
  return v;
}

Var Tape::parameter(const Matrix& value, Matrix* sink) {
  if (sink == nullptr || sink->rows() != value.rows() || sink->cols() != value.cols()) {
    throw ShapeError("parameter: gradient sink must match " + value.shape_string());
  }
  Var v = parameter(value);
  node(v).sink = sink;
  return v;
}

Var Tape::constant_ref(const Matrix& value) {
  Var v = push(Matrix{}, false, nullptr);
  node(v).borrowed = &value;
  return v;
}

const Matrix& Tape::value(Var v) const { return node(v).value(); }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Matrix Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.has_grad) return n.sink ? *n.sink : n.grad;
  return Matrix(n.value().rows(), n.value().cols());
}

const Matrix* Tape::grad_ptr(Var v) const {
  const Node& n = node(v);
  if (!n.has_grad) return nullptr;
  return n.sink ? n.sink : &n.grad;
}

Matrix& Tape::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.sink) {
    n.has_grad = true;
    return *n.sink;
  }
  if (!n.has_grad) {
    n.grad = Matrix(n.value().rows(), n.value().cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var out) {
  const Matrix& ov = value(out);
  if (ov.rows() != 1 || ov.cols() != 1) {
    throw ShapeError("backward: output must be 1x1, got " + ov.shape_string());
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Matrix{};
  }
  if (!node(out).requires_grad) return;
  grad_buffer(out)(0, 0) = 1.0;
  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

Var Tape::matmul(Var a, Var b) {
  Matrix out = num::matmul(value(a), value(b));
  const bool rg = any_requires_grad({a, b});
  return push(std::move(out), rg, [a, b](Tape& t, const Matrix& g) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    const auto& k = kernels::active();
    if (t.requires_grad(a)) {
      // dA += g · Bᵀ
      k.gemm_nt(g.rows(), bv.rows(), g.cols(), g.data(), bv.data(), t.grad_buffer(a).data());
    }
    if (t.requires_grad(b)) {
      // dB += Aᵀ · g
      k.gemm_tn(av.rows(), g.cols(), av.cols(), av.data(), g.data(), t.grad_buffer(b).data());
    }
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  Matrix out = num::matmul_nt(value(a), value(b));
  const bool rg = any_requires_grad({a, b});
  return push(std::move(out), rg, [a, b](Tape& t, const Matrix& g) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    const auto& k = kernels::active();
    if (t.requires_grad(a)) {
      // dA += g · B
      k.gemm_nn(g.rows(), bv.cols(), g.cols(), g.data(), bv.data(), t.grad_buffer(a).data());
    }
    if (t.requires_grad(b)) {
      // dB += gᵀ · A
      k.gemm_tn(g.rows(), av.cols(), g.cols(), g.data(), av.data(), t.grad_buffer(b).data());
    }
  });
}

Var Tape::add(Var a, Var b) {
  Matrix out = num::add(value(a), value(b));
  const bool rg = any_requires_grad({a, b});
  return push(std::move(out), rg, [a, b](Tape& t, const Matrix& g) {
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      Matrix& dst = t.grad_buffer(v);
      kernels::active().axpy(1.0, g.data(), dst.data(), g.size());
    }
  });
}

Var Tape::add_row_bias(Var a, Var bias) {
  const Matrix& av = value(a);
  const Matrix& bv = value(bias);
  if (bv.rows() != 1 || bv.cols() != av.cols()) {
    throw ShapeError("add_row_bias: bias " + bv.shape_string() + " for " + av.shape_string());
  }
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bv(0, j);
  }
  const bool rg = any_requires_grad({a, bias});
  return push(std::move(out), rg, [a, bias](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) kernels::active().axpy(1.0, g.data(), t.grad_buffer(a).data(), g.size());
    if (t.requires_grad(bias)) {
      Matrix& db = t.grad_buffer(bias);
      for (std::size_t i = 0; i < g.rows(); ++i) kernels::active().axpy(1.0, g.row(i).data(), db.data(), g.cols());
    }
  });
}

Var Tape::scale(Var a, double s) {
  Matrix out = num::scale(value(a), s);
  return push(std::move(out), requires_grad(a), [a, s](Tape& t, const Matrix& g) {
    kernels::active().axpy(s, g.data(), t.grad_buffer(a).data(), g.size());
  });
}

Var Tape::relu(Var a) {
  Matrix out = num::relu(value(a));
  return push(std::move(out), requires_grad(a), [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix& d = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      // Subgradient at exactly 0 is 0.
      if (x.data()[i] > 0.0) d.data()[i] += g.data()[i];
    }
  });
}

Var Tape::gelu(Var a) {
  const Matrix& x = value(a);
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return push(std::move(out), requires_grad(a), [a](Tape& t, const Matrix& g) {
    const Matrix& xv = t.value(a);
    Matrix& d = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv.data()[i];
      const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double dinner = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      d.data()[i] += g.data()[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner);
    }
  });
}

Var Tape::layer_norm(Var x, Var gain, double eps) {
  const Matrix& xv = value(x);
  const Matrix& gv = value(gain);
  if (gv.rows() != 1 || gv.cols() != xv.cols()) {
    throw ShapeError("layer_norm: gain " + gv.shape_string() + " for " + xv.shape_string());
  }
  const std::size_t n = xv.rows();
  const std::size_t d = xv.cols();
  Matrix xhat(n, d);
  std::vector<double> rstd(n);
  Matrix out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = xv.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (r[j] - mean) * rstd[i];
      out(i, j) = xhat(i, j) * gv(0, j);
    }
  }
  const bool rg = any_requires_grad({x, gain});
  return push(std::move(out), rg,
              [x, gain, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, const Matrix& g) {
                const std::size_t n = g.rows();
                const std::size_t d = g.cols();
                const Matrix& gv = t.value(gain);
                if (t.requires_grad(gain)) {
                  Matrix& dg = t.grad_buffer(gain);
                  for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < d; ++j) dg(0, j) += g(i, j) * xhat(i, j);
                  }
                }
                if (t.requires_grad(x)) {
                  Matrix& dx = t.grad_buffer(x);
                  const double inv_d = 1.0 / static_cast<double>(d);
                  for (std::size_t i = 0; i < n; ++i) {
                    double mean_dxhat = 0.0;
                    double mean_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      const double dxh = g(i, j) * gv(0, j);
                      mean_dxhat += dxh;
                      mean_dxhat_xhat += dxh * xhat(i, j);
                    }
                    mean_dxhat *= inv_d;
                    mean_dxhat_xhat *= inv_d;
                    for (std::size_t j = 0; j < d; ++j) {
                      const double dxh = g(i, j) * gv(0, j);
                      dx(i, j) += rstd[i] * (dxh - mean_dxhat - xhat(i, j) * mean_dxhat_xhat);
                    }
                  }
                }
              });
}

Var Tape::embedding(Var table, std::span<const int> ids) {
  const Matrix& tv = value(table);
  Matrix out(ids.size(), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= tv.rows()) {
      throw VocabError("embedding: id " + std::to_string(id) + " outside table of " + std::to_string(tv.rows()) +
                       " rows");
    }
    std::copy_n(tv.row(static_cast<std::size_t>(id)).data(), tv.cols(), out.row(i).data());
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return push(std::move(out), requires_grad(table), [table, idv = std::move(idv)](Tape& t, const Matrix& g) {
    Matrix& dt = t.grad_buffer(table);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      kernels::active().axpy(1.0, g.row(i).data(), dt.row(static_cast<std::size_t>(idv[i])).data(), g.cols());
    }
  });
}

Var Tape::causal_attention(Var q, Var k, Var v, std::size_t heads) {
  const Matrix& qv = value(q);
  const Matrix& kv = value(k);
  const Matrix& vv = value(v);
  require_same_shape(qv, kv, "causal_attention q/k");
  require_same_shape(qv, vv, "causal_attention q/v");
  const std::size_t n = qv.rows();
  const std::size_t d = qv.cols();
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                     " heads");
  }
  const std::size_t hd = d / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix out(n, d);
  std::vector<Matrix> probs;
  probs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Matrix qh = column_block(qv, h * hd, hd);
    const Matrix kh = column_block(kv, h * hd, hd);
    const Matrix vh = column_block(vv, h * hd, hd);
    Matrix p = num::matmul_nt(qh, kh);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = p.row(i);
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        r[j] *= scl;
        mx = std::max(mx, r[j]);
      }
      double s = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        r[j] = std::exp(r[j] - mx);
        s += r[j];
      }
      for (std::size_t j = 0; j <= i; ++j) r[j] /= s;
      for (std::size_t j = i + 1; j < n; ++j) r[j] = 0.0;
    }
    add_column_block(out, num::matmul(p, vh), h * hd);
    probs.push_back(std::move(p));
  }
  const bool rg = any_requires_grad({q, k, v});
  return push(std::move(out), rg, [q, k, v, hd, scl, probs = std::move(probs)](Tape& t, const Matrix& g) {
    const Matrix& qv = t.value(q);
    const Matrix& kv = t.value(k);
    const Matrix& vv = t.value(v);
    const std::size_t n = g.rows();
    for (std::size_t h = 0; h < probs.size(); ++h) {
      const Matrix& p = probs[h];
      const Matrix gh = column_block(g, h * hd, hd);
      const Matrix vh = column_block(vv, h * hd, hd);
      if (t.requires_grad(v)) add_column_block(t.grad_buffer(v), num::matmul_tn(p, gh), h * hd);
      if (!t.requires_grad(q) && !t.requires_grad(k)) continue;
      Matrix ds = num::matmul_nt(gh, vh);
      for (std::size_t i = 0; i < n; ++i) {
        auto r = ds.row(i);
        const auto pr = p.row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) dot += pr[j] * r[j];
        for (std::size_t j = 0; j <= i; ++j) r[j] = pr[j] * (r[j] - dot) * scl;
        for (std::size_t j = i + 1; j < n; ++j) r[j] = 0.0;
      }
      if (t.requires_grad(q)) add_column_block(t.grad_buffer(q), num::matmul(ds, column_block(kv, h * hd, hd)), h * hd);
      if (t.requires_grad(k)) {
        add_column_block(t.grad_buffer(k), num::matmul_tn(ds, column_block(qv, h * hd, hd)), h * hd);
      }
    }
  });
}

Var Tape::shift_rows(Var a) {
  const Matrix& av = value(a);
  Matrix out(av.rows(), av.cols());
  if (av.rows() > 1) std::copy(av.data(), av.data() + (av.rows() - 1) * av.cols(), out.data() + av.cols());
  return push(std::move(out), requires_grad(a), [a](Tape& t, const Matrix& g) {
    if (g.rows() < 2) return;
    Matrix& d = t.grad_buffer(a);
    kernels::active().axpy(1.0, g.data() + g.cols(), d.data(), (g.rows() - 1) * g.cols());
  });
}

Var Tape::slice_rows(Var a, std::size_t begin, std::size_t end) {
  Matrix out = num::slice_rows(value(a), begin, end);
  return push(std::move(out), requires_grad(a), [a, begin](Tape& t, const Matrix& g) {
    Matrix& d = t.grad_buffer(a);
    kernels::active().axpy(1.0, g.data(), d.data() + begin * d.cols(), g.size());
  });
}

Var Tape::logprob_of_targets(Var logits, std::span<const int> targets) {
  const Matrix& lv = value(logits);
  const double total = num::logprob_of_targets(lv, targets);
  std::vector<int> tv(targets.begin(), targets.end());
  return push(Matrix(1, 1, total), requires_grad(logits), [logits, tv = std::move(tv)](Tape& t, const Matrix& g) {
    const Matrix& lv = t.value(logits);
    Matrix& d = t.grad_buffer(logits);
    const double go = g(0, 0);
    for (std::size_t i = 0; i < tv.size(); ++i) {
      const auto r = lv.row(i);
      const double lse = row_logsumexp(r);
      auto dr = d.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) dr[j] -= go * std::exp(r[j] - lse);
      dr[static_cast<std::size_t>(tv[i])] += go;
    }
  });
}

Var Tape::sum_squares(Var a) {
  double s = 0.0;
  for (double v : value(a).values()) s += v * v;
  return push(Matrix(1, 1, s), requires_grad(a), [a](Tape& t, const Matrix& g) {
    kernels::active().axpy(2.0 * g(0, 0), t.value(a).data(), t.grad_buffer(a).data(), t.value(a).size());
  });
}

Var Tape::sum(Var a) {
  double s = 0.0;
  for (double v : value(a).values()) s += v;
  return push(Matrix(1, 1, s), requires_grad(a), [a](Tape& t, const Matrix& g) {
    Matrix& d = t.grad_buffer(a);
    for (double& x : d.values()) x += g(0, 0);
  });
}

GradCheckResult grad_check_detailed(const TapedScalarFn& f, const Matrix& at, const GradCheckOptions& opts) {
  if (!(opts.eps > 0.0)) throw InputError("grad_check: eps must be positive");
  Tape tape;
  const Var x = tape.variable(at);
  const Var out = f(tape, x);
  if (!std::isfinite(tape.value(out)(0, 0))) throw NumericError("grad_check: f is not finite at the base point");
  tape.backward(out);
  const Matrix analytic = tape.grad(x);

  auto eval = [&](const Matrix& point) {
    Tape t;
    const double v = t.value(f(t, t.constant(point)))(0, 0);
    if (!std::isfinite(v)) throw NumericError("grad_check: f is not finite in the eps-neighborhood");
    return v;
  };

  std::vector<std::size_t> entries = opts.entries;
  if (entries.empty()) {
    entries.resize(at.size());
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
  }
  GradCheckResult res;
  Matrix probe = at;
  for (std::size_t idx : entries) {
    if (idx >= at.size()) throw IndexError("grad_check: entry " + std::to_string(idx) + " out of range");
    const double x0 = at.data()[idx];
    const double h = opts.eps * (1.0 + std::abs(x0));
    probe.data()[idx] = x0 + h;
    const double fp = eval(probe);
    probe.data()[idx] = x0 - h;
    const double fm = eval(probe);
    probe.data()[idx] = x0;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic.data()[idx];
    const double denom = std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_entry = idx;
    }
    res.analytic.push_back(a);
    res.numeric.push_back(numeric);
  }
  return res;
}

double grad_check(const TapedScalarFn& f, const Matrix& at, double eps) {
  GradCheckOptions opts;
  opts.eps = eps;
  return grad_check_detailed(f, at, opts).max_rel_error;
}

}  // namespace gradsae::num
