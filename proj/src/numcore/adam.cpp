#include "gradsae/numcore/adam.hpp"

#include <cmath>

#include "gradsae/error.hpp"

namespace gradsae::num {

void Adam::step(std::span<Matrix* const> params, std::span<const Matrix> grads, double lr) {
  if (params.size() != grads.size()) throw ShapeError("Adam::step: parameter/gradient count mismatch");
  if (m_.empty()) {
    for (const Matrix* p : params) {
      m_.emplace_back(p->rows(), p->cols());
      v_.emplace_back(p->rows(), p->cols());
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    const Matrix& g = grads[i];
    require_same_shape(p, g, "Adam::step");
    double* pm = m_[i].data();
    double* pv = v_[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g.data()[j];
      pm[j] = cfg_.beta1 * pm[j] + (1.0 - cfg_.beta1) * gj;
      pv[j] = cfg_.beta2 * pv[j] + (1.0 - cfg_.beta2) * gj * gj;
      p.data()[j] -= lr * (pm[j] / bc1) / (std::sqrt(pv[j] / bc2) + cfg_.eps);
    }
  }
}

double clip_global_norm(std::span<Matrix> grads, double max_norm) {
  double sq = 0.0;
  for (const Matrix& g : grads) {
    for (double v : g.values()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Matrix& g : grads) {
      for (double& v : g.values()) v *= s;
    }
  }
  return norm;
}

}  // namespace gradsae::num
