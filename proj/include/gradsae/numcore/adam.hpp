#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gradsae/numcore/matrix.hpp"

namespace gradsae::num {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

// Adam over a fixed list of tensors. Moment buffers are allocated on the
// first step to match each tensor's shape.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(std::span<Matrix* const> params, std::span<const Matrix> grads, double lr);
  std::size_t steps_taken() const noexcept { return t_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

// Scales grads in place so their joint L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_global_norm(std::span<Matrix> grads, double max_norm);

}  // namespace gradsae::num
