#pragma once

#include <cstddef>
#include <string_view>

// Inner-loop kernels behind every dense product in the library.
//
// Two implementations exist: a scalar reference and an AVX2+FMA variant. The
// variant is chosen once at first use from CPUID; setting the environment
// variable GRADSAE_KERNELS=scalar forces the reference path. Both variants
// are checked against each other in tests/numcore/kernels_test.cpp.
//
// All gemm kernels accumulate into C (C += ...), row-major, tightly packed.

namespace gradsae::num::kernels {

enum class Variant { kScalar, kAvx2 };

struct KernelTable {
  Variant variant;
  std::string_view name;
  double (*dot)(const double* x, const double* y, std::size_t n);
  // y += a * x
  void (*axpy)(double a, const double* x, double* y, std::size_t n);
  // C(m×n) += A(m×k) · B(k×n)
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
  // C(m×n) += A(m×k) · B(n×k)ᵀ
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
  // C(k×n) += A(m×k)ᵀ · B(m×n)
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
};

const KernelTable& scalar_kernels();

// nullptr when the binary was built without AVX2 support or the CPU lacks it.
const KernelTable* avx2_kernels();

// The table every Matrix op dispatches through.
const KernelTable& active();

// Test hook; not thread-safe against concurrent kernel calls.
void force_variant(Variant v);

}  // namespace gradsae::num::kernels
