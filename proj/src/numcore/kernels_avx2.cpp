// Compiled with -mavx2 -mfma; only reached after a CPUID check.
#include "kernels_impl.hpp"

#include <immintrin.h>

#include <vector>

namespace gradsae::num::kernels::avx2 {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

// C[R×8] += A'[R×inner] · B[inner×8], A'(r, q) = a[r*ars + q*acs].
template <int R>
inline void block8(std::size_t inner, const double* a, std::size_t ars, std::size_t acs, const double* b,
                   std::size_t ldb, double* c, std::size_t ldc) {
  __m256d lo[R];
  __m256d hi[R];
  for (int r = 0; r < R; ++r) {
    lo[r] = _mm256_loadu_pd(c + r * ldc);
    hi[r] = _mm256_loadu_pd(c + r * ldc + 4);
  }
  for (std::size_t q = 0; q < inner; ++q) {
    const __m256d b0 = _mm256_loadu_pd(b + q * ldb);
    const __m256d b1 = _mm256_loadu_pd(b + q * ldb + 4);
    for (int r = 0; r < R; ++r) {
      const __m256d av = _mm256_broadcast_sd(a + r * ars + q * acs);
      lo[r] = _mm256_fmadd_pd(av, b0, lo[r]);
      hi[r] = _mm256_fmadd_pd(av, b1, hi[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    _mm256_storeu_pd(c + r * ldc, lo[r]);
    _mm256_storeu_pd(c + r * ldc + 4, hi[r]);
  }
}

template <int R>
inline void block4(std::size_t inner, const double* a, std::size_t ars, std::size_t acs, const double* b,
                   std::size_t ldb, double* c, std::size_t ldc) {
  __m256d acc[R];
  for (int r = 0; r < R; ++r) acc[r] = _mm256_loadu_pd(c + r * ldc);
  for (std::size_t q = 0; q < inner; ++q) {
    const __m256d b0 = _mm256_loadu_pd(b + q * ldb);
    for (int r = 0; r < R; ++r) {
      acc[r] = _mm256_fmadd_pd(_mm256_broadcast_sd(a + r * ars + q * acs), b0, acc[r]);
    }
  }
  for (int r = 0; r < R; ++r) _mm256_storeu_pd(c + r * ldc, acc[r]);
}

template <int R>
inline void row_panel(std::size_t n, std::size_t inner, const double* a, std::size_t ars, std::size_t acs,
                      const double* b, double* c) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) block8<R>(inner, a, ars, acs, b + j, n, c + j, n);
  for (; j + 4 <= n; j += 4) block4<R>(inner, a, ars, acs, b + j, n, c + j, n);
  for (; j < n; ++j) {
    for (int r = 0; r < R; ++r) {
      double s = c[r * n + j];
      for (std::size_t q = 0; q < inner; ++q) s += a[r * ars + q * acs] * b[q * n + j];
      c[r * n + j] = s;
    }
  }
}

// C(rows×n) += A'(rows×inner) · B(inner×n)
void gemm_strided(std::size_t rows, std::size_t n, std::size_t inner, const double* a, std::size_t ars,
                  std::size_t acs, const double* b, double* c) {
  std::size_t r = 0;
  for (; r + 4 <= rows; r += 4) row_panel<4>(n, inner, a + r * ars, ars, acs, b, c + r * n);
  for (; r < rows; ++r) row_panel<1>(n, inner, a + r * ars, ars, acs, b, c + r * n);
}

}  // namespace

double dot(const double* x, const double* y, std::size_t n) {
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
    s1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), s1);
  }
  for (; i + 4 <= n; i += 4) s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
  double s = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy(double a, const double* x, double* y, std::size_t n) {
  const __m256d av = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  gemm_strided(m, n, k, a, k, 1, b, c);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  thread_local std::vector<double> bt;
  bt.resize(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  gemm_strided(m, n, k, a, k, 1, bt.data(), c);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  gemm_strided(k, n, m, a, 1, k, b, c);
}

}  // namespace gradsae::num::kernels::avx2
