#include "gradsae/numcore/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string_view>

#include "kernels_impl.hpp"

namespace gradsae::num::kernels {
namespace {

constexpr KernelTable kScalarTable{Variant::kScalar, "scalar", scalar::dot, scalar::axpy,
                                   scalar::gemm_nn,  scalar::gemm_nt, scalar::gemm_tn};

#if defined(GRADSAE_HAVE_AVX2)
constexpr KernelTable kAvx2Table{Variant::kAvx2, "avx2", avx2::dot, avx2::axpy,
                                 avx2::gemm_nn,  avx2::gemm_nt, avx2::gemm_tn};

bool cpu_has_avx2() {
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}
#endif

const KernelTable* detect() {
  if (const char* env = std::getenv("GRADSAE_KERNELS"); env && std::string_view(env) == "scalar") {
    return &kScalarTable;
  }
  if (const KernelTable* t = avx2_kernels()) return t;
  return &kScalarTable;
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> table{detect()};
  return table;
}

}  // namespace

const KernelTable& scalar_kernels() { return kScalarTable; }

const KernelTable* avx2_kernels() {
#if defined(GRADSAE_HAVE_AVX2)
  static const bool ok = cpu_has_avx2();
  return ok ? &kAvx2Table : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active() { return *slot().load(std::memory_order_relaxed); }

void force_variant(Variant v) {
  if (v == Variant::kAvx2 && avx2_kernels()) {
    slot().store(avx2_kernels());
  } else {
    slot().store(&kScalarTable);
  }
}

}  // namespace gradsae::num::kernels
