#pragma once

#include <cstddef>
#include <string_view>

// Dense inner-loop kernels behind the autodiff core. Each kernel has a
// portable scalar reference and SIMD variants (AVX2+FMA on x86-64, NEON on
// AArch64). The variant is chosen once at startup from the CPU features and
// can be pinned with TVAE_ISA=scalar|avx2|neon or set_isa().
//
// SIMD variants reassociate sums, so they agree with the scalar reference to
// rounding tolerance rather than bit-for-bit. Within one ISA every kernel is
// deterministic.
namespace tvae::kernels {

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa);
bool isa_supported(Isa isa);
Isa detected_isa();
Isa active_isa();
/// Throws tvae::ValueError if the CPU cannot run `isa`.
void set_isa(Isa isa);
Isa parse_isa(std::string_view name);

float dot(const float* a, const float* b, std::size_t n);
double dot(const double* a, const double* b, std::size_t n);

/// y += alpha * x
void axpy(float alpha, const float* x, float* y, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);

/// Row-major C (m x n) = op(A) * op(B), or C += ... when `accumulate`.
/// op(A) is m x k: A is stored m x k, or k x m when trans_a.
/// op(B) is k x n: B is stored k x n, or n x k when trans_b.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate);

/// RAII pin of the active ISA, restored on scope exit. Test helper.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa) : previous_(active_isa()) { set_isa(isa); }
  ~ScopedIsa() { set_isa(previous_); }
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa previous_;
};

}  // namespace tvae::kernels
