#include "tvae/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

#include "kernel_table.hpp"
#include "tvae/error.hpp"

namespace tvae::kernels {

namespace {

using detail::KernelTable;

const KernelTable* table_for(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return &detail::scalar_table();
    case Isa::avx2:
#if defined(__x86_64__) || defined(_M_X64)
      __builtin_cpu_init();
      if (!__builtin_cpu_supports("avx2") || !__builtin_cpu_supports("fma")) return nullptr;
#endif
      return detail::avx2_table();
    case Isa::neon:
      return detail::neon_table();
  }
  return nullptr;
}

Isa initial_isa() {
  if (const char* env = std::getenv("TVAE_ISA"); env != nullptr && *env != '\0') {
    const Isa requested = parse_isa(env);
    if (isa_supported(requested)) return requested;
  }
  return detected_isa();
}

struct Active {
  std::atomic<const KernelTable*> table;
  std::atomic<Isa> isa;
  Active() {
    const Isa start = initial_isa();
    table.store(table_for(start));
    isa.store(start);
  }
};

Active& active() {
  static Active instance;
  return instance;
}

const KernelTable& table() { return *active().table.load(std::memory_order_relaxed); }

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
    case Isa::neon:
      return "neon";
  }
  return "unknown";
}

Isa parse_isa(std::string_view name) {
  if (name == "scalar") return Isa::scalar;
  if (name == "avx2") return Isa::avx2;
  if (name == "neon") return Isa::neon;
  throw ValueError("unknown kernel ISA '" + std::string(name) + "'");
}

bool isa_supported(Isa isa) { return table_for(isa) != nullptr; }

Isa detected_isa() {
  if (isa_supported(Isa::avx2)) return Isa::avx2;
  if (isa_supported(Isa::neon)) return Isa::neon;
  return Isa::scalar;
}

Isa active_isa() { return active().isa.load(); }

void set_isa(Isa isa) {
  const KernelTable* t = table_for(isa);
  if (t == nullptr) throw ValueError("kernel ISA '" + std::string(isa_name(isa)) + "' is not supported on this CPU");
  active().table.store(t);
  active().isa.store(isa);
}

float dot(const float* a, const float* b, std::size_t n) { return table().dot_f32(a, b, n); }
double dot(const double* a, const double* b, std::size_t n) { return table().dot_f64(a, b, n); }

void axpy(float alpha, const float* x, float* y, std::size_t n) { table().axpy_f32(alpha, x, y, n); }
void axpy(double alpha, const double* x, double* y, std::size_t n) {
  table().axpy_f64(alpha, x, y, n);
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T(0);
  }
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      const T* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) axpy(arow[p], b + p * n, crow, n);
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* arow = a + i * k;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += dot(arow, b + j * k, k);
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t p = 0; p < k; ++p) {
      const T* arow = a + p * m;
      const T* brow = b + p * n;
      for (std::size_t i = 0; i < m; ++i) axpy(arow[i], brow, c + i * n, n);
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T sum = 0;
        for (std::size_t p = 0; p < k; ++p) sum += a[p * m + i] * b[j * k + p];
        c[i * n + j] += sum;
      }
    }
  }
}

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t, const float*,
                          const float*, float*, bool);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t, const double*,
                           const double*, double*, bool);

}  // namespace tvae::kernels
