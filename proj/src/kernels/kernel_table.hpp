#pragma once

#include <cstddef>

namespace tvae::kernels::detail {

struct KernelTable {
  float (*dot_f32)(const float*, const float*, std::size_t);
  double (*dot_f64)(const double*, const double*, std::size_t);
  void (*axpy_f32)(float, const float*, float*, std::size_t);
  void (*axpy_f64)(double, const double*, double*, std::size_t);
};

const KernelTable& scalar_table();
// Null when the variant is not compiled for this target.
const KernelTable* avx2_table();
const KernelTable* neon_table();

}  // namespace tvae::kernels::detail
