#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tvae/tensor.hpp"

namespace tvae::diff {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;  // empty for the single-tensor form
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Relative error used by the checks: |a - n| / max(|a|, |n|, floor). The
/// floor keeps coordinates whose true derivative is ~0 from dividing noise by
/// noise.
double relative_error(double analytic, double numeric, double floor);

/// Central differences on every coordinate of `x` against the reverse-mode
/// gradient of scalar `fn(x)`. `x` is perturbed in place and restored.
GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& fn,
                           Tensor<double> x, double step = 1e-4, double floor = 1e-6);

/// Same check over a set of named leaves that `loss` closes over.
GradCheckResult grad_check(const std::function<Tensor<double>()>& loss,
                           std::vector<std::pair<std::string, Tensor<double>>> params,
                           double step = 1e-4, double floor = 1e-6);

}  // namespace tvae::diff
