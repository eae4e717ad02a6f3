#include "tvae/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace tvae::diff {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const std::function<Tensor<double>()>& loss,
                           std::vector<std::pair<std::string, Tensor<double>>> params, double step,
                           double floor) {
  for (auto& [name, p] : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  loss().backward();

  GradCheckResult result;
  NoGradGuard no_grad;
  for (auto& [name, p] : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + step;
      const double up = loss().item();
      values[i] = original - step;
      const double down = loss().item();
      values[i] = original;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(analytic[i], numeric, floor);
      ++result.coordinates;
      if (err > result.max_rel_error || result.coordinates == 1) {
        result.max_rel_error = err;
        result.worst_tensor = name;
        result.worst_index = i;
        result.analytic = analytic[i];
        result.numeric = numeric;
      }
    }
  }
  return result;
}

GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& fn,
                           Tensor<double> x, double step, double floor) {
  auto r = grad_check([&] { return fn(x); }, {{std::string{}, x}}, step, floor);
  r.worst_tensor.clear();
  return r;
}

}  // namespace tvae::diff
