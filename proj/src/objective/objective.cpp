#include "tvae/objective.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tvae/error.hpp"
#include "tvae/ops.hpp"

namespace tvae::objective {

using diff::Tensor;

std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::zero: return "zero";
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::cyclical: return "cyclical";
  }
  return "?";
}

ScheduleKind parse_schedule_kind(const std::string& s) {
  for (auto k : {ScheduleKind::zero, ScheduleKind::constant, ScheduleKind::linear,
                 ScheduleKind::cyclical}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown KL schedule '" + s + "' (zero, constant, linear, cyclical)");
}

void KlSchedule::validate() const {
  if (kind == ScheduleKind::constant && !(beta >= 0.0 && beta <= 1.0)) {
    throw ConfigError("constant KL weight must lie in [0, 1]");
  }
  if ((kind == ScheduleKind::linear || kind == ScheduleKind::cyclical) && !(epochs > 0.0)) {
    throw ConfigError("KL schedule epochs must be positive");
  }
  if (kind == ScheduleKind::cyclical) {
    if (cycles == 0) throw ConfigError("cyclical schedule needs at least one cycle");
    if (!(ramp_fraction > 0.0 && ramp_fraction <= 1.0)) {
      throw ConfigError("cyclical ramp_fraction must lie in (0, 1]");
    }
  }
}

std::string KlSchedule::describe() const {
  std::ostringstream os;
  os << to_string(kind);
  if (kind == ScheduleKind::constant) os << "(" << beta << ")";
  if (kind == ScheduleKind::linear) os << "(" << epochs << ")";
  if (kind == ScheduleKind::cyclical) os << "(" << cycles << ", " << ramp_fraction << ", " << epochs << ")";
  return os.str();
}

void LossConfig::validate() const {
  schedule.validate();
  if (!(kl_threshold >= 0.0)) throw ConfigError("kl_threshold must be >= 0");
}

double kl_weight(const KlSchedule& s, std::size_t global_step, std::size_t steps_per_epoch) {
  if (steps_per_epoch == 0) throw ValueError("kl_weight: steps_per_epoch must be at least 1");
  const double step = static_cast<double>(global_step);
  switch (s.kind) {
    case ScheduleKind::zero:
      return 0.0;
    case ScheduleKind::constant:
      return s.beta;
    case ScheduleKind::linear:
      return std::min(1.0, step / (static_cast<double>(steps_per_epoch) * s.epochs));
    case ScheduleKind::cyclical: {
      const double cycle = static_cast<double>(steps_per_epoch) * s.epochs / static_cast<double>(s.cycles);
      const double into = std::fmod(step, cycle) / cycle;
      return std::min(1.0, into / s.ramp_fraction);
    }
  }
  return 0.0;
}

template <typename T>
Tensor<T> gaussian_kl(const Tensor<T>& mu, const Tensor<T>& log_sigma) {
  if (mu.rank() != 2 || mu.shape() != log_sigma.shape()) {
    throw DimensionError("gaussian_kl: mu " + diff::shape_str(mu.shape()) + " and log_sigma " +
                         diff::shape_str(log_sigma.shape()) + " must both be batch x latent");
  }
  const std::size_t b = mu.dim(0), d = mu.dim(1);
  const auto m = mu.data();
  const auto s = log_sigma.data();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!std::isfinite(m[i]) || !std::isfinite(s[i])) {
      throw DivergenceError("gaussian_kl: non-finite posterior parameters");
    }
  }
  // 0.5 * (mu^2 + sigma^2 - 1 - log sigma^2), with the sigma part as
  // expm1(2s) - 2s so that it cannot round below zero.
  std::vector<T> kl(d, T(0));
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const T mj = m[i * d + j], sj = s[i * d + j];
      const T var_part = std::max(T(0), std::expm1(T(2) * sj) - T(2) * sj);
      kl[j] += T(0.5) * (mj * mj + var_part);
    }
  }
  for (auto& v : kl) v /= static_cast<T>(b);
  Tensor<T> out({d}, std::move(kl));
  for (T v : out.data()) {
    if (!std::isfinite(v)) throw DivergenceError("gaussian_kl: KL overflowed");
  }
  if (!diff::grad_enabled() || !(mu.requires_grad() || log_sigma.requires_grad())) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.is_leaf = false;
  node.parents = {mu.node(), log_sigma.node()};
  node.backward = [b, d](diff::detail::Node<T>& self) {
    auto& pm = *self.parents[0];
    auto& ps = *self.parents[1];
    const T inv_b = T(1) / static_cast<T>(b);
    if (pm.requires_grad) {
      pm.ensure_grad();
      for (std::size_t i = 0; i < b * d; ++i) pm.grad[i] += self.grad[i % d] * pm.data[i] * inv_b;
    }
    if (ps.requires_grad) {
      ps.ensure_grad();
      for (std::size_t i = 0; i < b * d; ++i) {
        ps.grad[i] += self.grad[i % d] * std::expm1(T(2) * ps.data[i]) * inv_b;
      }
    }
  };
  return out;
}

template <typename T>
Tensor<T> threshold_kl(const Tensor<T>& kl_per_dim, double lambda) {
  if (!(lambda >= 0.0)) throw ValueError("threshold_kl: lambda must be >= 0");
  if (lambda == 0.0) return diff::sum_all(kl_per_dim);
  return diff::sum_all(diff::clamp_min(kl_per_dim, static_cast<T>(lambda)));
}

template <typename T>
diff::CrossEntropy<T> reconstruction_nll(const Tensor<T>& logits, const diff::Ids& targets,
                                         const diff::Mask& mask) {
  auto ce = diff::cross_entropy_logits(logits, targets, mask);
  if (ce.count == 0) throw ValueError("reconstruction_nll: mask selects no tokens");
  return ce;
}

template <typename T>
LossBreakdown<T> elbo_loss(const Tensor<T>& logits, const diff::Ids& targets, const diff::Mask& mask,
                           const model::LatentState<T>& latent, double beta, double lambda) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ValueError("elbo_loss: beta must lie in [0, 1]");
  LossBreakdown<T> out;
  out.batch_size = targets.shape.at(0);
  const auto ce = reconstruction_nll(logits, targets, mask);
  out.token_count = ce.count;
  const Tensor<T> recon = diff::scale(ce.nll, T(1) / static_cast<T>(out.batch_size));
  const Tensor<T> kl = gaussian_kl(latent.mu, latent.log_sigma);
  const Tensor<T> kl_t = threshold_kl(kl, lambda);
  out.recon_nll = static_cast<double>(recon.item());
  out.kl_per_dim.assign(kl.data().begin(), kl.data().end());
  for (double v : out.kl_per_dim) out.kl_raw += v;
  out.kl_thresholded = static_cast<double>(kl_t.item());
  out.beta = beta;
  out.total_tensor = beta == 0.0 ? recon : diff::add(recon, diff::scale(kl_t, static_cast<T>(beta)));
  out.total = static_cast<double>(out.total_tensor.item());
  return out;
}

template <typename T>
LossBreakdown<T> elbo_loss(const Tensor<T>& logits, const diff::Ids& targets, const diff::Mask& mask,
                           const model::LatentState<T>& latent, const LossConfig& config,
                           std::size_t global_step, std::size_t steps_per_epoch) {
  return elbo_loss(logits, targets, mask, latent,
                   kl_weight(config.schedule, global_step, steps_per_epoch),
                   config.effective_threshold());
}

#define TVAE_INSTANTIATE_OBJECTIVE(T)                                                            \
  template Tensor<T> gaussian_kl(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> threshold_kl(const Tensor<T>&, double);                                     \
  template diff::CrossEntropy<T> reconstruction_nll(const Tensor<T>&, const diff::Ids&,          \
                                                    const diff::Mask&);                          \
  template LossBreakdown<T> elbo_loss(const Tensor<T>&, const diff::Ids&, const diff::Mask&,     \
                                      const model::LatentState<T>&, double, double);             \
  template LossBreakdown<T> elbo_loss(const Tensor<T>&, const diff::Ids&, const diff::Mask&,     \
                                      const model::LatentState<T>&, const LossConfig&,           \
                                      std::size_t, std::size_t);

TVAE_INSTANTIATE_OBJECTIVE(float)
TVAE_INSTANTIATE_OBJECTIVE(double)

#undef TVAE_INSTANTIATE_OBJECTIVE

}  // namespace tvae::objective
