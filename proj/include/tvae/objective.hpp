#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tvae/model.hpp"
#include "tvae/ops.hpp"
#include "tvae/tensor.hpp"

namespace tvae::objective {

enum class ScheduleKind { zero, constant, linear, cyclical };

std::string to_string(ScheduleKind k);
ScheduleKind parse_schedule_kind(const std::string& s);

/// KL weight over training. `epochs` is the ramp length for linear and the
/// full horizon (split into `cycles` equal cycles) for cyclical.
struct KlSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  double beta = 1.0;  // constant only
  double epochs = 50.0;
  std::size_t cycles = 4;
  double ramp_fraction = 0.5;

  void validate() const;
  std::string describe() const;
};

struct LossConfig {
  KlSchedule schedule;
  double kl_threshold = 0.0;  // lambda; only used when free bits are enabled
  bool free_bits_enabled = false;

  void validate() const;
  double effective_threshold() const { return free_bits_enabled ? kl_threshold : 0.0; }
};

/// Scalars for logging plus the differentiable total.
template <typename T>
struct LossBreakdown {
  diff::Tensor<T> total_tensor;
  double recon_nll = 0.0;  // token-summed NLL, averaged over the batch
  std::vector<double> kl_per_dim;
  double kl_raw = 0.0;
  double kl_thresholded = 0.0;
  double beta = 0.0;
  double total = 0.0;
  std::size_t token_count = 0;
  std::size_t batch_size = 0;
};

/// Per-dimension KL(q || N(0, I)), averaged over the batch. Shape [D_z].
template <typename T>
diff::Tensor<T> gaussian_kl(const diff::Tensor<T>& mu, const diff::Tensor<T>& log_sigma);

/// sum_i max(lambda, kl_i). Dimensions at or below the floor contribute the
/// constant lambda and no gradient.
template <typename T>
diff::Tensor<T> threshold_kl(const diff::Tensor<T>& kl_per_dim, double lambda);

/// Token-summed cross entropy over unmasked positions. Throws ValueError
/// when the mask selects nothing.
template <typename T>
diff::CrossEntropy<T> reconstruction_nll(const diff::Tensor<T>& logits, const diff::Ids& targets,
                                         const diff::Mask& mask);

double kl_weight(const KlSchedule& schedule, std::size_t global_step, std::size_t steps_per_epoch);

/// total = recon_nll / batch + beta * threshold_kl(gaussian_kl(mu, log_sigma), lambda).
template <typename T>
LossBreakdown<T> elbo_loss(const diff::Tensor<T>& logits, const diff::Ids& targets,
                           const diff::Mask& mask, const model::LatentState<T>& latent,
                           double beta, double lambda);

template <typename T>
LossBreakdown<T> elbo_loss(const diff::Tensor<T>& logits, const diff::Ids& targets,
                           const diff::Mask& mask, const model::LatentState<T>& latent,
                           const LossConfig& config, std::size_t global_step,
                           std::size_t steps_per_epoch);

}  // namespace tvae::objective
