#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tvae/data.hpp"
#include "tvae/model.hpp"
#include "tvae/rng.hpp"

namespace tvae::eval {

enum class PplMode { elbo_bound, iw };

std::string to_string(PplMode m);
PplMode parse_ppl_mode(const std::string& s);

struct EvalConfig {
  std::size_t batch_size = 64;
  std::size_t max_len = 32;
  std::size_t mi_max_examples = 2000;
  double au_delta = 0.01;
  PplMode ppl_mode = PplMode::elbo_bound;
  std::size_t iw_samples = 50;
  std::uint64_t seed = 1234;
};

/// Row-major N x D posterior parameters in example order.
struct Posteriors {
  std::size_t n = 0, d = 0;
  std::vector<double> mu;
  std::vector<double> log_sigma;
};

struct ElboTotals {
  double neg_elbo = 0.0;  // summed over examples
  double recon_nll = 0.0;
  double kl = 0.0;
  std::size_t token_count = 0;
  std::size_t example_count = 0;
};

struct MetricsReport {
  double ppl = 0.0;
  PplMode ppl_mode = PplMode::elbo_bound;
  double ppl_elbo = 0.0;
  double ppl_iw = 0.0;  // 0 when not computed
  double neg_elbo = 0.0;  // per example
  double recon_nll = 0.0;
  double kl = 0.0;
  double mi = 0.0;
  std::size_t au = 0;
  double au_fraction = 0.0;
  std::size_t latent_dim = 0;
  std::size_t token_count = 0;
  std::size_t example_count = 0;
  std::size_t mi_examples = 0;
  double au_delta = 0.01;
  std::size_t iw_samples = 0;
  std::uint64_t seed = 0;
};

/// Clean, unshuffled batches for evaluation.
std::vector<data::Batch> eval_batches(const std::vector<data::Sequence>& split, std::size_t batch_size,
                                      std::size_t max_len);

template <typename T>
Posteriors collect_posteriors(const model::TransformerVAE<T>& model, const std::vector<data::Batch>& batches,
                              std::size_t max_examples = 0);

/// Single-sample ELBO per example with closed-form, unthresholded KL.
template <typename T>
ElboTotals test_elbo(const model::TransformerVAE<T>& model, const std::vector<data::Batch>& batches, Rng& rng);

/// Summed importance-weighted bound -log (1/k) sum_s p(x, z_s) / q(z_s | x).
template <typename T>
double iw_neg_log_likelihood(const model::TransformerVAE<T>& model, const std::vector<data::Batch>& batches,
                             std::size_t k, Rng& rng);

/// exp(total_nll / token_count).
double perplexity(double total_nll, std::size_t token_count);

/// Aggregate-posterior estimator with one z per example.
double mutual_information(const Posteriors& post, Rng& rng);

/// Dimensions whose posterior mean has sample variance (N - 1) above delta.
std::size_t active_units(const Posteriors& post, double delta);

template <typename T>
MetricsReport full_report(const model::TransformerVAE<T>& model, const std::vector<data::Sequence>& split,
                          const EvalConfig& config);

std::vector<std::string> report_columns();
/// Formatted fields matching report_columns() after run_id and split.
std::vector<std::string> report_values(const MetricsReport& report);
void append_report_csv(const std::filesystem::path& path, const std::string& run_id, const std::string& split,
                       const MetricsReport& report);
std::string format_report(const MetricsReport& report);

}  // namespace tvae::eval
