#include "tvae/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "tvae/error.hpp"
#include "tvae/ops.hpp"

namespace tvae::eval {

using diff::Tensor;

namespace {

double log_mean_exp(const std::vector<double>& v) {
  const double peak = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(peak)) return peak;
  double total = 0;
  for (double x : v) total += std::exp(x - peak);
  return peak + std::log(total / static_cast<double>(v.size()));
}

constexpr double kHalfLog2Pi = 0.91893853320467274178;

// log N(z; mu, exp(s)^2) summed over dimensions.
double log_normal(const double* z, const double* mu, const double* s, std::size_t d) {
  double out = 0;
  for (std::size_t j = 0; j < d; ++j) {
    const double u = (z[j] - mu[j]) * std::exp(-s[j]);
    out += -kHalfLog2Pi - s[j] - 0.5 * u * u;
  }
  return out;
}

double kl_row(const double* mu, const double* s, std::size_t d) {
  double out = 0;
  for (std::size_t j = 0; j < d; ++j) out += 0.5 * (mu[j] * mu[j] + std::max(0.0, std::expm1(2 * s[j]) - 2 * s[j]));
  return out;
}

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// Per-row sums of token NLL for a batch.
template <typename T>
std::vector<double> row_nll(const Tensor<T>& logits, const data::Batch& batch) {
  const Tensor<T> nll = diff::token_nll(logits, batch.tgt_out, batch.tgt_mask);
  const std::size_t b = batch.size(), len = batch.tgt_out.shape[1];
  std::vector<double> out(b, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < len; ++j) out[i] += static_cast<double>(nll[i * len + j]);
  }
  return out;
}

template <typename T>
std::vector<double> to_double(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace

std::string to_string(PplMode m) { return m == PplMode::elbo_bound ? "elbo_bound" : "iw"; }

PplMode parse_ppl_mode(const std::string& s) {
  if (s == "elbo_bound" || s == "elbo") return PplMode::elbo_bound;
  if (s == "iw") return PplMode::iw;
  throw ConfigError("ppl mode must be 'elbo_bound' or 'iw', got '" + s + "'");
}

std::vector<data::Batch> eval_batches(const std::vector<data::Sequence>& split, std::size_t batch_size,
                                      std::size_t max_len) {
  if (split.empty()) throw ValueError("evaluation split is empty");
  data::BatchOptions opt;
  opt.batch_size = batch_size;
  opt.max_len = max_len;
  opt.noise = 0.0;
  opt.shuffle = false;
  Rng unused;
  return data::batchify(split, opt, unused);
}

template <typename T>
Posteriors collect_posteriors(const model::TransformerVAE<T>& model, const std::vector<data::Batch>& batches,
                              std::size_t max_examples) {
  diff::NoGradGuard no_grad;
  Posteriors post;
  post.d = model.config().latent_dim;
  for (const auto& batch : batches) {
    if (max_examples && post.n >= max_examples) break;
    const auto [mu, ls] = model.posterior(batch.src_ids, batch.src_mask);
    const std::size_t take = max_examples ? std::min(batch.size(), max_examples - post.n) : batch.size();
    post.mu.insert(post.mu.end(), mu.data().begin(), mu.data().begin() + static_cast<std::ptrdiff_t>(take * post.d));
    post.log_sigma.insert(post.log_sigma.end(), ls.data().begin(),
                          ls.data().begin() + static_cast<std::ptrdiff_t>(take * post.d));
    post.n += take;
  }
  return post;
}

template <typename T>
ElboTotals test_elbo(const model::TransformerVAE<T>& model, const std::vector<data::Batch>& batches, Rng& rng) {
  if (batches.empty()) throw ValueError("test_elbo: empty split");
  diff::NoGradGuard no_grad;
  ElboTotals totals;
  const std::size_t d = model.config().latent_dim;
  for (const auto& batch : batches) {
    model::ForwardOptions<T> opt;
    opt.latent = model::LatentMode::sampled;
    opt.rng = &rng;
    const auto out = model.forward(batch, opt);
    const auto recon = row_nll(out.logits, batch);
    const auto mu = to_double(out.latent.mu);
    const auto ls = to_double(out.latent.log_sigma);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double kl = kl_row(&mu[i * d], &ls[i * d], d);
      totals.recon_nll += recon[i];
      totals.kl += kl;
      totals.neg_elbo += recon[i] + kl;
    }
    for (auto m : batch.tgt_mask.values) totals.token_count += m;
    totals.example_count += batch.size();
  }
  return totals;
}

template <typename T>
double iw_neg_log_likelihood(const model::TransformerVAE<T>& model, const std::vector<data::Batch>& batches,
                             std::size_t k, Rng& rng) {
  if (k == 0) throw ValueError("importance sampling needs at least one sample");
  diff::NoGradGuard no_grad;
  const std::size_t d = model.config().latent_dim;
  double total = 0;
  for (const auto& batch : batches) {
    const std::size_t b = batch.size();
    const auto [mu_t, ls_t] = model.posterior(batch.src_ids, batch.src_mask);
    const auto mu = to_double(mu_t);
    const auto ls = to_double(ls_t);
    std::vector<std::vector<double>> log_w(b, std::vector<double>(k));
    const std::vector<double> zero(d, 0.0);
    for (std::size_t s = 0; s < k; ++s) {
      const auto lat = model::TransformerVAE<T>::reparameterize(mu_t, ls_t, rng);
      const auto z = to_double(lat.z);
      const auto recon = row_nll(model.decode(model.project_latent(lat.z), batch.tgt_in, batch.tgt_mask), batch);
      for (std::size_t i = 0; i < b; ++i) {
        const double* zi = &z[i * d];
        log_w[i][s] = -recon[i] + log_normal(zi, zero.data(), zero.data(), d) -
                      log_normal(zi, &mu[i * d], &ls[i * d], d);
      }
    }
    for (std::size_t i = 0; i < b; ++i) total -= log_mean_exp(log_w[i]);
  }
  return total;
}

double perplexity(double total_nll, std::size_t token_count) {
  if (token_count == 0) throw ValueError("perplexity: token_count must be at least 1");
  return std::exp(total_nll / static_cast<double>(token_count));
}

double mutual_information(const Posteriors& post, Rng& rng) {
  if (post.n < 2) throw ValueError("mutual_information: need at least 2 examples");
  const std::size_t n = post.n, d = post.d;
  std::vector<double> z(n * d), inv_sigma(n * d), offset(n, 0.0);
  for (std::size_t i = 0; i < n * d; ++i) {
    z[i] = post.mu[i] + std::exp(post.log_sigma[i]) * rng.normal();
    inv_sigma[i] = std::exp(-post.log_sigma[i]);
    offset[i / d] -= kHalfLog2Pi + post.log_sigma[i];
  }
  std::vector<double> cross(n);
  double total = 0;
  for (std::size_t a = 0; a < n; ++a) {
    const double* za = &z[a * d];
    for (std::size_t m = 0; m < n; ++m) {
      const double* mu = &post.mu[m * d];
      const double* is = &inv_sigma[m * d];
      double q = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const double u = (za[j] - mu[j]) * is[j];
        q += u * u;
      }
      cross[m] = offset[m] - 0.5 * q;
    }
    total += cross[a] - log_mean_exp(cross);
  }
  return total / static_cast<double>(n);
}

std::size_t active_units(const Posteriors& post, double delta) {
  if (post.n < 2) throw ValueError("active_units: need at least 2 examples");
  std::vector<double> mean(post.d, 0.0), var(post.d, 0.0);
  for (std::size_t i = 0; i < post.n; ++i) {
    for (std::size_t j = 0; j < post.d; ++j) mean[j] += post.mu[i * post.d + j];
  }
  for (auto& m : mean) m /= static_cast<double>(post.n);
  for (std::size_t i = 0; i < post.n; ++i) {
    for (std::size_t j = 0; j < post.d; ++j) {
      const double c = post.mu[i * post.d + j] - mean[j];
      var[j] += c * c;
    }
  }
  std::size_t au = 0;
  for (double v : var) au += v / static_cast<double>(post.n - 1) > delta;
  return au;
}

template <typename T>
MetricsReport full_report(const model::TransformerVAE<T>& model, const std::vector<data::Sequence>& split,
                          const EvalConfig& config) {
  const auto batches = eval_batches(split, config.batch_size, std::min(config.max_len, model.config().max_seq_len));
  Rng elbo_rng(config.seed), mi_rng(config.seed + 1), iw_rng(config.seed + 2);
  const ElboTotals totals = test_elbo(model, batches, elbo_rng);
  const Posteriors post = collect_posteriors(model, batches, config.mi_max_examples);
  MetricsReport r;
  r.ppl_mode = config.ppl_mode;
  r.example_count = totals.example_count;
  r.token_count = totals.token_count;
  const double n = static_cast<double>(totals.example_count);
  r.neg_elbo = totals.neg_elbo / n;
  r.recon_nll = totals.recon_nll / n;
  r.kl = totals.kl / n;
  r.ppl_elbo = perplexity(totals.neg_elbo, totals.token_count);
  if (config.ppl_mode == PplMode::iw) {
    r.iw_samples = config.iw_samples;
    r.ppl_iw = perplexity(iw_neg_log_likelihood(model, batches, config.iw_samples, iw_rng), totals.token_count);
  }
  r.ppl = config.ppl_mode == PplMode::iw ? r.ppl_iw : r.ppl_elbo;
  r.latent_dim = post.d;
  r.mi_examples = post.n;
  r.au_delta = config.au_delta;
  r.seed = config.seed;
  if (post.n >= 2) {
    r.mi = mutual_information(post, mi_rng);
    r.au = active_units(post, config.au_delta);
  }
  r.au_fraction = static_cast<double>(r.au) / static_cast<double>(post.d);
  return r;
}

std::vector<std::string> report_columns() {
  return {"run_id", "split",   "ppl",       "ppl_mode",     "ppl_elbo",      "ppl_iw",      "neg_elbo",
          "recon_nll", "kl",   "mi",        "au",           "au_fraction",   "latent_dim",  "token_count",
          "example_count", "mi_examples", "au_delta", "iw_samples", "seed"};
}

std::vector<std::string> report_values(const MetricsReport& r) {
  return {num(r.ppl),         to_string(r.ppl_mode),         num(r.ppl_elbo),  num(r.ppl_iw),
          num(r.neg_elbo),    num(r.recon_nll),              num(r.kl),        num(r.mi),
          std::to_string(r.au), num(r.au_fraction),          std::to_string(r.latent_dim),
          std::to_string(r.token_count), std::to_string(r.example_count), std::to_string(r.mi_examples),
          num(r.au_delta),    std::to_string(r.iw_samples),  std::to_string(r.seed)};
}

void append_report_csv(const std::filesystem::path& path, const std::string& run_id, const std::string& split,
                       const MetricsReport& r) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot write metrics file " + path.string());
  if (fresh) {
    out << "#metrics v1\n";
    const auto cols = report_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
  }
  out << run_id << ',' << split;
  for (const auto& v : report_values(r)) out << ',' << v;
  out << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::string format_report(const MetricsReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << "  PPL (" << to_string(r.ppl_mode) << ")  " << r.ppl << "\n"
     << "  -ELBO           " << r.neg_elbo << "\n"
     << "  recon NLL       " << r.recon_nll << "\n"
     << "  KL              " << r.kl << "\n"
     << "  MI              " << r.mi << "  (" << r.mi_examples << " examples)\n"
     << "  AU              " << r.au << " / " << r.latent_dim << "  (delta " << r.au_delta << ")\n"
     << "  examples        " << r.example_count << ", tokens " << r.token_count << "\n";
  return os.str();
}

#define TVAE_INSTANTIATE_EVAL(T)                                                                         \
  template Posteriors collect_posteriors(const model::TransformerVAE<T>&, const std::vector<data::Batch>&, \
                                         std::size_t);                                                   \
  template ElboTotals test_elbo(const model::TransformerVAE<T>&, const std::vector<data::Batch>&, Rng&);  \
  template double iw_neg_log_likelihood(const model::TransformerVAE<T>&, const std::vector<data::Batch>&, \
                                        std::size_t, Rng&);                                              \
  template MetricsReport full_report(const model::TransformerVAE<T>&, const std::vector<data::Sequence>&,  \
                                     const EvalConfig&);

TVAE_INSTANTIATE_EVAL(float)
TVAE_INSTANTIATE_EVAL(double)

#undef TVAE_INSTANTIATE_EVAL

}  // namespace tvae::eval
