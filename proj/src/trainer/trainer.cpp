#include "tvae/trainer.hpp"

#include <fnmatch.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "tvae/error.hpp"

namespace tvae::trainer {

namespace {

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

void write_header(std::ostream& out, const char* tag, const std::vector<std::string>& cols) {
  out << tag << '\n';
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
}

std::vector<std::string> epoch_columns() {
  std::vector<std::string> cols{"phase", "epoch", "step"};
  const auto report = eval::report_columns();
  cols.insert(cols.end(), report.begin() + 2, report.end());
  return cols;
}

// Drops data rows of a CSV log for which keep() is false. Header lines stay.
void filter_csv(const std::filesystem::path& path, const std::function<bool(const std::vector<std::string>&)>& keep) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (n++ < 2 || keep(split_csv(line))) lines.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::size_t to_size(const std::string& s) { return static_cast<std::size_t>(std::stoull(s)); }

}  // namespace

// ---- AdamW ---------------------------------------------------------------------

void AdamWConfig::validate() const {
  std::vector<std::string> problems;
  if (!(lr > 0) || !std::isfinite(lr)) problems.push_back("lr must be positive");
  if (!(beta1 >= 0 && beta1 < 1)) problems.push_back("beta1 must be in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) problems.push_back("beta2 must be in [0, 1)");
  if (!(eps > 0)) problems.push_back("eps must be positive");
  if (!(weight_decay >= 0)) problems.push_back("weight_decay must be non-negative");
  if (problems.empty()) return;
  std::string msg = "invalid optimizer config:";
  for (const auto& p : problems) msg += "\n  " + p;
  throw ConfigError(msg);
}

template <typename T>
void AdamW<T>::step(model::ParameterMap<T>& params, const std::set<std::string>& frozen, double clip_norm) {
  double sq = 0.0;
  for (auto& [name, p] : params) {
    if (frozen.count(name) || !p.has_grad()) continue;
    for (T g : p.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw DivergenceError("non-finite gradient in parameter " + name);
      sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  double scale = 1.0;
  if (clip_norm > 0) {
    const double norm = std::sqrt(sq);
    if (norm > clip_norm) scale = clip_norm / norm;
  }

  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double decay = 1.0 - config_.lr * config_.weight_decay;
  for (auto& [name, p] : params) {
    if (frozen.count(name) || !p.has_grad()) continue;
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(p.numel(), T(0));
      v.assign(p.numel(), T(0));
    }
    auto w = p.mutable_data();
    const auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]) * scale;
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1, vhat = vi / c2;
      const double wi = static_cast<double>(w[i]) * decay;
      w[i] = static_cast<T>(wi - config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

template <typename T>
void AdamW<T>::reset() {
  t_ = 0;
  m_.clear();
  v_.clear();
}

template <typename T>
void AdamW<T>::set_state(std::size_t t, std::map<std::string, std::vector<T>> m,
                         std::map<std::string, std::vector<T>> v) {
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

template class AdamW<float>;
template class AdamW<double>;

template <typename T>
std::set<std::string> freeze(const model::ParameterMap<T>& params, const std::vector<std::string>& patterns) {
  std::set<std::string> out;
  for (const auto& pattern : patterns) {
    bool any = false;
    for (const auto& [name, p] : params) {
      if (fnmatch(pattern.c_str(), name.c_str(), 0) == 0) {
        out.insert(name);
        any = true;
      }
    }
    if (!any) throw ConfigError("freeze pattern '" + pattern + "' matches no parameter");
  }
  return out;
}

template std::set<std::string> freeze(const model::ParameterMap<float>&, const std::vector<std::string>&);
template std::set<std::string> freeze(const model::ParameterMap<double>&, const std::vector<std::string>&);

// ---- configs and logs ------------------------------------------------------------------

PhaseConfig PhaseConfig::phase1_defaults() {
  PhaseConfig c;
  c.phase = 1;
  c.epochs = 5;
  c.loss.schedule.kind = objective::ScheduleKind::zero;
  c.frozen = {"decoder.*", "w_proj"};
  return c;
}

PhaseConfig PhaseConfig::phase2_defaults() {
  PhaseConfig c;
  c.phase = 2;
  c.epochs = 3;
  c.loss.schedule.kind = objective::ScheduleKind::linear;
  c.loss.schedule.epochs = 50;
  return c;
}

void PhaseConfig::validate() const {
  std::vector<std::string> problems;
  auto collect = [&](auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      problems.push_back(e.what());
    }
  };
  if (phase != 1 && phase != 2) problems.push_back("phase must be 1 or 2");
  if (epochs < 1) problems.push_back("epochs must be at least 1");
  if (phase == 1 && loss.schedule.kind != objective::ScheduleKind::zero) {
    problems.push_back("phase 1 requires the zero KL schedule");
  }
  if (!(denoise >= 0 && denoise < 1)) problems.push_back("denoise must be in [0, 1)");
  if (batch_size < 1) problems.push_back("batch_size must be at least 1");
  if (max_len < 3) problems.push_back("max_len must be at least 3");
  if (!(clip_norm >= 0)) problems.push_back("clip_norm must be non-negative");
  collect([&] { loss.validate(); });
  collect([&] { optimizer.validate(); });
  if (problems.empty()) return;
  std::string msg = "invalid phase " + std::to_string(phase) + " config:";
  for (const auto& p : problems) msg += "\n  " + p;
  throw ConfigError(msg);
}

void TrainLog::append(const TrainLog& other) {
  steps.insert(steps.end(), other.steps.begin(), other.steps.end());
  epochs.insert(epochs.end(), other.epochs.begin(), other.epochs.end());
}

std::vector<std::string> train_log_columns() {
  return {"step", "epoch", "phase", "beta", "recon_nll", "kl_raw", "kl_thresholded", "total", "lr"};
}

namespace {

void append_steps(const std::filesystem::path& path, const std::vector<StepRecord>& steps) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot write " + path.string());
  if (fresh) write_header(out, "#trainlog v1", train_log_columns());
  for (const auto& s : steps) {
    out << s.step << ',' << s.epoch << ',' << s.phase << ',' << num(s.beta) << ',' << num(s.recon_nll) << ','
        << num(s.kl_raw) << ',' << num(s.kl_thresholded) << ',' << num(s.total) << ',' << num(s.lr) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void append_epochs(const std::filesystem::path& path, const std::vector<EpochRecord>& epochs) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot write " + path.string());
  if (fresh) write_header(out, "#epochs v1", epoch_columns());
  for (const auto& e : epochs) {
    out << e.phase << ',' << e.epoch << ',' << e.step;
    for (const auto& v : eval::report_values(e.valid)) out << ',' << v;
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

void write_train_log_csv(const std::filesystem::path& path, const std::vector<StepRecord>& steps) {
  std::filesystem::remove(path);
  append_steps(path, steps);
}

void write_epoch_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& epochs) {
  std::filesystem::remove(path);
  append_epochs(path, epochs);
}

std::vector<StepRecord> read_train_log_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read train log " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "#trainlog v1") throw IoError(path.string() + ": not a train log");
  std::getline(in, line);
  std::vector<StepRecord> out;
  while (std::getline(in, line)) {
    const auto c = split_csv(line);
    if (c.size() != train_log_columns().size()) throw IoError(path.string() + ": malformed row '" + line + "'");
    StepRecord s;
    s.step = to_size(c[0]);
    s.epoch = to_size(c[1]);
    s.phase = std::stoi(c[2]);
    s.beta = std::stod(c[3]);
    s.recon_nll = std::stod(c[4]);
    s.kl_raw = std::stod(c[5]);
    s.kl_thresholded = std::stod(c[6]);
    s.total = std::stod(c[7]);
    s.lr = std::stod(c[8]);
    out.push_back(s);
  }
  return out;
}

// ---- PhaseTrainer ------------------------------------------------------------------

PhaseTrainer::PhaseTrainer(Model& model, const std::vector<data::Sequence>& train,
                           const std::vector<data::Sequence>& valid, PhaseConfig config, RunOptions options)
    : model_(model),
      train_(train),
      valid_(valid),
      config_(std::move(config)),
      options_(std::move(options)),
      optimizer_((config_.validate(), config_.optimizer)),
      data_rng_(config_.seed),
      sample_rng_(config_.seed ^ 0x5851f42d4c957f2dULL) {
  if (train_.empty()) throw ValueError("training split is empty");
  frozen_ = freeze(model_.parameters(), config_.frozen);
  steps_per_epoch_ = data::batch_count(train_.size(), config_.batch_size);
}

void PhaseTrainer::start_epoch() {
  epoch_data_rng_ = data_rng_.state();
  data::BatchOptions opts;
  opts.batch_size = config_.batch_size;
  opts.max_len = std::min(config_.max_len, model_.config().max_seq_len);
  opts.noise = config_.denoise;
  opts.shuffle = true;
  batches_ = data::batchify(train_, opts, data_rng_);
}

void PhaseTrainer::train_step(const data::Batch& batch) {
  model::ForwardOptions<float> fo;
  fo.latent = config_.deterministic_latent ? model::LatentMode::mean : model::LatentMode::sampled;
  fo.rng = &sample_rng_;
  fo.train = true;
  const auto result = model_.forward(batch, fo);
  const auto loss = objective::elbo_loss(result.logits, batch.tgt_out, batch.tgt_mask, result.latent, config_.loss,
                                         step_, steps_per_epoch_);
  if (!std::isfinite(loss.total)) {
    throw DivergenceError("non-finite loss at phase " + std::to_string(config_.phase) + " step " +
                          std::to_string(step_));
  }
  model_.parameters().zero_grad();
  loss.total_tensor.backward();
  optimizer_.step(model_.parameters(), frozen_, config_.clip_norm);

  StepRecord r;
  r.step = step_;
  r.epoch = epoch_ + 1;
  r.phase = config_.phase;
  r.beta = loss.beta;
  r.recon_nll = loss.recon_nll;
  r.kl_raw = loss.kl_raw;
  r.kl_thresholded = loss.kl_thresholded;
  r.total = loss.total;
  r.lr = config_.optimizer.lr;
  log_.steps.push_back(r);
  if (options_.on_step) options_.on_step(r);
}

void PhaseTrainer::end_epoch() {
  ++epoch_;
  batch_in_epoch_ = 0;
  batches_.clear();
  if (options_.validate_each_epoch && !valid_.empty()) {
    EpochRecord e;
    e.phase = config_.phase;
    e.epoch = epoch_;
    e.step = step_;
    e.valid = eval::full_report(model_, valid_, options_.eval);
    last_metrics_ = e.valid;
    log_.epochs.push_back(e);
    if (options_.on_epoch) options_.on_epoch(e);
  }
  if (!options_.out_dir.empty()) {
    const auto& dir = options_.out_dir;
    append_steps(dir / "train_log.csv", {log_.steps.begin() + static_cast<std::ptrdiff_t>(flushed_steps_), log_.steps.end()});
    flushed_steps_ = log_.steps.size();
    append_epochs(dir / "epochs.csv", {log_.epochs.begin() + static_cast<std::ptrdiff_t>(flushed_epochs_), log_.epochs.end()});
    flushed_epochs_ = log_.epochs.size();
    save_checkpoint(dir / ("phase" + std::to_string(config_.phase) + ".ckpt"), checkpoint());
  }
}

void PhaseTrainer::prepare_logs() {
  if (logs_prepared_ || options_.out_dir.empty()) return;
  logs_prepared_ = true;
  std::filesystem::create_directories(options_.out_dir);
  const int phase = config_.phase;
  const std::size_t step = step_, epoch = epoch_;
  filter_csv(options_.out_dir / "train_log.csv", [&](const std::vector<std::string>& c) {
    const int p = std::stoi(c.at(2));
    return p < phase || (p == phase && to_size(c.at(0)) < step);
  });
  filter_csv(options_.out_dir / "epochs.csv", [&](const std::vector<std::string>& c) {
    const int p = std::stoi(c.at(0));
    return p < phase || (p == phase && to_size(c.at(1)) <= epoch);
  });
}

bool PhaseTrainer::run(std::size_t max_steps) {
  prepare_logs();
  std::size_t done = 0;
  while (!finished() && (max_steps == 0 || done < max_steps)) {
    if (batches_.empty()) start_epoch();
    train_step(batches_[batch_in_epoch_]);
    ++batch_in_epoch_;
    ++step_;
    ++done;
    if (batch_in_epoch_ == batches_.size()) end_epoch();
  }
  return finished();
}

Checkpoint PhaseTrainer::checkpoint() const {
  Checkpoint c;
  c.model_config = model_.config();
  c.phase = config_.phase;
  c.epoch = epoch_;
  c.batch_in_epoch = batch_in_epoch_;
  c.step = step_;
  c.seed = config_.seed;
  c.epoch_data_rng = batches_.empty() ? data_rng_.state() : epoch_data_rng_;
  c.sample_rng = sample_rng_.state();
  c.optimizer_t = optimizer_.t();
  c.metrics = last_metrics_;
  for (const auto& [name, p] : model_.parameters()) {
    c.blobs.push_back({"param/" + name, p.shape(), {p.data().begin(), p.data().end()}});
  }
  for (const auto& [name, m] : optimizer_.first_moments()) {
    c.blobs.push_back({"adam_m/" + name, model_.parameters().at(name).shape(), m});
  }
  for (const auto& [name, v] : optimizer_.second_moments()) {
    c.blobs.push_back({"adam_v/" + name, model_.parameters().at(name).shape(), v});
  }
  return c;
}

void PhaseTrainer::restore(const Checkpoint& c) {
  if (c.phase != config_.phase) {
    throw ConfigError("checkpoint is from phase " + std::to_string(c.phase) + ", trainer runs phase " +
                      std::to_string(config_.phase));
  }
  if (c.seed != config_.seed) {
    throw ConfigError("checkpoint seed " + std::to_string(c.seed) + " differs from configured seed " +
                      std::to_string(config_.seed));
  }
  if (c.epoch > config_.epochs || (c.epoch < config_.epochs && c.batch_in_epoch >= steps_per_epoch_) ||
      (c.epoch == config_.epochs && c.batch_in_epoch != 0)) {
    throw ConfigError("checkpoint position does not fit the configured phase length");
  }
  load_parameters(c, model_);
  std::map<std::string, std::vector<float>> m, v;
  for (const auto& b : c.blobs) {
    std::string name;
    auto* target = &m;
    if (b.name.rfind("adam_m/", 0) == 0) {
      name = b.name.substr(7);
    } else if (b.name.rfind("adam_v/", 0) == 0) {
      name = b.name.substr(7);
      target = &v;
    } else {
      continue;
    }
    if (!model_.parameters().contains(name) || model_.parameters().at(name).numel() != b.data.size()) {
      throw DimensionError("checkpoint optimizer state " + b.name + " does not match the model");
    }
    (*target)[name] = b.data;
  }
  optimizer_.set_state(c.optimizer_t, std::move(m), std::move(v));
  epoch_ = c.epoch;
  batch_in_epoch_ = c.batch_in_epoch;
  step_ = c.step;
  data_rng_.set_state(c.epoch_data_rng);
  sample_rng_.set_state(c.sample_rng);
  last_metrics_ = c.metrics;
  batches_.clear();
  if (batch_in_epoch_ > 0) start_epoch();
}

TrainLog run_phase(Model& model, const std::vector<data::Sequence>& train, const std::vector<data::Sequence>& valid,
                   const PhaseConfig& config, const RunOptions& options) {
  PhaseTrainer t(model, train, valid, config, options);
  t.run();
  return t.log();
}

TrainLog train_two_phase(Model& model, const std::vector<data::Sequence>& train,
                         const std::vector<data::Sequence>& valid, const TwoPhaseConfig& config,
                         const RunOptions& options, const Checkpoint* resume) {
  if (config.phase1.phase != 1 || config.phase2.phase != 2) {
    throw ConfigError("two-phase config needs phase numbers 1 and 2");
  }
  if (config.phase1.epochs > 0) config.phase1.validate();
  if (config.phase2.epochs > 0) config.phase2.validate();
  TrainLog log;
  const int first = resume ? resume->phase : 1;
  for (int phase = first; phase <= 2; ++phase) {
    const PhaseConfig& pc = phase == 1 ? config.phase1 : config.phase2;
    if (pc.epochs == 0) continue;
    PhaseTrainer t(model, train, valid, pc, options);
    if (resume && phase == resume->phase) t.restore(*resume);
    t.run();
    log.append(t.log());
  }
  return log;
}

}  // namespace tvae::trainer
