#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tvae/data.hpp"
#include "tvae/eval.hpp"
#include "tvae/model.hpp"
#include "tvae/objective.hpp"
#include "tvae/rng.hpp"

namespace tvae::trainer {

using Model = model::TransformerVAE<float>;

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-3;
  double weight_decay = 0.01;

  void validate() const;
};

/// Decoupled weight decay Adam. Moments live in the parameter precision;
/// the update itself is computed in double.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) { config_.validate(); }

  /// Updates every parameter not named in `frozen`. Throws DivergenceError
  /// naming the first parameter with a non-finite gradient, before anything
  /// is modified. clip_norm > 0 rescales the trainable gradients to that
  /// global L2 norm when they exceed it.
  void step(model::ParameterMap<T>& params, const std::set<std::string>& frozen = {},
            double clip_norm = 0.0);
  void reset();

  const AdamWConfig& config() const { return config_; }
  std::size_t t() const { return t_; }
  const std::map<std::string, std::vector<T>>& first_moments() const { return m_; }
  const std::map<std::string, std::vector<T>>& second_moments() const { return v_; }
  void set_state(std::size_t t, std::map<std::string, std::vector<T>> m, std::map<std::string, std::vector<T>> v);

 private:
  AdamWConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<T>> m_;
  std::map<std::string, std::vector<T>> v_;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

/// Names matched by any of the glob patterns. A pattern that matches nothing
/// is a ConfigError.
template <typename T>
std::set<std::string> freeze(const model::ParameterMap<T>& params, const std::vector<std::string>& patterns);

struct PhaseConfig {
  int phase = 2;
  std::size_t epochs = 3;
  objective::LossConfig loss;
  double denoise = 0.0;
  std::vector<std::string> frozen;
  bool deterministic_latent = false;
  std::size_t batch_size = 32;
  std::size_t max_len = 32;
  AdamWConfig optimizer;
  double clip_norm = 0.0;
  std::uint64_t seed = 1;

  /// 5 epochs, beta = 0, decoder and w_proj frozen.
  static PhaseConfig phase1_defaults();
  /// 3 epochs, linear schedule over 50 epochs, everything trainable.
  static PhaseConfig phase2_defaults();
  void validate() const;
};

struct StepRecord {
  std::size_t step = 0;  // phase-local, before the update
  std::size_t epoch = 0;
  int phase = 0;
  double beta = 0.0;
  double recon_nll = 0.0;
  double kl_raw = 0.0;
  double kl_thresholded = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

struct EpochRecord {
  int phase = 0;
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // phase-local steps completed
  eval::MetricsReport valid;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;

  void append(const TrainLog& other);
};

std::vector<std::string> train_log_columns();
void write_train_log_csv(const std::filesystem::path& path, const std::vector<StepRecord>& steps);
std::vector<StepRecord> read_train_log_csv(const std::filesystem::path& path);
void write_epoch_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& epochs);

struct Checkpoint {
  model::ModelConfig model_config;
  int phase = 0;
  std::size_t epoch = 0;           // next epoch to run, 0-based
  std::size_t batch_in_epoch = 0;  // next batch within that epoch
  std::size_t step = 0;            // phase-local steps completed
  std::uint64_t seed = 0;
  Rng::State epoch_data_rng{};  // data rng at the start of `epoch`
  Rng::State sample_rng{};
  std::size_t optimizer_t = 0;
  std::optional<eval::MetricsReport> metrics;
  struct Blob {
    std::string name;
    diff::Shape shape;
    std::vector<float> data;
  };
  std::vector<Blob> blobs;  // param/*, adam_m/*, adam_v/*

  const Blob* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Throws CheckpointError on a bad magic, version, truncation or checksum.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Model rebuilt from the param/* blobs.
Model model_from_checkpoint(const Checkpoint& checkpoint);
/// Copies param/* blobs into an existing model; DimensionError on any
/// name or shape mismatch.
void load_parameters(const Checkpoint& checkpoint, Model& model);

struct RunOptions {
  std::filesystem::path out_dir;  // empty: nothing is written
  eval::EvalConfig eval;
  bool validate_each_epoch = true;
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// One training phase over a fixed corpus. Batches are reshuffled each
/// epoch from a data rng seeded by the phase seed; latent noise comes from a
/// separate stream so a resumed run replays exactly.
class PhaseTrainer {
 public:
  PhaseTrainer(Model& model, const std::vector<data::Sequence>& train, const std::vector<data::Sequence>& valid,
               PhaseConfig config, RunOptions options = {});

  /// Trains until the phase ends or `max_steps` further steps have run
  /// (0 = no limit). Returns true once the phase is complete.
  bool run(std::size_t max_steps = 0);
  bool finished() const { return epoch_ >= config_.epochs; }

  Checkpoint checkpoint() const;
  /// Restores parameters, optimizer and position from a checkpoint of the
  /// same phase.
  void restore(const Checkpoint& checkpoint);

  const TrainLog& log() const { return log_; }
  const std::set<std::string>& frozen() const { return frozen_; }
  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  std::size_t step() const { return step_; }

 private:
  void start_epoch();
  void train_step(const data::Batch& batch);
  void end_epoch();
  void prepare_logs();

  Model& model_;
  std::vector<data::Sequence> train_;
  std::vector<data::Sequence> valid_;
  PhaseConfig config_;
  RunOptions options_;
  AdamW<float> optimizer_;
  std::set<std::string> frozen_;
  std::size_t steps_per_epoch_ = 0;
  Rng data_rng_;
  Rng sample_rng_;
  Rng::State epoch_data_rng_{};
  std::vector<data::Batch> batches_;
  std::size_t epoch_ = 0;
  std::size_t batch_in_epoch_ = 0;
  std::size_t step_ = 0;
  std::optional<eval::MetricsReport> last_metrics_;
  TrainLog log_;
  std::size_t flushed_steps_ = 0;
  std::size_t flushed_epochs_ = 0;
  bool logs_prepared_ = false;
};

TrainLog run_phase(Model& model, const std::vector<data::Sequence>& train, const std::vector<data::Sequence>& valid,
                   const PhaseConfig& config, const RunOptions& options = {});

struct TwoPhaseConfig {
  PhaseConfig phase1 = PhaseConfig::phase1_defaults();
  PhaseConfig phase2 = PhaseConfig::phase2_defaults();
};

/// Phase 1 then phase 2; a phase with zero epochs is skipped. With
/// `resume`, training continues from that checkpoint's phase and position.
TrainLog train_two_phase(Model& model, const std::vector<data::Sequence>& train,
                         const std::vector<data::Sequence>& valid, const TwoPhaseConfig& config,
                         const RunOptions& options = {}, const Checkpoint* resume = nullptr);

}  // namespace tvae::trainer
