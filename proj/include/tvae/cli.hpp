#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "tvae/data.hpp"
#include "tvae/eval.hpp"
#include "tvae/model.hpp"
#include "tvae/trainer.hpp"

namespace tvae::cli {

struct KeySpec {
  std::string key;
  std::string default_value;
  std::string help;
};

/// Every accepted config key with its default, in documentation order.
const std::vector<KeySpec>& config_keys();

/// Typed view of a RunConfig.
struct Resolved {
  model::ModelConfig model;
  trainer::TwoPhaseConfig phases;
  eval::EvalConfig eval;
  std::filesystem::path train_path, valid_path, test_path, vocab_path;
  std::size_t vocab_max_size = 0;
  std::size_t vocab_min_freq = 1;
  data::Tokenization tokenization = data::Tokenization::word;
  std::string run_id;
  std::filesystem::path out_dir;
  std::uint64_t seed = 1;

  std::filesystem::path run_dir() const { return out_dir / run_id; }
};

/// Flat key = value configuration. Later sources override earlier ones:
/// defaults, then files, then explicit overrides.
class RunConfig {
 public:
  RunConfig();

  /// Throws ConfigError for an unknown key.
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  /// "key=value" overrides; every malformed or unknown entry is reported
  /// in one ConfigError.
  void apply(const std::vector<std::string>& assignments);
  /// Reads "key = value" lines; '#' starts a comment.
  void load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::string to_text() const;

  /// Parses and validates every field, listing all problems in one
  /// ConfigError. vocab_size 0 checks everything except the vocabulary.
  Resolved resolve(std::size_t vocab_size = 0) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// "{pooling}_{denoise}_{frozen|unfrozen}" for phase 1, "{lambda}_{denoise}"
/// for phase 2.
std::string run_label(const Resolved& config, int phase);

/// Runs the command line and returns the process exit code: 0 success,
/// 2 configuration error, 3 divergence, 4 I/O error, 1 anything else.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tvae::cli
