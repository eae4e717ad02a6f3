#include <charconv>
#include <cmath>
#include <functional>
#include <fstream>
#include <sstream>

#include "tvae/cli.hpp"
#include "tvae/error.hpp"

namespace tvae::cli {

namespace {

std::vector<KeySpec> build_keys() {
  std::vector<KeySpec> k = {
      {"run.id", "run", "run name; outputs go to <run.out_dir>/<run.id>"},
      {"run.out_dir", "runs", "parent directory of run directories"},
      {"run.seed", "1", "model init seed; phase n trains with seed + n"},
      {"data.train", "", "training corpus, one sentence per line"},
      {"data.valid", "", "validation corpus (per-epoch metrics)"},
      {"data.test", "", "optional test corpus, evaluated after training"},
      {"data.vocab", "", "vocab file; empty builds one from data.train"},
      {"data.vocab_max_size", "0", "vocab size cap including reserved ids (0 = unlimited)"},
      {"data.vocab_min_freq", "1", "minimum token count to enter the vocab"},
      {"data.tokenization", "word", "word | char"},
      {"model.hidden", "64", "model width, = heads * head_dim"},
      {"model.heads", "4", "attention heads"},
      {"model.head_dim", "16", "per-head width"},
      {"model.ff_dim", "128", "feed-forward inner width"},
      {"model.enc_layers", "2", "encoder layers"},
      {"model.dec_layers", "2", "decoder layers"},
      {"model.latent_dim", "32", "latent dimension"},
      {"model.max_seq_len", "32", "longest framed sequence, including start/end"},
      {"model.pooling", "max", "mean | max"},
      {"model.pooling_scope", "all_layers", "final_layer | all_layers"},
      {"model.dropout", "0", "dropout rate during training"},
  };
  for (int p = 1; p <= 2; ++p) {
    const std::string s = "phase" + std::to_string(p) + ".";
    const bool one = p == 1;
    k.push_back({s + "epochs", one ? "5" : "3", "epochs (0 skips the phase)"});
    k.push_back({s + "schedule", one ? "zero" : "linear", "zero | constant | linear | cyclical"});
    k.push_back({s + "beta", "1", "KL weight for the constant schedule"});
    k.push_back({s + "schedule_epochs", "50", "linear ramp length / cyclical horizon, in epochs"});
    k.push_back({s + "cycles", "4", "cyclical schedule cycle count"});
    k.push_back({s + "ramp_fraction", "0.5", "cyclical schedule ramp share of a cycle"});
    k.push_back({s + "kl_threshold", "0", "free-bits floor lambda per latent dimension (0 = off)"});
    k.push_back({s + "denoise", "0", "token deletion probability on the encoder input"});
    k.push_back({s + "frozen", one ? "decoder.*,w_proj" : "", "comma-separated parameter name globs"});
    k.push_back({s + "deterministic_latent", "false", "train with z = mu instead of a sample"});
    k.push_back({s + "batch_size", "32", "minibatch size"});
    k.push_back({s + "lr", "0.001", "AdamW learning rate"});
    k.push_back({s + "beta1", "0.9", "AdamW beta1"});
    k.push_back({s + "beta2", "0.999", "AdamW beta2"});
    k.push_back({s + "eps", "0.001", "AdamW epsilon"});
    k.push_back({s + "weight_decay", "0.01", "AdamW decoupled weight decay"});
    k.push_back({s + "clip_norm", "0", "global gradient norm clip (0 = off)"});
  }
  const std::vector<KeySpec> tail = {
      {"eval.batch_size", "64", "evaluation batch size"},
      {"eval.mi_max_examples", "2000", "examples used for MI and AU"},
      {"eval.au_delta", "0.01", "active-unit variance threshold"},
      {"eval.ppl_mode", "elbo_bound", "elbo_bound | iw"},
      {"eval.iw_samples", "50", "importance samples in iw mode"},
      {"eval.seed", "1234", "seed for evaluation sampling"},
  };
  k.insert(k.end(), tail.begin(), tail.end());
  return k;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Collects parse failures so that resolve() can report all of them.
class Parser {
 public:
  explicit Parser(const std::map<std::string, std::string>& v) : v_(v) {}

  const std::string& str(const std::string& key) { return v_.at(key); }

  std::size_t size(const std::string& key) {
    const auto& s = v_.at(key);
    std::size_t out = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || p != s.data() + s.size()) bad(key, "a non-negative integer");
    return out;
  }

  std::uint64_t u64(const std::string& key) {
    const auto& s = v_.at(key);
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || p != s.data() + s.size()) bad(key, "a non-negative integer");
    return out;
  }

  double real(const std::string& key) {
    const auto& s = v_.at(key);
    double out = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(out)) bad(key, "a finite number");
    return out;
  }

  bool flag(const std::string& key) {
    const auto& s = v_.at(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    bad(key, "true or false");
    return false;
  }

  std::vector<std::string> list(const std::string& key) {
    std::vector<std::string> out;
    std::stringstream ss(v_.at(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty() && item != "none") out.push_back(item);
    }
    return out;
  }

  template <typename F>
  auto parse(const std::string& key, F&& fn) -> decltype(fn(std::string())) {
    try {
      return fn(v_.at(key));
    } catch (const ConfigError& e) {
      problems.push_back(key + ": " + e.what());
      return {};
    }
  }

  void check(const std::function<void()>& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      problems.push_back(e.what());
    }
  }

  std::vector<std::string> problems;

 private:
  void bad(const std::string& key, const char* what) {
    problems.push_back(key + " must be " + what + ", got '" + v_.at(key) + "'");
  }
  const std::map<std::string, std::string>& v_;
};

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

const std::vector<KeySpec>& config_keys() {
  static const std::vector<KeySpec> keys = build_keys();
  return keys;
}

RunConfig::RunConfig() {
  for (const auto& k : config_keys()) values_[k.key] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

namespace {

void assign(std::map<std::string, std::string>& values, const std::vector<std::string>& assignments,
            std::vector<std::string>& problems) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) {
      problems.push_back("expected key=value, got '" + a + "'");
      continue;
    }
    const std::string key = trim(a.substr(0, eq));
    if (!values.count(key)) {
      problems.push_back("unknown config key '" + key + "'");
      continue;
    }
    values[key] = trim(a.substr(eq + 1));
  }
}

void raise(const std::string& title, const std::vector<std::string>& problems) {
  if (problems.empty()) return;
  std::string msg = title;
  for (const auto& p : problems) msg += "\n  " + p;
  throw ConfigError(msg);
}

}  // namespace

void RunConfig::apply(const std::vector<std::string>& assignments) {
  std::vector<std::string> problems;
  assign(values_, assignments, problems);
  raise("invalid config overrides:", problems);
}

void RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::vector<std::string> assignments;
  std::vector<std::string> problems;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.find('=') == std::string::npos) {
      problems.push_back(path.string() + ":" + std::to_string(n) + ": expected key = value");
      continue;
    }
    assignments.push_back(line);
  }
  assign(values_, assignments, problems);
  raise("invalid config file " + path.string() + ":", problems);
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "# resolved tvae run config\n";
  for (const auto& k : config_keys()) os << k.key << " = " << values_.at(k.key) << '\n';
  return os.str();
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write config file " + path.string());
  out << to_text();
  if (!out) throw IoError("failed writing " + path.string());
}

Resolved RunConfig::resolve(std::size_t vocab_size) const {
  Parser p(values_);
  Resolved r;
  r.run_id = p.str("run.id");
  if (r.run_id.empty() || r.run_id.find('/') != std::string::npos) {
    p.problems.push_back("run.id must be a non-empty name without '/'");
  }
  r.out_dir = p.str("run.out_dir");
  r.seed = p.u64("run.seed");
  r.train_path = p.str("data.train");
  r.valid_path = p.str("data.valid");
  r.test_path = p.str("data.test");
  r.vocab_path = p.str("data.vocab");
  r.vocab_max_size = p.size("data.vocab_max_size");
  r.vocab_min_freq = p.size("data.vocab_min_freq");
  r.tokenization = p.parse("data.tokenization", data::parse_tokenization);
  if (r.vocab_max_size != 0 && r.vocab_max_size <= data::kReservedIds) {
    p.problems.push_back("data.vocab_max_size must exceed the 4 reserved ids (0 means unlimited)");
  }

  auto& m = r.model;
  m.vocab_size = vocab_size ? vocab_size : data::kReservedIds + 1;
  m.hidden = p.size("model.hidden");
  m.heads = p.size("model.heads");
  m.head_dim = p.size("model.head_dim");
  m.ff_dim = p.size("model.ff_dim");
  m.enc_layers = p.size("model.enc_layers");
  m.dec_layers = p.size("model.dec_layers");
  m.latent_dim = p.size("model.latent_dim");
  m.max_seq_len = p.size("model.max_seq_len");
  m.pooling = p.parse("model.pooling", model::parse_pooling);
  m.pooling_scope = p.parse("model.pooling_scope", model::parse_pooling_scope);
  m.dropout = p.real("model.dropout");
  if (p.problems.empty()) p.check([&] { m.validate(); });

  for (int phase = 1; phase <= 2; ++phase) {
    const std::string s = "phase" + std::to_string(phase) + ".";
    trainer::PhaseConfig& c = phase == 1 ? r.phases.phase1 : r.phases.phase2;
    c.phase = phase;
    c.epochs = p.size(s + "epochs");
    c.loss.schedule.kind = p.parse(s + "schedule", objective::parse_schedule_kind);
    c.loss.schedule.beta = p.real(s + "beta");
    c.loss.schedule.epochs = p.real(s + "schedule_epochs");
    c.loss.schedule.cycles = p.size(s + "cycles");
    c.loss.schedule.ramp_fraction = p.real(s + "ramp_fraction");
    c.loss.kl_threshold = p.real(s + "kl_threshold");
    c.loss.free_bits_enabled = c.loss.kl_threshold > 0;
    c.denoise = p.real(s + "denoise");
    c.frozen = p.list(s + "frozen");
    c.deterministic_latent = p.flag(s + "deterministic_latent");
    c.batch_size = p.size(s + "batch_size");
    c.max_len = m.max_seq_len;
    c.optimizer.lr = p.real(s + "lr");
    c.optimizer.beta1 = p.real(s + "beta1");
    c.optimizer.beta2 = p.real(s + "beta2");
    c.optimizer.eps = p.real(s + "eps");
    c.optimizer.weight_decay = p.real(s + "weight_decay");
    c.clip_norm = p.real(s + "clip_norm");
    c.seed = r.seed + static_cast<std::uint64_t>(phase);
    if (c.epochs > 0) p.check([&] { c.validate(); });
  }
  if (r.phases.phase1.epochs == 0 && r.phases.phase2.epochs == 0) {
    p.problems.push_back("at least one phase needs epochs > 0");
  }

  auto& e = r.eval;
  e.batch_size = p.size("eval.batch_size");
  e.max_len = m.max_seq_len;
  e.mi_max_examples = p.size("eval.mi_max_examples");
  e.au_delta = p.real("eval.au_delta");
  e.ppl_mode = p.parse("eval.ppl_mode", eval::parse_ppl_mode);
  e.iw_samples = p.size("eval.iw_samples");
  e.seed = p.u64("eval.seed");
  if (e.batch_size == 0) p.problems.push_back("eval.batch_size must be at least 1");
  if (e.iw_samples == 0) p.problems.push_back("eval.iw_samples must be at least 1");
  if (!(e.au_delta >= 0)) p.problems.push_back("eval.au_delta must be non-negative");

  raise("invalid configuration:", p.problems);
  return r;
}

std::string run_label(const Resolved& c, int phase) {
  if (phase == 1) {
    return model::to_string(c.model.pooling) + "_" + num(c.phases.phase1.denoise) + "_" +
           (c.phases.phase1.frozen.empty() ? "unfrozen" : "frozen");
  }
  return num(c.phases.phase2.loss.kl_threshold) + "_" + num(c.phases.phase2.denoise);
}

}  // namespace tvae::cli
