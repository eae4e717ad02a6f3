#include <CLI11.hpp>

#include <charconv>
#include <fstream>
#include <iostream>
#include <sstream>

#include "tvae/cli.hpp"
#include "tvae/error.hpp"

namespace tvae::cli {

namespace fs = std::filesystem;

namespace {

using trainer::Model;

std::vector<data::Sequence> load_split(const fs::path& path, const data::Vocab& vocab) {
  if (path.empty()) return {};
  return data::encode_corpus(data::load_lines(path), vocab);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// Replaces any existing row for (run_id, split), so re-running a command
// leaves the file unchanged.
void upsert_report(const fs::path& path, const std::string& run_id, const std::string& split,
                   const eval::MetricsReport& r) {
  if (fs::exists(path)) {
    std::ifstream in(path);
    std::vector<std::string> keep;
    std::string line;
    const std::string prefix = run_id + "," + split + ",";
    while (std::getline(in, line)) {
      if (line.rfind(prefix, 0) != 0) keep.push_back(line);
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : keep) out << l << '\n';
    if (!out) throw IoError("failed writing " + path.string());
  }
  eval::append_report_csv(path, run_id, split, r);
}

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name, const fs::path& path) const {
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (columns[i] == name) return i;
    }
    throw ConfigError("no column '" + name + "' in " + path.string());
  }
};

CsvTable read_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line) || line.empty() || line[0] != '#') throw IoError(path.string() + ": missing header");
  if (!std::getline(in, line)) throw IoError(path.string() + ": missing column row");
  t.columns = split_csv(line);
  while (std::getline(in, line)) {
    if (!line.empty()) t.rows.push_back(split_csv(line));
  }
  return t;
}

data::Vocab vocab_for_checkpoint(const fs::path& checkpoint, const std::string& vocab_flag) {
  const fs::path path = vocab_flag.empty() ? checkpoint.parent_path() / "vocab.txt" : fs::path(vocab_flag);
  return data::Vocab::load(path);
}

Model load_model(const fs::path& checkpoint, const data::Vocab& vocab) {
  Model m = trainer::model_from_checkpoint(trainer::load_checkpoint(checkpoint));
  if (m.config().vocab_size != vocab.size()) {
    throw ConfigError("vocab has " + std::to_string(vocab.size()) + " tokens but the checkpoint expects " +
                      std::to_string(m.config().vocab_size));
  }
  return m;
}

// ---- train ---------------------------------------------------------------------

struct TrainFlags {
  std::string phase = "both";
  std::string resume;
  std::string init;
};

// Items of a multi-line ConfigError ("title:\n  a\n  b") or the one-line message.
void add_problems(const ConfigError& e, std::vector<std::string>& problems) {
  std::stringstream ss(e.what());
  std::string line;
  std::getline(ss, line);
  bool any = false;
  while (std::getline(ss, line)) {
    problems.push_back(line.substr(line.find_first_not_of(' ')));
    any = true;
  }
  if (!any) problems.push_back(e.what());
}

void train_run(const RunConfig& cfg, const TrainFlags& flags, std::ostream& out, std::ostream& err,
               std::vector<std::string> problems = {}) {
  if (cfg.get("data.train").empty()) problems.push_back("data.train is required");
  if (flags.phase != "1" && flags.phase != "2" && flags.phase != "both") {
    problems.push_back("--phase must be 1, 2 or both, got '" + flags.phase + "'");
  }
  try {
    cfg.resolve();
  } catch (const ConfigError& e) {
    add_problems(e, problems);
  }
  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }

  const Resolved pre = cfg.resolve();
  const fs::path run_dir = pre.run_dir();
  fs::create_directories(run_dir);
  const data::Vocab vocab =
      pre.vocab_path.empty()
          ? data::Vocab::build(data::load_lines(pre.train_path), pre.vocab_max_size, pre.vocab_min_freq,
                               pre.tokenization)
          : data::Vocab::load(pre.vocab_path);
  vocab.save(run_dir / "vocab.txt");
  const Resolved r = cfg.resolve(vocab.size());
  const auto train = load_split(r.train_path, vocab);
  const auto valid = load_split(r.valid_path, vocab);
  const auto test = load_split(r.test_path, vocab);
  cfg.save(run_dir / "config.txt");

  trainer::TwoPhaseConfig phases = r.phases;
  if (flags.phase == "1") phases.phase2.epochs = 0;
  if (flags.phase == "2") phases.phase1.epochs = 0;
  if (phases.phase1.epochs == 0 && phases.phase2.epochs == 0) throw ConfigError("nothing to train");

  auto from_checkpoint = [&](const fs::path& path) {
    trainer::Checkpoint c = trainer::load_checkpoint(path);
    if (!(c.model_config == r.model)) {
      throw ConfigError("checkpoint " + path.string() + " was trained with a different model config");
    }
    return c;
  };
  std::optional<trainer::Checkpoint> resume;
  std::optional<Model> model;
  if (!flags.resume.empty()) {
    resume = from_checkpoint(flags.resume);
    model.emplace(trainer::model_from_checkpoint(*resume));
  } else if (flags.phase == "2") {
    fs::path init = flags.init;
    if (init.empty() && fs::exists(run_dir / "phase1.ckpt")) init = run_dir / "phase1.ckpt";
    if (!init.empty()) {
      model.emplace(trainer::model_from_checkpoint(from_checkpoint(init)));
    } else {
      model.emplace(r.model, r.seed);
    }
  } else {
    model.emplace(r.model, r.seed);
  }

  trainer::RunOptions opts;
  opts.out_dir = run_dir;
  opts.eval = r.eval;
  opts.on_epoch = [&](const trainer::EpochRecord& e) {
    err << "phase " << e.phase << " epoch " << e.epoch << " step " << e.step << ": kl " << e.valid.kl << " mi "
        << e.valid.mi << " au " << e.valid.au << " ppl " << e.valid.ppl << '\n';
  };
  trainer::train_two_phase(*model, train, valid, phases, opts, resume ? &*resume : nullptr);

  for (const auto& [name, split] : {std::pair{"valid", &valid}, std::pair{"test", &test}}) {
    if (split->empty()) continue;
    const auto report = eval::full_report(*model, *split, r.eval);
    upsert_report(run_dir / "metrics.csv", r.run_id, name, report);
    out << r.run_id << " " << name << "\n" << eval::format_report(report);
  }
}

// ---- sweep ---------------------------------------------------------------------

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct SweepFlags {
  std::string out;
  std::string pooling = "mean,max";
  std::string denoise = "0,0.15,0.4";
  std::string lambda = "0,0.5,3";
  std::string schedule = "linear";
  bool plan_only = false;
};

void sweep(const RunConfig& base, const SweepFlags& f, std::ostream& out, std::ostream& err) {
  if (f.out.empty()) throw ConfigError("sweep needs --out");
  const auto pools = split_list(f.pooling), noises = split_list(f.denoise), lambdas = split_list(f.lambda),
             schedules = split_list(f.schedule);
  if (pools.empty() || noises.empty() || lambdas.empty() || schedules.empty()) {
    throw ConfigError("every sweep axis needs at least one value");
  }
  struct Cell {
    std::string id, pooling, denoise, lambda, schedule;
    RunConfig config;
  };
  std::vector<Cell> cells;
  std::vector<std::string> problems;
  for (const auto& pool : pools) {
    for (const auto& noise : noises) {
      for (const auto& lambda : lambdas) {
        for (const auto& sched : schedules) {
          Cell c{pool + "_" + noise + "_" + lambda + "_" + sched, pool, noise, lambda, sched, base};
          c.config.set("model.pooling", pool);
          c.config.set("phase1.denoise", noise);
          c.config.set("phase2.denoise", noise);
          c.config.set("phase2.kl_threshold", lambda);
          c.config.set("phase2.schedule", sched);
          c.config.set("run.id", c.id);
          c.config.set("run.out_dir", f.out);
          try {
            c.config.resolve();
          } catch (const ConfigError& e) {
            problems.push_back("cell " + c.id + ": " + e.what());
          }
          cells.push_back(std::move(c));
        }
      }
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid sweep:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }

  fs::create_directories(f.out);
  {
    std::ofstream m(fs::path(f.out) / "sweep.csv", std::ios::trunc);
    if (!m) throw IoError("cannot write sweep manifest in " + f.out);
    m << "#sweep v1\nrun_id,pooling,denoise,lambda,schedule,run_dir\n";
    for (const auto& c : cells) {
      m << c.id << ',' << c.pooling << ',' << c.denoise << ',' << c.lambda << ',' << c.schedule << ','
        << (fs::path(f.out) / c.id).string() << '\n';
    }
    if (!m) throw IoError("failed writing sweep manifest");
  }
  for (const auto& c : cells) {
    const fs::path dir = fs::path(f.out) / c.id;
    fs::create_directories(dir);
    c.config.save(dir / "config.txt");
    out << c.id << '\n';
  }
  if (f.plan_only) return;
  for (const auto& c : cells) {
    err << "== " << c.id << '\n';
    train_run(c.config, {}, out, err);
  }
}

// ---- plot ----------------------------------------------------------------------

void plot(const std::vector<std::string>& runs, const std::string& metric, int phase, std::ostream& out) {
  if (runs.empty()) throw ConfigError("plot needs at least one run directory");
  if (phase != 1 && phase != 2) throw ConfigError("--phase must be 1 or 2");
  const bool valid = metric.rfind("valid.", 0) == 0;
  out << "step,run_label,value\n";
  for (const auto& run : runs) {
    RunConfig cfg;
    cfg.load(fs::path(run) / "config.txt");
    const std::string label = run_label(cfg.resolve(), phase);
    const fs::path path = fs::path(run) / (valid ? "epochs.csv" : "train_log.csv");
    const CsvTable t = read_table(path);
    const std::size_t value_col = t.column(valid ? metric.substr(6) : metric, path);
    const std::size_t phase_col = t.column("phase", path), step_col = t.column("step", path);
    for (const auto& row : t.rows) {
      if (row.size() != t.columns.size()) throw IoError(path.string() + ": malformed row");
      if (std::stoi(row[phase_col]) != phase) continue;
      out << row[step_col] << ',' << label << ',' << row[value_col] << '\n';
    }
  }
}

// ---- sample --------------------------------------------------------------------

struct SampleFlags {
  std::string checkpoint, vocab, reconstruct;
  std::size_t from_prior = 0;
  std::vector<std::string> interpolate;
  std::size_t steps = 5;
  double temperature = 0.0;
  std::uint64_t seed = 1;
  std::size_t max_len = 0;
};

void sample(const SampleFlags& f, std::ostream& out) {
  const int modes = (f.from_prior > 0) + !f.reconstruct.empty() + !f.interpolate.empty();
  if (modes != 1) throw ConfigError("choose exactly one of --from-prior, --reconstruct, --interpolate");
  const data::Vocab vocab = vocab_for_checkpoint(f.checkpoint, f.vocab);
  const Model m = load_model(f.checkpoint, vocab);
  const std::size_t max_len = f.max_len ? f.max_len : m.config().max_seq_len;
  const std::size_t dz = m.config().latent_dim;
  Rng rng(f.seed);
  diff::NoGradGuard no_grad;

  auto posterior_means = [&](const std::vector<std::string>& lines) {
    std::vector<data::Sequence> seqs;
    for (const auto& l : lines) {
      auto s = vocab.encode(l);
      if (s.empty()) throw ValueError("cannot encode an empty sentence");
      seqs.push_back(std::move(s));
    }
    data::BatchOptions bo;
    bo.batch_size = seqs.size();
    bo.max_len = m.config().max_seq_len;
    bo.shuffle = false;
    Rng unused(0);
    const auto batches = data::batchify(seqs, bo, unused);
    return m.posterior(batches[0].src_ids, batches[0].src_mask).first;
  };

  std::vector<data::Sequence> outputs;
  if (f.from_prior > 0) {
    std::vector<float> z(f.from_prior * dz);
    for (auto& v : z) v = static_cast<float>(rng.normal());
    outputs = m.generate(diff::Tensor<float>({f.from_prior, dz}, std::move(z)), max_len, f.temperature, &rng);
  } else if (!f.reconstruct.empty()) {
    const auto lines = data::load_lines(f.reconstruct);
    if (lines.empty()) throw ValueError(f.reconstruct + " has no sentences");
    outputs = m.generate(posterior_means(lines), max_len, f.temperature, &rng);
  } else {
    if (f.interpolate.size() != 2) throw ConfigError("--interpolate takes two sentences");
    if (f.steps < 2) throw ConfigError("--steps must be at least 2");
    const auto mu = posterior_means(f.interpolate);
    const auto d = mu.data();
    diff::Tensor<float> z1({dz}, std::vector<float>(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(dz)));
    diff::Tensor<float> z2({dz}, std::vector<float>(d.begin() + static_cast<std::ptrdiff_t>(dz), d.end()));
    outputs = m.interpolate(z1, z2, f.steps, max_len);
  }
  for (const auto& s : outputs) out << vocab.decode(s) << '\n';
}

// ---- eval ----------------------------------------------------------------------

struct EvalFlags {
  std::string checkpoint, split, vocab, split_name, run_id, csv, config;
  std::vector<std::string> sets;
};

void evaluate(const EvalFlags& f, std::ostream& out) {
  RunConfig cfg;
  const fs::path dir = fs::path(f.checkpoint).parent_path();
  if (!f.config.empty()) {
    cfg.load(f.config);
  } else if (fs::exists(dir / "config.txt")) {
    cfg.load(dir / "config.txt");
  }
  cfg.apply(f.sets);
  const data::Vocab vocab = vocab_for_checkpoint(f.checkpoint, f.vocab);
  const Model m = load_model(f.checkpoint, vocab);
  const Resolved r = cfg.resolve(vocab.size());
  eval::EvalConfig ec = r.eval;
  ec.max_len = m.config().max_seq_len;
  const auto split = load_split(f.split, vocab);
  const auto report = eval::full_report(m, split, ec);
  const std::string name = f.split_name.empty() ? fs::path(f.split).stem().string() : f.split_name;
  std::string run_id = f.run_id;
  if (run_id.empty()) run_id = dir.empty() ? "run" : fs::absolute(dir).filename().string();
  const fs::path csv = f.csv.empty() ? dir / "metrics.csv" : fs::path(f.csv);
  upsert_report(csv, run_id, name, report);
  out << run_id << " " << name << "\n" << eval::format_report(report);
}

std::string keys_help() {
  std::ostringstream os;
  os << "Config keys (file lines or --set key=value):\n";
  for (const auto& k : config_keys()) {
    os << "  " << k.key << " = " << (k.default_value.empty() ? "\"\"" : k.default_value) << "\n      " << k.help
       << '\n';
  }
  return os.str();
}

RunConfig build_config(const std::string& file, const std::vector<std::string>& sets,
                       std::vector<std::string>& problems) {
  RunConfig cfg;
  try {
    if (!file.empty()) cfg.load(file);
  } catch (const ConfigError& e) {
    add_problems(e, problems);
  }
  try {
    cfg.apply(sets);
  } catch (const ConfigError& e) {
    add_problems(e, problems);
  }
  return cfg;
}

RunConfig build_config(const std::string& file, const std::vector<std::string>& sets) {
  std::vector<std::string> problems;
  RunConfig cfg = build_config(file, sets, problems);
  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  return cfg;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Transformer VAE lab: two-phase finetuning, evaluation and sampling", "tvae"};
  app.require_subcommand(1);

  // vocab
  auto* vocab_cmd = app.add_subcommand("vocab", "build a vocabulary file from a corpus");
  std::string v_corpus, v_out, v_tok = "word";
  std::size_t v_max = 0, v_min = 1;
  vocab_cmd->add_option("--corpus", v_corpus, "corpus, one sentence per line")->required();
  vocab_cmd->add_option("--out", v_out, "vocab file to write")->required();
  vocab_cmd->add_option("--max-size", v_max, "size cap including the 4 reserved ids (0 = unlimited)");
  vocab_cmd->add_option("--min-freq", v_min, "minimum token count");
  vocab_cmd->add_option("--tokenization", v_tok, "word | char");

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "write train/valid/test splits of the templated corpus");
  std::string s_out;
  std::size_t s_train = 5000, s_valid = 500, s_test = 500;
  std::uint64_t s_seed = 1;
  synth_cmd->add_option("--out-dir", s_out, "directory for train.txt, valid.txt, test.txt")->required();
  synth_cmd->add_option("--train", s_train, "training lines");
  synth_cmd->add_option("--valid", s_valid, "validation lines");
  synth_cmd->add_option("--test", s_test, "test lines");
  synth_cmd->add_option("--seed", s_seed, "corpus seed");

  // train
  auto* train_cmd = app.add_subcommand("train", "two-phase training");
  train_cmd->footer(keys_help());
  std::string t_config, t_run_id, t_out;
  std::vector<std::string> t_sets;
  std::optional<std::uint64_t> t_seed;
  TrainFlags t_flags;
  train_cmd->add_option("--config", t_config, "key = value config file");
  train_cmd->add_option("--set", t_sets, "key=value override, applied after --config (repeatable)")
      ->allow_extra_args(false);
  train_cmd->add_option("--phase", t_flags.phase, "1 | 2 | both");
  train_cmd->add_option("--resume", t_flags.resume, "continue from a checkpoint");
  train_cmd->add_option("--init", t_flags.init, "phase 2 start weights (default <run>/phase1.ckpt if present)");
  train_cmd->add_option("--seed", t_seed, "same as --set run.seed=N");
  train_cmd->add_option("--run-id", t_run_id, "same as --set run.id=NAME");
  train_cmd->add_option("--out", t_out, "same as --set run.out_dir=DIR");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "metrics for a checkpoint on a split");
  EvalFlags e_flags;
  eval_cmd->add_option("--checkpoint", e_flags.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--split", e_flags.split, "sentences to evaluate")->required();
  eval_cmd->add_option("--vocab", e_flags.vocab, "vocab file (default: next to the checkpoint)");
  eval_cmd->add_option("--split-name", e_flags.split_name, "split column value (default: file stem)");
  eval_cmd->add_option("--run-id", e_flags.run_id, "run_id column value (default: checkpoint directory)");
  eval_cmd->add_option("--csv", e_flags.csv, "metrics CSV (default: metrics.csv next to the checkpoint)");
  eval_cmd->add_option("--config", e_flags.config, "config file (default: config.txt next to the checkpoint)");
  eval_cmd->add_option("--set", e_flags.sets, "key=value override, e.g. eval.ppl_mode=iw")->allow_extra_args(false);

  // sample
  auto* sample_cmd = app.add_subcommand("sample", "decode from the prior, reconstruct, or interpolate");
  SampleFlags sm;
  sample_cmd->add_option("--checkpoint", sm.checkpoint, "checkpoint file")->required();
  sample_cmd->add_option("--vocab", sm.vocab, "vocab file (default: next to the checkpoint)");
  sample_cmd->add_option("--from-prior", sm.from_prior, "decode N draws of z ~ N(0, I)");
  sample_cmd->add_option("--reconstruct", sm.reconstruct, "greedy reconstruction of each line of a file");
  sample_cmd->add_option("--interpolate", sm.interpolate, "two sentences to interpolate between")->expected(2);
  sample_cmd->add_option("--steps", sm.steps, "interpolation points including both ends");
  sample_cmd->add_option("--temperature", sm.temperature, "0 = greedy");
  sample_cmd->add_option("--seed", sm.seed, "sampling seed");
  sample_cmd->add_option("--max-len", sm.max_len, "longest output (default: model max_seq_len)");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "cartesian sweep, one run directory per cell");
  SweepFlags sw;
  std::string sw_config;
  std::vector<std::string> sw_sets;
  sweep_cmd->add_option("--out", sw.out, "sweep directory")->required();
  sweep_cmd->add_option("--config", sw_config, "base config file");
  sweep_cmd->add_option("--set", sw_sets, "key=value override of the base config")->allow_extra_args(false);
  sweep_cmd->add_option("--pooling", sw.pooling, "comma list of pooling strategies");
  sweep_cmd->add_option("--denoise", sw.denoise, "comma list of deletion probabilities (both phases)");
  sweep_cmd->add_option("--lambda", sw.lambda, "comma list of phase-2 KL thresholds");
  sweep_cmd->add_option("--schedule", sw.schedule, "comma list of phase-2 schedules");
  sweep_cmd->add_flag("--plan-only", sw.plan_only, "write run directories and manifest without training");

  // plot
  auto* plot_cmd = app.add_subcommand("plot", "tidy CSV (step, run_label, value) of a logged metric");
  std::vector<std::string> p_runs;
  std::string p_metric = "kl_raw", p_out;
  int p_phase = 2;
  plot_cmd->add_option("--runs", p_runs, "run directories");
  plot_cmd->add_option("--metric", p_metric, "train log column, or valid.<column> for per-epoch metrics");
  plot_cmd->add_option("--phase", p_phase, "1 | 2");
  plot_cmd->add_option("--out", p_out, "output file (default: stdout)");

  std::vector<std::string> argv_store(args.begin(), args.end());
  argv_store.insert(argv_store.begin(), "tvae");
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*vocab_cmd) {
      const auto vocab = data::Vocab::build(data::load_lines(v_corpus), v_max, v_min, data::parse_tokenization(v_tok));
      vocab.save(v_out);
      out << "wrote " << vocab.size() << " tokens to " << v_out << '\n';
    } else if (*synth_cmd) {
      fs::create_directories(s_out);
      data::save_lines(fs::path(s_out) / "train.txt", data::synthetic_corpus(s_train, s_seed));
      data::save_lines(fs::path(s_out) / "valid.txt", data::synthetic_corpus(s_valid, s_seed + 1));
      data::save_lines(fs::path(s_out) / "test.txt", data::synthetic_corpus(s_test, s_seed + 2));
      out << "wrote " << s_train << "/" << s_valid << "/" << s_test << " lines to " << s_out << '\n';
    } else if (*train_cmd) {
      std::vector<std::string> problems;
      RunConfig cfg = build_config(t_config, t_sets, problems);
      if (t_seed) cfg.set("run.seed", std::to_string(*t_seed));
      if (!t_run_id.empty()) cfg.set("run.id", t_run_id);
      if (!t_out.empty()) cfg.set("run.out_dir", t_out);
      train_run(cfg, t_flags, out, err, std::move(problems));
    } else if (*eval_cmd) {
      evaluate(e_flags, out);
    } else if (*sample_cmd) {
      sample(sm, out);
    } else if (*sweep_cmd) {
      sweep(build_config(sw_config, sw_sets), sw, out, err);
    } else if (*plot_cmd) {
      if (p_out.empty()) {
        plot(p_runs, p_metric, p_phase, out);
      } else {
        std::ostringstream buf;
        plot(p_runs, p_metric, p_phase, buf);
        std::ofstream f(p_out, std::ios::trunc);
        if (!f) throw IoError("cannot write " + p_out);
        f << buf.str();
      }
    }
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return 4;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace tvae::cli
