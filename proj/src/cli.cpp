// SPDX-License-Identifier: Apache-2.0

#include "mvnmt/cli.hpp"

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mvnmt/fields.hpp"
#include "mvnmt/rng.hpp"

namespace mvnmt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error("usage", what) {}
};

class OutputExists : public Error {
 public:
  explicit OutputExists(const std::string& what) : Error("output-exists", what) {}
};

constexpr const char* kLogEnv = "MVNMT_LOG_LEVEL";

std::shared_ptr<spdlog::logger> logger() {
  auto log = spdlog::get("mvnmt");
  if (!log) log = spdlog::stderr_logger_mt("mvnmt");
  return log;
}

void configure_logging() {
  auto log = logger();
  const char* env = std::getenv(kLogEnv);
  const std::string level = env != nullptr ? env : "info";
  static const std::map<std::string, spdlog::level::level_enum> kLevels = {
      {"trace", spdlog::level::trace}, {"debug", spdlog::level::debug}, {"info", spdlog::level::info},
      {"warn", spdlog::level::warn},   {"error", spdlog::level::err},   {"off", spdlog::level::off}};
  auto it = kLevels.find(boost::algorithm::to_lower_copy(level));
  if (it == kLevels.end()) {
    throw UsageError(std::string(kLogEnv) + " must be one of trace|debug|info|warn|error|off, got '" + level + "'");
  }
  log->set_level(it->second);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> parts;
  boost::algorithm::split(parts, s, boost::algorithm::is_any_of(","));
  for (auto& p : parts) boost::algorithm::trim(p);
  std::erase_if(parts, [](const std::string& p) { return p.empty(); });
  return parts;
}

// --- output guards ----------------------------------------------------------

/// A file output: refuses to replace an existing file unless forced.
void claim_file(const fs::path& path, bool force) {
  if (fs::exists(path)) {
    if (!force) throw OutputExists("'" + path.string() + "' exists (use --force to overwrite)");
    if (fs::is_directory(path)) throw OutputExists("'" + path.string() + "' is a directory");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

/// An output directory: must be absent or empty unless forced. With force,
/// the run's own products from a previous run are removed first.
void claim_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw OutputExists("'" + dir.string() + "' exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) throw OutputExists("output directory '" + dir.string() + "' is not empty (use --force)");
      for (const auto& entry : fs::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        if (entry.is_regular_file() && (entry.path().extension() == ".ckpt" || name == "resolved.cfg" ||
                                        name == "loss.csv" || entry.path().extension() == ".csv")) {
          fs::remove(entry.path());
        }
      }
    }
  }
  fs::create_directories(dir);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

void write_loss_log(const fs::path& path, const std::vector<StepStats>& history, int log_every) {
  std::string text = std::string(kLossLogHeader) + "\n";
  for (const auto& s : history) {
    if (loss_log_due(s.step, log_every)) text += loss_log_row(s) + "\n";
  }
  write_text(path, text);
}

// --- configuration plumbing ---------------------------------------------------

struct ConfigFlags {
  std::string file;
  std::vector<std::string> sets;
};

void add_config_flags(CLI::App* app, ConfigFlags& flags) {
  app->add_option("--config", flags.file, "Configuration file ([section] key = value)");
  app->add_option("--set", flags.sets, "Override one field: section.key=value (repeatable)");
}

/// defaults < file < --set flags.
RunConfig resolve_config(const ConfigFlags& flags) {
  RunConfig cfg;
  try {
    if (!flags.file.empty()) cfg.merge_file(flags.file);
    for (const auto& s : flags.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
      cfg.set(boost::algorithm::trim_copy(s.substr(0, eq)), boost::algorithm::trim_copy(s.substr(eq + 1)));
    }
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

fs::path output_dir(RunConfig& cfg, const std::string& flag) {
  if (!flag.empty()) cfg.output.dir = flag;
  if (cfg.output.dir.empty()) throw UsageError("no output directory: pass --output-dir or set [output] dir");
  return cfg.output.dir;
}

/// Data section adopted into the model: vocabulary sizes follow the data.
void bind_vocab(RunConfig& cfg, const Vocabulary& vocab) {
  cfg.model.src_vocab = vocab.size();
  cfg.model.tgt_vocab = vocab.size();
}

Vocabulary checkpoint_vocab(const Checkpoint& c, const fs::path& path) {
  if (!c.vocab) throw DataError("checkpoint '" + path.string() + "' carries no vocabulary");
  return *c.vocab;
}

ExperimentSetup make_setup(const RunConfig& cfg, const ResolvedData& data) {
  ExperimentSetup s;
  s.model = cfg.model;
  s.train = cfg.train;
  s.loss = cfg.loss;
  s.decode = cfg.decode;
  s.metric = parse_metric(cfg.experiment.metric);
  s.train_corpus = &data.train;
  s.eval_corpus = &data.valid;
  return s;
}

/// Training-ready configuration: data bound, loss temperature mirrored into
/// the model, everything validated.
ResolvedData prepare_training(RunConfig& cfg) {
  cfg.data.validate();
  auto data = resolve_data(cfg.data);
  bind_vocab(cfg, data.vocab);
  cfg.model.tau = cfg.loss.tau;
  cfg.validate();
  return data;
}

json metrics_json(const std::vector<SweepRow>& rows) {
  json j = json::object();
  for (const auto& r : rows) j[r.view] = r.metric;
  return j;
}

// --- subcommands ----------------------------------------------------------------

struct CommonFlags {
  ConfigFlags config;
  std::string output_dir;
  bool force = false;
};

void add_common_flags(CLI::App* app, CommonFlags& flags) {
  add_config_flags(app, flags.config);
  app->add_option("--output-dir", flags.output_dir, "Directory for all outputs (overrides [output] dir)");
  app->add_flag("--force", flags.force, "Overwrite existing outputs");
}

int cmd_train(const CommonFlags& flags, std::ostream& out) {
  RunConfig cfg = resolve_config(flags.config);
  const fs::path dir = output_dir(cfg, flags.output_dir);
  auto data = prepare_training(cfg);
  claim_dir(dir, flags.force);
  write_text(dir / "resolved.cfg", cfg.to_ini());

  auto log = logger();
  log->info("training {} pairs, {} updates, output {}", data.train.size(), cfg.train.max_updates, dir.string());
  auto setup = make_setup(cfg, data);
  const std::uint64_t every = std::max<std::uint64_t>(1, cfg.train.max_updates / 20);
  auto trained = train_model(setup, TrainerOutput{dir, dir / "loss.csv", &data.vocab}, [&](const StepStats& s) {
    if (s.step % every == 0) log->info("step {} lr {:.3g} total {:.4f}", s.step, s.lr, s.loss.total);
    return true;
  });
  json report = {{"command", "train"},
                 {"output_dir", dir.string()},
                 {"steps", trained.history.size()},
                 {"final_total", trained.history.empty() ? 0.0 : trained.history.back().loss.total},
                 {"valid", metrics_json(evaluate_views(trained.model, setup, "none", "-"))},
                 {"metric", cfg.experiment.metric}};
  out << report.dump() << '\n';
  return 0;
}

struct DecodeFlags {
  ConfigFlags config;
  std::vector<std::string> ckpts;
  std::string view;
  std::string input;
  std::string output;
  int beam = 0;
  std::string space = "probability";
  bool force = false;
};

int cmd_decode(const DecodeFlags& flags, std::ostream& out) {
  RunConfig cfg = resolve_config(flags.config);
  if (!flags.view.empty()) {
    try {
      cfg.decode.view = parse_view(flags.view);
    } catch (const Error& e) {
      throw UsageError(std::string("--view: ") + e.what());
    }
  }
  if (flags.beam > 0) cfg.decode.beam_size = flags.beam;
  EnsembleSpace space = EnsembleSpace::probability;
  if (flags.space == "probability") {
  } else if (flags.space == "log") {
    space = EnsembleSpace::log;
  } else {
    throw UsageError("--ensemble-space must be probability|log");
  }

  std::vector<ModelF> models;
  std::optional<Vocabulary> vocab;
  for (const auto& path : flags.ckpts) {
    auto c = load_checkpoint(path);
    auto v = checkpoint_vocab(c, path);
    if (vocab && !(*vocab == v)) throw ConfigError("checkpoints '" + flags.ckpts.front() + "' and '" + path +
                                                   "' use different vocabularies");
    vocab = std::move(v);
    models.push_back(c.model());
  }
  cfg.model = models.front().config();
  cfg.decode.validate(cfg.model);

  const fs::path output = flags.output.empty() ? fs::path(flags.input + "." + to_string(cfg.decode.view) + ".hyp")
                                               : fs::path(flags.output);
  const fs::path cfg_path = output.string() + ".cfg";
  claim_file(output, flags.force);
  claim_file(cfg_path, flags.force);

  const auto lines = read_tokenized(flags.input);
  std::vector<std::vector<int>> sources;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    sources.push_back(vocab->encode(lines[i]));
    where.push_back(i);
  }
  std::vector<std::vector<int>> hyps;
  if (!sources.empty()) {
    if (models.size() == 1) {
      hyps = translate(models.front(), sources, cfg.decode);
    } else {
      std::vector<const ModelF*> ptrs;
      for (const auto& m : models) ptrs.push_back(&m);
      std::vector<View> views(models.size(), cfg.decode.view);
      hyps = translate_ensemble(ptrs, views, sources, cfg.decode, space);
    }
  }
  std::vector<std::string> text(lines.size());
  for (std::size_t k = 0; k < where.size(); ++k) text[where[k]] = vocab->decode(hyps[k]);
  std::string body;
  for (const auto& t : text) body += t + "\n";
  write_text(output, body);
  write_text(cfg_path, cfg.to_ini());
  out << json{{"command", "decode"}, {"output", output.string()}, {"lines", lines.size()}}.dump() << '\n';
  return 0;
}

int cmd_eval_bleu(const std::string& hyp_path, const std::string& ref_path, std::ostream& out) {
  const auto hyps = read_tokenized(hyp_path);
  const auto refs = read_tokenized(ref_path);
  if (hyps.size() != refs.size()) {
    throw DataError("hypothesis file has " + std::to_string(hyps.size()) + " lines, reference file " +
                    std::to_string(refs.size()));
  }
  const auto r = corpus_bleu(hyps, refs);
  out << json{{"bleu", r.bleu},
              {"precisions", r.precisions},
              {"brevity_penalty", r.brevity_penalty},
              {"hyp_length", r.hyp_length},
              {"ref_length", r.ref_length}}
             .dump()
      << '\n';
  return 0;
}

/// Resolved configuration of a command that produces one checkpoint.
void write_checkpoint_config(const fs::path& ckpt, const ModelConfig& model, bool force) {
  RunConfig cfg;
  cfg.model = model;
  const fs::path path = ckpt.string() + ".cfg";
  claim_file(path, force);
  write_text(path, cfg.to_ini());
}

int cmd_strip(const std::string& ckpt, const std::string& view, const std::string& output, bool force,
              std::ostream& out) {
  const View v = parse_view(view);
  claim_file(output, force);
  auto c = load_checkpoint(ckpt);
  const auto model = c.model();
  if (!model.config().multi_view) throw ConfigError("'" + ckpt + "' is already a single-view model");
  const auto stripped = model.strip_to_view(v);
  write_checkpoint_config(output, stripped.config(), force);
  save_checkpoint(output, stripped, nullptr, c.step, c.cursor, c.vocab ? &*c.vocab : nullptr);
  out << json{{"command", "strip"},
              {"output", output},
              {"view", to_string(v)},
              {"parameters", stripped.parameter_count()},
              {"parameters_before", model.parameter_count()}}
             .dump()
      << '\n';
  return 0;
}

int cmd_average(const std::vector<std::string>& inputs, const std::string& output, bool force, std::ostream& out) {
  claim_file(output, force);
  std::vector<fs::path> paths(inputs.begin(), inputs.end());
  auto avg = average_checkpoints(paths);
  const auto model = avg.model();
  write_checkpoint_config(output, model.config(), force);
  save_checkpoint(output, model, nullptr, avg.step, avg.cursor, avg.vocab ? &*avg.vocab : nullptr);
  out << json{{"command", "average-ckpt"}, {"output", output}, {"inputs", inputs.size()}}.dump() << '\n';
  return 0;
}

struct ExperimentFlags {
  CommonFlags common;
  std::vector<std::string> ckpts;
  std::string eps;
  std::string axis;
  std::string values;
  std::string teacher;
  std::string teacher_view = "primary";
  bool sentence_pool = false;
  bool raw = false;
};

struct LoadedModels {
  std::vector<ModelF> models;
  std::vector<std::string> labels;
  Vocabulary vocab;
};

LoadedModels load_models(const std::vector<std::string>& paths) {
  LoadedModels m;
  std::optional<Vocabulary> vocab;
  for (const auto& p : paths) {
    auto c = load_checkpoint(p);
    auto v = checkpoint_vocab(c, p);
    if (vocab && !(*vocab == v)) throw ConfigError("checkpoints use different vocabularies");
    vocab = std::move(v);
    m.models.push_back(c.model());
    std::string label = fs::path(p).stem().string();
    if (std::find(m.labels.begin(), m.labels.end(), label) != m.labels.end()) label = p;
    m.labels.push_back(label);
  }
  m.vocab = *vocab;
  return m;
}

int cmd_noise_sweep(const ExperimentFlags& flags, std::ostream& out) {
  RunConfig cfg = resolve_config(flags.common.config);
  const fs::path dir = output_dir(cfg, flags.common.output_dir);
  std::vector<double> eps;
  for (const auto& e : split_list(flags.eps)) {
    double x = 0.0;
    try {
      fields::from_text(e, x);
    } catch (const ConfigError&) {
      throw UsageError("--eps expects comma-separated numbers, got '" + e + "'");
    }
    eps.push_back(x);
  }
  if (eps.empty()) throw UsageError("--eps is empty");
  auto loaded = load_models(flags.ckpts);
  cfg.data.validate();
  auto data = resolve_data(cfg.data, loaded.vocab, false);
  cfg.model = loaded.models.front().config();
  cfg.decode.validate(cfg.model);
  const Metric metric = parse_metric(cfg.experiment.metric);
  claim_dir(dir, flags.common.force);
  write_text(dir / "resolved.cfg", cfg.to_ini());

  std::vector<NoiseSweepModel> entries;
  for (std::size_t i = 0; i < loaded.models.size(); ++i) entries.push_back({loaded.labels[i], &loaded.models[i]});
  auto result = run_noise_sweep(entries, eps, data.valid, cfg.decode, metric, cfg.experiment.noise_seed);
  result.write_csv(dir / "sweep.csv");
  out << json{{"command", "noise-sweep"}, {"csv", (dir / "sweep.csv").string()}, {"rows", result.rows.size()}}.dump()
      << '\n';
  return 0;
}

std::string file_safe(const std::string& s) {
  std::string r = s;
  for (char& c : r) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-' && c != '_') c = '_';
  }
  return r;
}

int cmd_sweep(const ExperimentFlags& flags, std::ostream& out) {
  RunConfig cfg = resolve_config(flags.common.config);
  const fs::path dir = output_dir(cfg, flags.common.output_dir);
  const SweepAxis axis = parse_sweep_axis(flags.axis);
  const auto values = split_list(flags.values);
  if (values.empty()) throw UsageError("--values is empty");
  auto data = prepare_training(cfg);
  const auto base = make_setup(cfg, data);
  std::vector<ExperimentSetup> setups;
  for (const auto& v : values) setups.push_back(apply_axis(base, axis, v));  // reject bad values up front
  claim_dir(dir, flags.common.force);
  write_text(dir / "resolved.cfg", cfg.to_ini());

  SweepResult result;
  result.metric_name = to_string(base.metric);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::string tag = std::to_string(i) + "_" + file_safe(values[i]);
    logger()->info("sweep {}={}", to_string(axis), values[i]);
    const fs::path run_dir = dir / ("run_" + tag);
    fs::create_directories(run_dir);
    auto trained = train_model(setups[i], TrainerOutput{run_dir, dir / ("loss_" + tag + ".csv"), &data.vocab});
    for (auto& row : evaluate_views(trained.model, setups[i], to_string(axis), values[i])) {
      result.rows.push_back(std::move(row));
    }
    result.histories.push_back(std::move(trained.history));
  }
  result.write_csv(dir / "sweep.csv");
  out << json{{"command", "sweep"}, {"csv", (dir / "sweep.csv").string()}, {"rows", result.rows.size()}}.dump()
      << '\n';
  return 0;
}

int cmd_layer_similarity(const ExperimentFlags& flags, std::ostream& out) {
  RunConfig cfg = resolve_config(flags.common.config);
  const fs::path dir = output_dir(cfg, flags.common.output_dir);
  if (flags.ckpts.size() != 1) throw UsageError("layer-similarity takes exactly one --ckpt");
  auto loaded = load_models(flags.ckpts);
  cfg.data.validate();
  auto data = resolve_data(cfg.data, loaded.vocab, false);
  cfg.model = loaded.models.front().config();
  claim_dir(dir, flags.common.force);
  write_text(dir / "resolved.cfg", cfg.to_ini());

  SimilarityOptions opts;
  opts.normalize = !flags.raw;
  opts.sentence_pool = flags.sentence_pool;
  const auto profile = layer_similarity_profile(loaded.models.front(), sources_of(data.valid), opts);
  std::vector<double> layers(profile.size());
  std::string csv = "layer,similarity\n";
  for (std::size_t i = 0; i < profile.size(); ++i) {
    layers[i] = static_cast<double>(i);
    csv += std::to_string(i) + "," + fields::to_text(profile[i]) + "\n";
  }
  write_text(dir / "similarity.csv", csv);
  out << json{{"command", "layer-similarity"},
              {"csv", (dir / "similarity.csv").string()},
              {"profile", profile},
              {"spearman", spearman(layers, profile)}}
             .dump()
      << '\n';
  return 0;
}

int cmd_seq_kd(const ExperimentFlags& flags, std::ostream& out) {
  RunConfig cfg = resolve_config(flags.common.config);
  const fs::path dir = output_dir(cfg, flags.common.output_dir);
  if (flags.teacher.empty()) throw UsageError("seq-kd needs --teacher");
  const View teacher_view = parse_view(flags.teacher_view);
  auto teacher_ckpt = load_checkpoint(flags.teacher);
  const auto vocab = checkpoint_vocab(teacher_ckpt, flags.teacher);
  const auto teacher = teacher_ckpt.model();
  cfg.data.validate();
  auto data = resolve_data(cfg.data, vocab);
  bind_vocab(cfg, vocab);
  cfg.model.tau = cfg.loss.tau;
  cfg.validate();
  cfg.decode.validate(teacher.config());
  claim_dir(dir, flags.common.force);
  write_text(dir / "resolved.cfg", cfg.to_ini());

  auto setup = make_setup(cfg, data);
  setup.label = "student";
  auto result = run_seq_kd(teacher, teacher_view, cfg.decode, setup);
  write_parallel_corpus(result.distilled, vocab, dir / "distilled.src", dir / "distilled.tgt");
  write_loss_log(dir / "loss.csv", result.student.history, cfg.train.log_every);
  save_checkpoint(dir / "student.ckpt", result.student.model, nullptr, result.student.history.size(), {}, &vocab);
  SweepResult table;
  table.metric_name = cfg.experiment.metric;
  table.rows.push_back(result.row);
  table.write_csv(dir / "sweep.csv");
  out << json{{"command", "seq-kd"},
              {"metric", result.row.metric},
              {"reference_fallbacks", result.reference_fallbacks},
              {"output_dir", dir.string()}}
             .dump()
      << '\n';
  return 0;
}

void error_line(std::ostream& err, const std::string& kind, const std::string& message) {
  err << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

// --- RunConfig ---------------------------------------------------------------

void DataConfig::validate() const {
  if (synthetic()) {
    parse_toy_task(task);
    if (vocab_size <= kNumReserved) throw ConfigError("data: vocab_size must exceed the reserved symbols");
    if (min_len < 1 || max_len < min_len) throw ConfigError("data: need 1 <= min_len <= max_len");
    if (train_size == 0 || valid_size == 0) throw ConfigError("data: train_size and valid_size must be > 0");
  } else if (valid_src.empty() != valid_tgt.empty() || train_src.empty() != train_tgt.empty()) {
    throw ConfigError("data: source and target files come in pairs");
  }
}

void RunConfig::set(const std::string& dotted_key, const std::string& value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos) throw ConfigError("expected section.key, got '" + dotted_key + "'");
  const std::string section = dotted_key.substr(0, dot);
  const std::string key = dotted_key.substr(dot + 1);
  bool section_found = false;
  bool key_found = false;
  visit_sections(*this, [&](const char* name, auto& sec) {
    if (section != name) return;
    section_found = true;
    try {
      key_found = fields::set_item(sec, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(section + "." + e.what());
    } catch (const Error& e) {
      throw ConfigError(dotted_key + ": " + e.what());
    }
  });
  if (!section_found) throw ConfigError("unknown configuration section '" + section + "'");
  if (!key_found) throw ConfigError("unknown configuration key '" + dotted_key + "'");
}

void RunConfig::merge_file(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("configuration file '" + path.string() + "' does not exist");
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(e.what());
  }
  for (const auto& [section, node] : tree) {
    if (node.empty() && !node.data().empty()) {
      throw ConfigError(path.string() + ": key '" + section + "' lies outside any section");
    }
    bool known = false;
    visit_sections(*this, [&](const char* name, auto&) { known = known || section == name; });
    if (!known) throw ConfigError(path.string() + ": unknown section [" + section + "]");
    for (const auto& [key, value] : node) {
      try {
        set(section + "." + key, value.data());
      } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
      }
    }
  }
}

std::string RunConfig::to_ini() const {
  RunConfig copy = *this;
  std::ostringstream os;
  bool first = true;
  visit_sections(copy, [&](const char* name, auto& sec) {
    if (!first) os << '\n';
    first = false;
    os << '[' << name << "]\n";
    for (const auto& [key, value] : fields::to_items(sec)) os << key << " = " << value << '\n';
  });
  return os.str();
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  loss.validate();
  decode.validate(model);
  data.validate();
  parse_metric(experiment.metric);
  if (data.synthetic() && data.max_len + 1 > model.max_len) {
    throw ConfigError("data.max_len " + std::to_string(data.max_len) + " does not fit model.max_len " +
                      std::to_string(model.max_len) + " (one position is taken by the sentence boundary)");
  }
}

ResolvedData resolve_data(const DataConfig& data, const std::optional<Vocabulary>& vocab, bool need_train) {
  if (data.synthetic()) {
    const ToyTask task = parse_toy_task(data.task);
    if (vocab && vocab->size() != data.vocab_size) {
      throw ConfigError("data.vocab_size " + std::to_string(data.vocab_size) + " differs from the model vocabulary (" +
                        std::to_string(vocab->size()) + ")");
    }
    ResolvedData r{Vocabulary::synthetic(data.vocab_size), {}, {}};
    if (need_train) {
      r.train = gen_toy_corpus(task, data.vocab_size, data.min_len, data.max_len, data.train_size, data.seed);
    }
    r.valid = gen_toy_corpus(task, data.vocab_size, data.min_len, data.max_len, data.valid_size,
                             derive_seed(data.seed, hash_str("valid")));
    return r;
  }
  if (data.valid_src.empty()) throw ConfigError("data: file corpora need valid_src and valid_tgt");
  ResolvedData r;
  if (need_train || !vocab) {
    if (data.train_src.empty()) throw ConfigError("data: file corpora need train_src and train_tgt");
    auto train = load_parallel_corpus(data.train_src, data.train_tgt, vocab);
    r.vocab = vocab ? *vocab : train.vocab;
    r.train = std::move(train.corpus);
  } else {
    r.vocab = *vocab;
  }
  r.valid = load_parallel_corpus(data.valid_src, data.valid_tgt, r.vocab).corpus;
  return r;
}

// --- dispatch -------------------------------------------------------------------

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Layer-wise multi-view sequence transduction", "mvnmt"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  CommonFlags train_flags;
  auto* train = app.add_subcommand("train", "Train a model; writes checkpoints, loss.csv and resolved.cfg");
  add_common_flags(train, train_flags);

  DecodeFlags dec;
  auto* decode = app.add_subcommand("decode", "Translate a tokenised text file with one view (or an ensemble)");
  add_config_flags(decode, dec.config);
  decode->add_option("--ckpt", dec.ckpts, "Checkpoint (repeat for an ensemble)")->required();
  decode->add_option("--view", dec.view, "primary|auxiliary (overrides [decode] view)");
  decode->add_option("--input", dec.input, "Source text, one sentence per line")->required();
  decode->add_option("--output", dec.output, "Output file (default: <input>.<view>.hyp)");
  decode->add_option("--beam", dec.beam, "Beam size (overrides [decode] beam_size)")->check(CLI::PositiveNumber);
  decode->add_option("--ensemble-space", dec.space, "probability|log averaging for ensembles");
  decode->add_flag("--force", dec.force, "Overwrite existing outputs");

  std::string hyp, ref;
  auto* bleu = app.add_subcommand("eval-bleu", "Corpus BLEU-4 of a hypothesis file against a reference file");
  bleu->add_option("--hyp", hyp, "Hypotheses, one per line")->required();
  bleu->add_option("--ref", ref, "References, one per line")->required();

  std::string strip_ckpt, strip_view, strip_out;
  bool strip_force = false;
  auto* strip = app.add_subcommand("strip", "Reduce a multi-view checkpoint to a single-view inference model");
  strip->add_option("--ckpt", strip_ckpt, "Multi-view checkpoint")->required();
  strip->add_option("--view", strip_view, "primary|auxiliary")->required();
  strip->add_option("--output", strip_out, "Output checkpoint")->required();
  strip->add_flag("--force", strip_force, "Overwrite existing outputs");

  std::vector<std::string> avg_inputs;
  std::string avg_out;
  bool avg_force = false;
  auto* average = app.add_subcommand("average-ckpt", "Element-wise mean of checkpoints");
  average->add_option("--inputs", avg_inputs, "Checkpoints to average")->required();
  average->add_option("--output", avg_out, "Output checkpoint")->required();
  average->add_flag("--force", avg_force, "Overwrite existing outputs");

  ExperimentFlags ex;
  auto* experiment = app.add_subcommand("experiment", "Experiment protocols; results are CSV");
  experiment->require_subcommand(1);
  auto* noise = experiment->add_subcommand("noise-sweep", "Metric of every view under encoder noise");
  add_common_flags(noise, ex.common);
  noise->add_option("--ckpt", ex.ckpts, "Checkpoint (repeatable)")->required();
  noise->add_option("--eps", ex.eps, "Comma-separated noise standard deviations")->required();
  auto* sweep = experiment->add_subcommand("sweep", "Train one model per value of an axis and score its views");
  add_common_flags(sweep, ex.common);
  sweep->add_option("--axis", ex.axis, "alpha|aux_position|dark_mode|detach|share_can")->required();
  sweep->add_option("--values", ex.values, "Comma-separated axis values")->required();
  auto* similarity = experiment->add_subcommand("layer-similarity", "Cosine similarity of each layer to the top");
  add_common_flags(similarity, ex.common);
  similarity->add_option("--ckpt", ex.ckpts, "Checkpoint")->required();
  similarity->add_flag("--sentence-pool", ex.sentence_pool, "Pool tokens per sentence before comparing");
  similarity->add_flag("--raw", ex.raw, "Compare raw layer outputs (no normalisation)");
  auto* seqkd = experiment->add_subcommand("seq-kd", "Distil a teacher's outputs into a student");
  add_common_flags(seqkd, ex.common);
  seqkd->add_option("--teacher", ex.teacher, "Teacher checkpoint")->required();
  seqkd->add_option("--teacher-view", ex.teacher_view, "primary|auxiliary");

  if (!args.empty() && !args.front().starts_with("-") && app.get_subcommand_no_throw(args.front()) == nullptr) {
    error_line(err, "usage", "unknown subcommand '" + args.front() + "'");
    return 2;
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    // Help for the deepest selected subcommand.
    const CLI::App* target = &app;
    while (!target->get_subcommands().empty()) target = target->get_subcommands().front();
    out << target->help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    error_line(err, "usage", e.what());
    return 2;
  }

  try {
    configure_logging();
    if (*train) return cmd_train(train_flags, out);
    if (*decode) return cmd_decode(dec, out);
    if (*bleu) return cmd_eval_bleu(hyp, ref, out);
    if (*strip) return cmd_strip(strip_ckpt, strip_view, strip_out, strip_force, out);
    if (*average) return cmd_average(avg_inputs, avg_out, avg_force, out);
    if (*noise) return cmd_noise_sweep(ex, out);
    if (*sweep) return cmd_sweep(ex, out);
    if (*similarity) return cmd_layer_similarity(ex, out);
    if (*seqkd) return cmd_seq_kd(ex, out);
    error_line(err, "usage", "no subcommand");
    return 2;
  } catch (const UsageError& e) {
    error_line(err, e.kind(), e.what());
    return 2;
  } catch (const Error& e) {
    error_line(err, e.kind(), e.what());
    return 1;
  } catch (const fs::filesystem_error& e) {
    error_line(err, "io", e.what());
    return 1;
  } catch (const std::exception& e) {
    error_line(err, "internal", e.what());
    return 1;
  }
}

}  // namespace mvnmt::cli
