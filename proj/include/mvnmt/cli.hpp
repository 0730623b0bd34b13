// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. A RunConfig gathers every configuration section;
// it is read from an INI-style file, overridden by `--set section.key=value`
// flags, and written back out fully resolved next to each run's outputs.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mvnmt/analysis.hpp"
#include "mvnmt/data.hpp"
#include "mvnmt/decode.hpp"
#include "mvnmt/model.hpp"
#include "mvnmt/objectives.hpp"
#include "mvnmt/training.hpp"

namespace mvnmt::cli {

/// Where training and evaluation pairs come from: a synthetic task (when
/// `task` is set) or aligned text files.
struct DataConfig {
  std::string task = "copy";  // copy|reverse|sort, or empty for files
  int vocab_size = 20;        // synthetic tasks, reserved symbols included
  int min_len = 3;
  int max_len = 10;
  std::size_t train_size = 2000;
  std::size_t valid_size = 200;
  std::uint64_t seed = 1;
  std::string train_src;
  std::string train_tgt;
  std::string valid_src;
  std::string valid_tgt;

  bool synthetic() const { return !task.empty(); }
  void validate() const;
  bool operator==(const DataConfig&) const = default;
};

template <typename V>
void visit_fields(DataConfig& c, V&& v) {
  v("task", c.task);
  v("vocab_size", c.vocab_size);
  v("min_len", c.min_len);
  v("max_len", c.max_len);
  v("train_size", c.train_size);
  v("valid_size", c.valid_size);
  v("seed", c.seed);
  v("train_src", c.train_src);
  v("train_tgt", c.train_tgt);
  v("valid_src", c.valid_src);
  v("valid_tgt", c.valid_tgt);
}

struct ExperimentConfig {
  std::string metric = "token_accuracy";  // token_accuracy|bleu
  std::uint64_t noise_seed = 1;
  bool operator==(const ExperimentConfig&) const = default;
};

template <typename V>
void visit_fields(ExperimentConfig& c, V&& v) {
  v("metric", c.metric);
  v("noise_seed", c.noise_seed);
}

struct OutputConfig {
  std::string dir;
  bool operator==(const OutputConfig&) const = default;
};

template <typename V>
void visit_fields(OutputConfig& c, V&& v) {
  v("dir", c.dir);
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;
  DecodeConfig decode;
  DataConfig data;
  ExperimentConfig experiment;
  OutputConfig output;

  /// Applies `section.key=value`; ConfigError for unknown keys or values.
  void set(const std::string& dotted_key, const std::string& value);
  /// Overlays a configuration file; unknown sections or keys are rejected.
  void merge_file(const std::filesystem::path& path);
  /// Every field of every section, in a fixed order.
  std::string to_ini() const;
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

/// Calls v(section_name, section) for every section.
template <typename V>
void visit_sections(RunConfig& c, V&& v) {
  v("model", c.model);
  v("train", c.train);
  v("loss", c.loss);
  v("decode", c.decode);
  v("data", c.data);
  v("experiment", c.experiment);
  v("output", c.output);
}

/// Corpora and vocabulary implied by a data section.
struct ResolvedData {
  Vocabulary vocab;
  ParallelCorpus train;
  ParallelCorpus valid;
};

/// Builds the data of a run. With `vocab` (e.g. from a checkpoint), files
/// are read with that vocabulary; synthetic tasks check it for size.
ResolvedData resolve_data(const DataConfig& data, const std::optional<Vocabulary>& vocab = std::nullopt,
                          bool need_train = true);

/// Runs one command line (argv[0] excluded). Returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on runtime failures; errors are
/// reported as one JSON line on `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mvnmt::cli
