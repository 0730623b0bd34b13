// SPDX-License-Identifier: Apache-2.0
//
// Experiment protocols: layer-similarity profiles, encoder-noise robustness
// sweeps, hyper-parameter / ablation sweeps and sequence-level distillation.
// Every protocol reports rows of a SweepResult, written as CSV.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mvnmt/data.hpp"
#include "mvnmt/decode.hpp"
#include "mvnmt/training.hpp"

namespace mvnmt {

enum class Metric { token_accuracy, bleu };
Metric parse_metric(const std::string& s);
const char* to_string(Metric m);

/// Scores greedy/beam output of one view against the corpus targets.
/// Token accuracy is reported as a fraction, BLEU in percent.
double evaluate(const ModelF& model, View view, const ParallelCorpus& eval, const DecodeConfig& cfg, Metric metric,
                const NoiseSpec* noise = nullptr);

struct SimilarityOptions {
  /// Compare per-token vectors after the parameter-free layer normalisation.
  bool normalize = true;
  /// Average token vectors per sentence before comparing (instead of
  /// averaging per-token similarities).
  bool sentence_pool = false;
};

/// Cosine similarity between every encoder layer output H^(i), i = 0..M
/// (0 is the embedding layer), and the top layer H^(M), averaged over
/// non-pad tokens. Entry M is exactly 1.
std::vector<double> layer_similarity_profile(const ModelF& model, const std::vector<std::vector<int>>& sources,
                                             const SimilarityOptions& opts = {});

/// Cosine of two vectors; 0 when either is zero.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Spearman rank correlation (average ranks for ties).
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct SweepRow {
  std::string axis;
  std::string value;
  std::string model;  // label of the evaluated model
  std::string view;
  double metric = 0.0;
  std::uint64_t seed = 0;
  std::string config_digest;
};

struct SweepResult {
  static constexpr const char* kHeader = "axis,value,model,view,metric,seed,config_digest";
  std::string metric_name;
  std::vector<SweepRow> rows;
  /// Training statistics per trained model, in row-group order.
  std::vector<std::vector<StepStats>> histories;

  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

/// Everything needed to train and score one model.
struct ExperimentSetup {
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;
  DecodeConfig decode;
  Metric metric = Metric::token_accuracy;
  const ParallelCorpus* train_corpus = nullptr;
  const ParallelCorpus* eval_corpus = nullptr;
  std::string label = "model";

  /// FNV-1a digest of the canonical text of all configuration fields.
  std::string digest() const;
};

/// Trains a model from `setup.train.seed` (the initialisation seed too).
struct TrainedModel {
  ModelF model;
  std::vector<StepStats> history;
};
TrainedModel train_model(const ExperimentSetup& setup, const TrainerOutput& out = {},
                         const Trainer::Callback& on_step = {});

/// Rows for every view of `model` ("primary", and "auxiliary" when the model
/// is multi-view).
std::vector<SweepRow> evaluate_views(const ModelF& model, const ExperimentSetup& setup, const std::string& axis,
                                     const std::string& value);

enum class SweepAxis { alpha, aux_position, dark_mode, detach, share_can };
SweepAxis parse_sweep_axis(const std::string& s);
const char* to_string(SweepAxis a);

/// Applies one axis value to a copy of the setup (ConfigError when invalid).
ExperimentSetup apply_axis(const ExperimentSetup& base, SweepAxis axis, const std::string& value);

using SweepProgress = std::function<void(const std::string& value, const TrainedModel&)>;

/// Trains one model per value from the same seed and evaluates its views.
SweepResult run_sweep(SweepAxis axis, const std::vector<std::string>& values, const ExperimentSetup& base,
                      const SweepProgress& progress = {});

struct NoiseSweepModel {
  std::string label;
  const ModelF* model = nullptr;
};

/// For every model, ε and view: strips the model to the view and decodes
/// with N(0, ε) noise injected inside the last encoder normalisation.
SweepResult run_noise_sweep(const std::vector<NoiseSweepModel>& models, const std::vector<double>& eps_grid,
                            const ParallelCorpus& eval, const DecodeConfig& decode, Metric metric,
                            std::uint64_t noise_seed);

struct SeqKdResult {
  ParallelCorpus distilled;
  TrainedModel student;
  SweepRow row;
  std::size_t reference_fallbacks = 0;  // empty teacher outputs replaced by the reference
};

/// Decodes the training sources with the teacher (beam search per
/// `teacher_decode`), pairs the outputs with the sources and trains the
/// student configuration on them. Empty teacher outputs keep the original
/// reference.
SeqKdResult run_seq_kd(const ModelF& teacher, View teacher_view, const DecodeConfig& teacher_decode,
                       const ExperimentSetup& student);

/// Sources of a corpus, in order.
std::vector<std::vector<int>> sources_of(const ParallelCorpus& c);

}  // namespace mvnmt
