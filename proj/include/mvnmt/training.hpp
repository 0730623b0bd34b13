// SPDX-License-Identifier: Apache-2.0
//
// Optimisation loop: inverse-sqrt warm-up schedule, Adam with global-norm
// clipping, seeded batching, checkpoint persistence and averaging.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvnmt/data.hpp"
#include "mvnmt/model.hpp"
#include "mvnmt/objectives.hpp"

namespace mvnmt {

struct TrainConfig {
  double base_lr = 1e-3;
  int warmup_steps = 200;
  int max_updates = 2000;
  std::size_t batch_tokens = 512;
  int update_freq = 1;  // batches accumulated per update
  std::uint64_t seed = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  double clip_norm = 5.0;  // 0 disables clipping
  int checkpoint_every = 0;  // 0: final checkpoint only
  int keep_last_k = 5;
  int log_every = 1;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

template <typename V>
void visit_fields(TrainConfig& c, V&& v) {
  v("base_lr", c.base_lr);
  v("warmup_steps", c.warmup_steps);
  v("max_updates", c.max_updates);
  v("batch_tokens", c.batch_tokens);
  v("update_freq", c.update_freq);
  v("seed", c.seed);
  v("adam_beta1", c.adam_beta1);
  v("adam_beta2", c.adam_beta2);
  v("adam_eps", c.adam_eps);
  v("clip_norm", c.clip_norm);
  v("checkpoint_every", c.checkpoint_every);
  v("keep_last_k", c.keep_last_k);
  v("log_every", c.log_every);
}

/// base_lr * min(step / warmup, sqrt(warmup / step)); step >= 1.
double lr_at(std::uint64_t step, double base_lr, int warmup);

/// Adam moments mirroring the parameter set, in parameter order.
template <typename Real>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::string> names;
  std::vector<std::vector<Real>> m, v;

  static AdamState init(const ParameterSet<Real>& params);
};

/// One Adam update of every parameter that holds a gradient. Parameters
/// without a gradient keep their value and moments.
template <typename Real>
void adam_update(ParameterSet<Real>& params, AdamState<Real>& state, double lr, const TrainConfig& cfg);

/// Global L2 norm of all parameter gradients.
template <typename Real>
double grad_norm(const ParameterSet<Real>& params);

struct StepStats {
  std::uint64_t step = 0;
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
  LossBreakdown loss;
};

/// Loss log CSV: header and one row per logged step.
inline constexpr const char* kLossLogHeader = "step,lr,nll_pri,nll_aux,cr,total";
std::string loss_log_row(const StepStats& s);
/// Whether step `step` is written to the loss log (the first step always is).
bool loss_log_due(std::uint64_t step, int log_every);

/// Forward both streams (or only the primary one), backward once and
/// apply one Adam update. Dropout masks are a function of (seed, step,
/// sub-batch, site). Throws TrainingDiverged on a non-finite loss or
/// gradient.
template <typename Real>
StepStats train_step(Model<Real>& model, std::span<const Batch> batches, const LossConfig& loss_cfg,
                     const TrainConfig& cfg, AdamState<Real>& state);

/// Logits of the streams a loss configuration trains.
template <typename Real>
TwoStreamLogits<Real> forward_streams(const Model<Real>& model, const Batch& batch, const LossConfig& loss_cfg,
                                      const ForwardOptions& opts);

/// Where an interrupted run would continue.
struct TrainCursor {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  std::uint64_t batch = 0;  // batches consumed within the epoch
};

struct Checkpoint {
  static constexpr int kFormatVersion = 1;
  int version = kFormatVersion;
  ModelConfig config;
  std::optional<Vocabulary> vocab;
  ParameterSet<float> params;
  std::optional<AdamState<float>> optimizer;
  std::uint64_t step = 0;
  TrainCursor cursor;

  ModelF model() const;
};

/// Self-describing container: magic line, metadata length line, UTF-8 JSON
/// metadata (version, config, vocabulary, array manifest with shapes and
/// byte offsets, payload checksum) and the little-endian float32 payload.
void save_checkpoint(const std::filesystem::path& path, const ModelF& model, const AdamState<float>* optimizer,
                     std::uint64_t step, const TrainCursor& cursor, const Vocabulary* vocab = nullptr);

/// Throws IntegrityError for damaged or foreign files and ConfigError when
/// `expected` is given and differs from the stored configuration.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

/// Element-wise mean of the parameters; optimizer state is dropped.
Checkpoint average_checkpoints(const std::vector<std::filesystem::path>& paths);

struct TrainerOutput {
  std::filesystem::path dir;          // checkpoints; empty disables
  std::filesystem::path loss_log;     // CSV; empty disables
  const Vocabulary* vocab = nullptr;  // stored in checkpoints
};

/// Runs the optimisation loop over a corpus.
class Trainer {
 public:
  using Output = TrainerOutput;
  /// Return false to stop after the current step.
  using Callback = std::function<bool(const StepStats&)>;

  Trainer(ModelF& model, const ParallelCorpus& corpus, TrainConfig cfg, LossConfig loss_cfg, Output out = {});

  /// Trains until max_updates (or the callback stops it); returns the
  /// statistics of every step.
  std::vector<StepStats> run(const Callback& on_step = {});

  const AdamState<float>& optimizer() const { return state_; }
  std::size_t skipped_pairs() const { return skipped_; }
  std::vector<std::filesystem::path> checkpoints() const { return kept_; }

 private:
  void write_checkpoint(std::uint64_t step, bool final);

  ModelF* model_;
  const ParallelCorpus* corpus_;
  TrainConfig cfg_;
  LossConfig loss_cfg_;
  Output out_;
  AdamState<float> state_;
  TrainCursor cursor_;
  std::size_t skipped_ = 0;
  std::vector<std::filesystem::path> kept_;
};

}  // namespace mvnmt
