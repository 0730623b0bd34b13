// SPDX-License-Identifier: Apache-2.0
//
// Decoding over one encoder view (greedy, beam, ensembles) and corpus BLEU.
// Decoders talk to a TokenScorer, which yields next-token log-probabilities
// for a batch of (source, prefix) queries; models, ensembles and hand-set
// tables all implement it.

#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mvnmt/model.hpp"

namespace mvnmt {

struct DecodeConfig {
  View view = View::primary;
  int beam_size = 4;
  /// Upper bound on generated tokens, the end-of-sentence token included.
  int max_out_len = 64;
  /// Hypothesis score = sum(log p) / length^length_penalty.
  double length_penalty = 1.0;

  void validate() const;
  /// Also checks max_out_len against the model's position table.
  void validate(const ModelConfig& model) const;
  bool operator==(const DecodeConfig&) const = default;
};

template <typename V>
void visit_fields(DecodeConfig& c, V&& v) {
  v("view", c.view);
  v("beam_size", c.beam_size);
  v("max_out_len", c.max_out_len);
  v("length_penalty", c.length_penalty);
}

class TokenScorer {
 public:
  virtual ~TokenScorer() = default;
  virtual int vocab_size() const = 0;
  virtual std::size_t source_count() const = 0;
  /// Next-token log-probabilities for each query. rows[i] indexes a source;
  /// prefixes[i] starts with <s>.
  virtual std::vector<std::vector<double>> next_log_probs(std::span<const std::size_t> rows,
                                                          std::span<const std::vector<int>> prefixes) const = 0;
};

/// Scores with one view of a model. The sources are encoded once; `noise`
/// perturbs the encoder output as in the robustness probe. A single-view
/// (for instance stripped) model always decodes its only view.
template <typename Real>
class ModelScorer final : public TokenScorer {
 public:
  ModelScorer(const Model<Real>& model, View view, const std::vector<std::vector<int>>& sources,
              const NoiseSpec* noise = nullptr);

  int vocab_size() const override { return model_->config().tgt_vocab; }
  std::size_t source_count() const override { return views_.batch; }
  std::vector<std::vector<double>> next_log_probs(std::span<const std::size_t> rows,
                                                  std::span<const std::vector<int>> prefixes) const override;

 private:
  const Model<Real>* model_;
  View view_;
  EncoderViews<Real> views_;
};

enum class EnsembleSpace { probability, log };

/// Per-step average of member distributions: arithmetic mean of
/// probabilities (default) or of log-probabilities followed by
/// renormalisation. A single member is passed through unchanged.
class EnsembleScorer final : public TokenScorer {
 public:
  EnsembleScorer(std::vector<const TokenScorer*> members, EnsembleSpace space = EnsembleSpace::probability);

  int vocab_size() const override { return members_.front()->vocab_size(); }
  std::size_t source_count() const override { return members_.front()->source_count(); }
  std::vector<std::vector<double>> next_log_probs(std::span<const std::size_t> rows,
                                                  std::span<const std::vector<int>> prefixes) const override;

 private:
  std::vector<const TokenScorer*> members_;
  EnsembleSpace space_;
};

struct Hypothesis {
  std::vector<int> tokens;  // generated tokens, without <s>; ends with </s> when finished
  double log_prob = 0.0;
  double score = 0.0;  // log_prob / length^penalty
  bool finished = false;

  /// Tokens before </s>.
  std::vector<int> output() const;
};

double length_normalised(double log_prob, std::size_t length, double penalty);

/// Argmax decoding of every source (ties go to the lowest token id).
std::vector<Hypothesis> greedy_decode(const TokenScorer& scorer, int max_out_len, double length_penalty = 1.0);

/// Beam search. Each step expands the open hypotheses and keeps the
/// beam_size best candidates by accumulated log-probability; candidates
/// ending in </s> leave the beam as finished hypotheses. The result is the
/// finished (or, at the length limit, open) hypothesis with the best
/// length-normalised score. beam_size = 1 is exactly greedy decoding.
std::vector<Hypothesis> beam_search(const TokenScorer& scorer, const DecodeConfig& cfg);

/// Greedy for beam_size == 1, beam search otherwise.
std::vector<Hypothesis> decode(const TokenScorer& scorer, const DecodeConfig& cfg);

/// Log-probability and normalised score of a fixed continuation.
Hypothesis score_sequence(const TokenScorer& scorer, std::size_t row, const std::vector<int>& tokens,
                          double length_penalty = 1.0);

/// Convenience: decodes `sources` with one view of `model`, in chunks.
std::vector<std::vector<int>> translate(const ModelF& model, const std::vector<std::vector<int>>& sources,
                                        const DecodeConfig& cfg, const NoiseSpec* noise = nullptr,
                                        std::size_t chunk = 64);

/// Ensemble counterpart of translate; models must share the target vocabulary.
std::vector<std::vector<int>> translate_ensemble(const std::vector<const ModelF*>& models,
                                                 const std::vector<View>& views,
                                                 const std::vector<std::vector<int>>& sources,
                                                 const DecodeConfig& cfg,
                                                 EnsembleSpace space = EnsembleSpace::probability,
                                                 std::size_t chunk = 64);

struct BleuReport {
  double bleu = 0.0;  // percent
  std::array<double, 4> precisions{};
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  double brevity_penalty = 0.0;
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

/// Corpus BLEU-4 with clipped n-gram counts, one reference per sentence and
/// no smoothing.
template <typename Token>
BleuReport corpus_bleu(const std::vector<std::vector<Token>>& hyps, const std::vector<std::vector<Token>>& refs);

/// Position-wise matches over sum(max(|hyp|, |ref|)).
double token_accuracy(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs);

/// Fraction of sentences reproduced exactly.
double sequence_accuracy(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs);

}  // namespace mvnmt
