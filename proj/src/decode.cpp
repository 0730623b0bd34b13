// SPDX-License-Identifier: Apache-2.0
#include "mvnmt/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>

#include "mvnmt/error.hpp"
#include "mvnmt/ops.hpp"
#include "mvnmt/rng.hpp"

namespace mvnmt {

void DecodeConfig::validate() const {
  if (beam_size < 1) throw ConfigError("decode config: beam_size must be >= 1");
  if (max_out_len < 1) throw ConfigError("decode config: max_out_len must be >= 1");
  if (!std::isfinite(length_penalty)) throw ConfigError("decode config: length_penalty must be finite");
}

void DecodeConfig::validate(const ModelConfig& model) const {
  validate();
  if (max_out_len > model.max_len) {
    throw ConfigError("decode config: max_out_len " + std::to_string(max_out_len) + " exceeds the model max_len " +
                      std::to_string(model.max_len));
  }
}

// ---------------------------------------------------------------------------
// Scorers

template <typename Real>
ModelScorer<Real>::ModelScorer(const Model<Real>& model, View view, const std::vector<std::vector<int>>& sources,
                               const NoiseSpec* noise)
    : model_(&model), view_(model.config().multi_view ? view : View::primary) {
  if (sources.empty()) throw InvalidArgument("no sources to decode");
  NoGradGuard guard;
  ForwardOptions opts;
  opts.noise = noise;
  views_ = model.encode_views(TokenGrid::from_rows(sources), opts);
}

template <typename Real>
std::vector<std::vector<double>> ModelScorer<Real>::next_log_probs(std::span<const std::size_t> rows,
                                                                   std::span<const std::vector<int>> prefixes) const {
  if (rows.size() != prefixes.size()) throw ShapeError("one prefix per query row expected");
  if (rows.empty()) return {};
  NoGradGuard guard;
  const std::size_t s = views_.src_len;
  std::vector<std::uint8_t> pad;
  pad.reserve(rows.size() * s);
  for (std::size_t r : rows) {
    if (r >= views_.batch) throw IndexError("source row out of range");
    pad.insert(pad.end(), views_.src_pad.begin() + static_cast<std::ptrdiff_t>(r * s),
               views_.src_pad.begin() + static_cast<std::ptrdiff_t>((r + 1) * s));
  }
  const auto memory = gather_rows(views_.view(view_), rows);
  const auto tgt = TokenGrid::from_rows({prefixes.begin(), prefixes.end()});
  const auto lp = log_softmax(model_->decode_single(view_, memory, pad, tgt));
  const std::size_t t = tgt.cols, v = lp.dim(2);
  const auto data = lp.data();
  std::vector<std::vector<double>> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (prefixes[i].empty()) throw InvalidArgument("prefix must start with <s>");
    const auto* row = data.data() + (i * t + prefixes[i].size() - 1) * v;
    out[i].assign(row, row + v);
  }
  return out;
}

EnsembleScorer::EnsembleScorer(std::vector<const TokenScorer*> members, EnsembleSpace space)
    : members_(std::move(members)), space_(space) {
  if (members_.empty()) throw InvalidArgument("ensemble without members");
  for (const auto* m : members_) {
    if (m->vocab_size() != members_.front()->vocab_size()) throw InvalidArgument("ensemble vocabularies differ");
    if (m->source_count() != members_.front()->source_count()) throw InvalidArgument("ensemble sources differ");
  }
}

std::vector<std::vector<double>> EnsembleScorer::next_log_probs(std::span<const std::size_t> rows,
                                                                std::span<const std::vector<int>> prefixes) const {
  if (members_.size() == 1) return members_.front()->next_log_probs(rows, prefixes);
  const double k = static_cast<double>(members_.size());
  std::vector<std::vector<double>> acc;
  for (const auto* m : members_) {
    auto lp = m->next_log_probs(rows, prefixes);
    if (acc.empty()) acc.assign(lp.size(), std::vector<double>(lp.empty() ? 0 : lp.front().size(), 0.0));
    for (std::size_t i = 0; i < lp.size(); ++i)
      for (std::size_t j = 0; j < lp[i].size(); ++j)
        acc[i][j] += space_ == EnsembleSpace::probability ? std::exp(lp[i][j]) : lp[i][j];
  }
  for (auto& row : acc) {
    if (space_ == EnsembleSpace::probability) {
      for (auto& x : row) x = std::log(x / k);
    } else {
      double hi = -std::numeric_limits<double>::infinity();
      for (auto& x : row) hi = std::max(hi, x /= k);
      double z = 0.0;
      for (double x : row) z += std::exp(x - hi);
      const double lz = hi + std::log(z);
      for (auto& x : row) x -= lz;
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Search

std::vector<int> Hypothesis::output() const {
  std::vector<int> out = tokens;
  if (finished && !out.empty() && out.back() == kEosId) out.pop_back();
  return out;
}

double length_normalised(double log_prob, std::size_t length, double penalty) {
  if (length == 0) return log_prob;
  return penalty == 0.0 ? log_prob : log_prob / std::pow(static_cast<double>(length), penalty);
}

namespace {

std::vector<int> with_bos(const std::vector<int>& tokens) {
  std::vector<int> p{kBosId};
  p.insert(p.end(), tokens.begin(), tokens.end());
  return p;
}

}  // namespace

std::vector<Hypothesis> greedy_decode(const TokenScorer& scorer, int max_out_len, double length_penalty) {
  if (max_out_len < 1) throw InvalidArgument("max_out_len must be >= 1");
  std::vector<Hypothesis> hyps(scorer.source_count());
  std::vector<std::size_t> open(hyps.size());
  for (std::size_t i = 0; i < open.size(); ++i) open[i] = i;
  for (int t = 0; t < max_out_len && !open.empty(); ++t) {
    std::vector<std::vector<int>> prefixes;
    for (std::size_t r : open) prefixes.push_back(with_bos(hyps[r].tokens));
    const auto lps = scorer.next_log_probs(open, prefixes);
    std::vector<std::size_t> still;
    for (std::size_t i = 0; i < open.size(); ++i) {
      const auto& lp = lps[i];
      const auto best = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
      auto& h = hyps[open[i]];
      h.tokens.push_back(best);
      h.log_prob += lp[static_cast<std::size_t>(best)];
      if (best == kEosId) {
        h.finished = true;
      } else {
        still.push_back(open[i]);
      }
    }
    open = std::move(still);
  }
  for (auto& h : hyps) h.score = length_normalised(h.log_prob, h.tokens.size(), length_penalty);
  return hyps;
}

std::vector<Hypothesis> beam_search(const TokenScorer& scorer, const DecodeConfig& cfg) {
  cfg.validate();
  const std::size_t n = scorer.source_count();
  const std::size_t k = static_cast<std::size_t>(cfg.beam_size);
  struct Beam {
    std::vector<Hypothesis> open{Hypothesis{}};
    std::vector<Hypothesis> finished;
  };
  std::vector<Beam> beams(n);
  struct Candidate {
    double total;
    std::size_t parent;
    double lp;
    int token;
  };
  auto better = [](const Candidate& a, const Candidate& b) {
    if (a.total != b.total) return a.total > b.total;
    if (a.parent != b.parent) return a.parent < b.parent;
    if (a.lp != b.lp) return a.lp > b.lp;
    return a.token < b.token;
  };
  for (int t = 0; t < cfg.max_out_len; ++t) {
    std::vector<std::size_t> rows;
    std::vector<std::vector<int>> prefixes;
    for (std::size_t s = 0; s < n; ++s)
      for (const auto& h : beams[s].open) {
        rows.push_back(s);
        prefixes.push_back(with_bos(h.tokens));
      }
    if (rows.empty()) break;
    const auto lps = scorer.next_log_probs(rows, prefixes);
    std::size_t q = 0;
    for (auto& beam : beams) {
      if (beam.open.empty()) continue;
      std::vector<Candidate> cands;
      for (std::size_t p = 0; p < beam.open.size(); ++p, ++q) {
        const auto& lp = lps[q];
        for (std::size_t v = 0; v < lp.size(); ++v)
          cands.push_back({beam.open[p].log_prob + lp[v], p, lp[v], static_cast<int>(v)});
      }
      const std::size_t keep = std::min(k, cands.size());
      std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), better);
      std::vector<Hypothesis> next;
      for (std::size_t c = 0; c < keep; ++c) {
        Hypothesis h = beam.open[cands[c].parent];
        h.tokens.push_back(cands[c].token);
        h.log_prob += cands[c].lp;
        h.score = length_normalised(h.log_prob, h.tokens.size(), cfg.length_penalty);
        if (cands[c].token == kEosId) {
          h.finished = true;
          beam.finished.push_back(std::move(h));
        } else {
          next.push_back(std::move(h));
        }
      }
      beam.open = std::move(next);
    }
  }
  std::vector<Hypothesis> out;
  out.reserve(n);
  for (auto& beam : beams) {
    const Hypothesis* best = nullptr;
    for (const auto* pool : {&beam.finished, &beam.open})
      for (const auto& h : *pool)
        if (best == nullptr || h.score > best->score) best = &h;
    out.push_back(*best);
  }
  return out;
}

std::vector<Hypothesis> decode(const TokenScorer& scorer, const DecodeConfig& cfg) {
  cfg.validate();
  if (cfg.beam_size == 1) return greedy_decode(scorer, cfg.max_out_len, cfg.length_penalty);
  return beam_search(scorer, cfg);
}

Hypothesis score_sequence(const TokenScorer& scorer, std::size_t row, const std::vector<int>& tokens,
                          double length_penalty) {
  Hypothesis h;
  const std::size_t rows[] = {row};
  for (int tok : tokens) {
    const std::vector<int> prefix[] = {with_bos(h.tokens)};
    const auto lp = scorer.next_log_probs(rows, prefix);
    if (tok < 0 || static_cast<std::size_t>(tok) >= lp.front().size()) throw IndexError("token out of range");
    h.log_prob += lp.front()[static_cast<std::size_t>(tok)];
    h.tokens.push_back(tok);
    if (tok == kEosId) {
      h.finished = true;
      break;
    }
  }
  h.score = length_normalised(h.log_prob, h.tokens.size(), length_penalty);
  return h;
}

std::vector<std::vector<int>> translate(const ModelF& model, const std::vector<std::vector<int>>& sources,
                                        const DecodeConfig& cfg, const NoiseSpec* noise, std::size_t chunk) {
  cfg.validate(model.config());
  std::vector<std::vector<int>> out;
  out.reserve(sources.size());
  for (std::size_t at = 0; at < sources.size(); at += chunk) {
    const std::vector<std::vector<int>> part(sources.begin() + static_cast<std::ptrdiff_t>(at),
                                             sources.begin() + static_cast<std::ptrdiff_t>(std::min(sources.size(), at + chunk)));
    // Each chunk draws its own noise so no two sentences share a perturbation.
    std::optional<NoiseSpec> chunk_noise;
    if (noise) {
      chunk_noise = *noise;
      chunk_noise->stream = derive_seed(noise->stream, at);
    }
    ModelScorer<float> scorer(model, cfg.view, part, chunk_noise ? &*chunk_noise : nullptr);
    for (const auto& h : decode(scorer, cfg)) out.push_back(h.output());
  }
  return out;
}

std::vector<std::vector<int>> translate_ensemble(const std::vector<const ModelF*>& models,
                                                 const std::vector<View>& views,
                                                 const std::vector<std::vector<int>>& sources,
                                                 const DecodeConfig& cfg, EnsembleSpace space, std::size_t chunk) {
  if (models.empty() || models.size() != views.size()) throw InvalidArgument("one view per ensemble member expected");
  for (const auto* m : models) {
    cfg.validate(m->config());
    if (m->config().tgt_vocab != models.front()->config().tgt_vocab) {
      throw InvalidArgument("ensemble vocabularies differ");
    }
  }
  std::vector<std::vector<int>> out;
  out.reserve(sources.size());
  for (std::size_t at = 0; at < sources.size(); at += chunk) {
    const std::vector<std::vector<int>> part(sources.begin() + static_cast<std::ptrdiff_t>(at),
                                             sources.begin() + static_cast<std::ptrdiff_t>(std::min(sources.size(), at + chunk)));
    std::vector<std::unique_ptr<ModelScorer<float>>> scorers;
    std::vector<const TokenScorer*> members;
    for (std::size_t i = 0; i < models.size(); ++i) {
      scorers.push_back(std::make_unique<ModelScorer<float>>(*models[i], views[i], part));
      members.push_back(scorers.back().get());
    }
    EnsembleScorer ensemble(members, space);
    for (const auto& h : decode(ensemble, cfg)) out.push_back(h.output());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

template <typename Token>
BleuReport corpus_bleu(const std::vector<std::vector<Token>>& hyps, const std::vector<std::vector<Token>>& refs) {
  if (hyps.empty()) throw InvalidArgument("BLEU of an empty corpus");
  if (hyps.size() != refs.size()) {
    throw InvalidArgument("BLEU needs one reference per hypothesis (" + std::to_string(hyps.size()) + " vs " +
                          std::to_string(refs.size()) + ")");
  }
  BleuReport r;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto& h = hyps[s];
    const auto& ref = refs[s];
    r.hyp_length += h.size();
    r.ref_length += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      if (h.size() < n) continue;
      r.totals[n - 1] += h.size() - n + 1;
      if (ref.size() < n) continue;
      std::map<std::vector<Token>, std::size_t> ref_counts, hyp_counts;
      for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[{ref.begin() + i, ref.begin() + i + n}];
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[{h.begin() + i, h.begin() + i + n}];
      for (const auto& [gram, c] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) r.matches[n - 1] += std::min(c, it->second);
      }
    }
  }
  bool zero = false;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    r.precisions[n] = r.totals[n] == 0 ? 0.0 : static_cast<double>(r.matches[n]) / static_cast<double>(r.totals[n]);
    if (r.precisions[n] == 0.0) {
      zero = true;
    } else {
      log_sum += std::log(r.precisions[n]);
    }
  }
  if (r.hyp_length == 0) {
    r.brevity_penalty = 0.0;
  } else if (r.hyp_length >= r.ref_length) {
    r.brevity_penalty = 1.0;
  } else {
    r.brevity_penalty = std::exp(1.0 - static_cast<double>(r.ref_length) / static_cast<double>(r.hyp_length));
  }
  r.bleu = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / 4.0);
  return r;
}

template BleuReport corpus_bleu(const std::vector<std::vector<int>>&, const std::vector<std::vector<int>>&);
template BleuReport corpus_bleu(const std::vector<std::vector<std::string>>&,
                                const std::vector<std::vector<std::string>>&);

double token_accuracy(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs) {
  if (hyps.size() != refs.size()) throw InvalidArgument("accuracy needs one reference per hypothesis");
  std::size_t hit = 0, total = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const std::size_t common = std::min(hyps[s].size(), refs[s].size());
    for (std::size_t i = 0; i < common; ++i) hit += hyps[s][i] == refs[s][i];
    total += std::max(hyps[s].size(), refs[s].size());
  }
  return total == 0 ? 1.0 : static_cast<double>(hit) / static_cast<double>(total);
}

double sequence_accuracy(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs) {
  if (hyps.size() != refs.size()) throw InvalidArgument("accuracy needs one reference per hypothesis");
  if (hyps.empty()) return 1.0;
  std::size_t hit = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) hit += hyps[s] == refs[s];
  return static_cast<double>(hit) / static_cast<double>(hyps.size());
}

template class ModelScorer<float>;
template class ModelScorer<double>;

}  // namespace mvnmt
