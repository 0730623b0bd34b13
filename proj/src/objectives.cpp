// SPDX-License-Identifier: Apache-2.0
#include "mvnmt/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mvnmt/error.hpp"
#include "mvnmt/ops.hpp"

namespace mvnmt {

DarkMode DarkMode::parse(const std::string& s) {
  DarkMode m;
  if (s == "full") return m;
  if (s == "gold_only") {
    m.kind = gold_only;
    return m;
  }
  if (s == "dark_only") {
    m.kind = dark_only;
    return m;
  }
  if (s.rfind("rank:", 0) == 0) {
    const auto dash = s.find('-', 5);
    if (dash == std::string::npos) throw ConfigError("dark mode '" + s + "': expected rank:A-B");
    try {
      std::size_t used_a = 0, used_b = 0;
      const std::string a = s.substr(5, dash - 5), b = s.substr(dash + 1);
      m.rank_lo = std::stoi(a, &used_a);
      m.rank_hi = std::stoi(b, &used_b);
      if (used_a != a.size() || used_b != b.size()) throw std::invalid_argument(s);
    } catch (const std::logic_error&) {
      throw ConfigError("dark mode '" + s + "': expected rank:A-B with integer bounds");
    }
    m.kind = rank_range;
    m.validate();
    return m;
  }
  throw ConfigError("unknown dark mode '" + s + "' (expected full|gold_only|dark_only|rank:A-B)");
}

std::string DarkMode::str() const {
  switch (kind) {
    case full: return "full";
    case gold_only: return "gold_only";
    case dark_only: return "dark_only";
    case rank_range: return "rank:" + std::to_string(rank_lo) + "-" + std::to_string(rank_hi);
  }
  return "full";
}

void DarkMode::validate() const {
  if (kind == rank_range && !(1 <= rank_lo && rank_lo < rank_hi)) {
    throw ConfigError("dark rank range must satisfy 1 <= a < b (got " + std::to_string(rank_lo) + "-" +
                      std::to_string(rank_hi) + ")");
  }
}

void LossConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(eps_ls >= 0.0 && eps_ls < 1.0)) throw ConfigError("eps_ls must lie in [0, 1)");
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  dark.validate();
}

template <typename Real>
LossBreakdown MultiViewLoss<Real>::breakdown() const {
  LossBreakdown b;
  b.nll_pri = static_cast<double>(nll.pri.item());
  b.nll_aux = static_cast<double>(nll.aux.item());
  b.nll_joint = static_cast<double>(nll.joint.item());
  b.cr = static_cast<double>(cr.item());
  b.total = static_cast<double>(total.item());
  b.alpha = alpha;
  b.token_count = nll.token_count;
  return b;
}

namespace {

struct TokenWeights {
  std::size_t count = 0;
  std::vector<std::uint8_t> keep;  // per flattened target position
};

TokenWeights target_tokens(const TokenGrid& gold) {
  TokenWeights w;
  w.keep.resize(gold.ids.size());
  for (std::size_t i = 0; i < gold.ids.size(); ++i) {
    w.keep[i] = gold.pad[i] == 0;
    w.count += w.keep[i];
  }
  if (w.count == 0) throw EmptyBatchError("batch contains no target tokens");
  return w;
}

template <typename Real>
Tensor<Real> rows_of(const Tensor<Real>& logits, const TokenGrid& gold) {
  if (!logits.defined() || logits.rank() != 3 || logits.dim(0) != gold.rows || logits.dim(1) != gold.cols) {
    throw ShapeError("logits do not match the target grid " + std::to_string(gold.rows) + "x" +
                     std::to_string(gold.cols));
  }
  return reshape(logits, Shape{gold.rows * gold.cols, logits.dim(2)});
}

/// Mean of a per-row quantity over the retained target positions.
template <typename Real>
Tensor<Real> token_mean(const Tensor<Real>& per_row, const TokenWeights& w) {
  std::vector<Real> ones(w.keep.begin(), w.keep.end());
  return scale(weighted_sum(per_row, std::span<const Real>(ones)), 1.0 / static_cast<double>(w.count));
}

template <typename Real>
Tensor<Real> stream_nll(const Tensor<Real>& logits, const TokenGrid& gold, double eps_ls,
                        const TokenWeights& w) {
  auto lp = log_softmax(rows_of(logits, gold));
  return token_mean(label_smoothed_nll(lp, std::span<const int>(gold.ids), eps_ls), w);
}

}  // namespace

template <typename Real>
NllTerms<Real> mv_nll(const TwoStreamLogits<Real>& logits, const TokenGrid& gold, double eps_ls) {
  const auto w = target_tokens(gold);
  NllTerms<Real> out;
  out.token_count = w.count;
  out.pri = stream_nll(logits.primary, gold, eps_ls, w);
  if (logits.auxiliary.defined()) {
    out.aux = stream_nll(logits.auxiliary, gold, eps_ls, w);
    out.joint = scale(add(out.pri, out.aux), 0.5);
  } else {
    out.aux = out.pri;
    out.joint = out.pri;
  }
  return out;
}

std::vector<std::uint8_t> build_dark_mask(std::span<const double> p, int gold, const DarkMode& mode) {
  const std::size_t V = p.size();
  if (V < 2) throw ConfigError("dark-knowledge masking needs a vocabulary of at least 2");
  if (gold < 0 || static_cast<std::size_t>(gold) >= V) {
    throw IndexError("gold label " + std::to_string(gold) + " outside vocabulary of size " + std::to_string(V));
  }
  mode.validate();
  const auto g = static_cast<std::size_t>(gold);
  std::vector<std::uint8_t> keep(V, 0);
  switch (mode.kind) {
    case DarkMode::full:
      std::fill(keep.begin(), keep.end(), 1);
      break;
    case DarkMode::gold_only:
      keep[g] = 1;
      break;
    case DarkMode::dark_only:
      std::fill(keep.begin(), keep.end(), 1);
      keep[g] = 0;
      break;
    case DarkMode::rank_range: {
      if (V - 1 < static_cast<std::size_t>(mode.rank_lo)) {
        throw ConfigError("dark rank range starts at " + std::to_string(mode.rank_lo) + " but only " +
                          std::to_string(V - 1) + " non-gold labels exist");
      }
      std::vector<std::size_t> order;
      for (std::size_t v = 0; v < V; ++v)
        if (v != g) order.push_back(v);
      // Descending probability; ties resolved towards the lower label id.
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
      const auto hi = std::min<std::size_t>(order.size(), static_cast<std::size_t>(mode.rank_hi));
      for (std::size_t r = static_cast<std::size_t>(mode.rank_lo); r <= hi; ++r) keep[order[r - 1]] = 1;
      break;
    }
  }
  if (std::none_of(keep.begin(), keep.end(), [](std::uint8_t k) { return k != 0; })) {
    throw ConfigError("dark-knowledge mask retains no labels");
  }
  return keep;
}

template <typename Real>
Tensor<Real> consistency_kl(const TwoStreamLogits<Real>& logits, const TokenGrid& gold, const LossConfig& cfg) {
  cfg.dark.validate();
  if (!logits.auxiliary.defined()) throw ContractError("consistency term needs two streams");
  const auto w = target_tokens(gold);
  auto zp = rows_of(logits.primary, gold);
  auto zq = rows_of(logits.auxiliary, gold);
  if (cfg.detach_teacher) zp = detach(zp);

  if (cfg.dark.kind == DarkMode::full) {
    return token_mean(kl_divergence_rows(softmax(zp, cfg.tau), softmax(zq, cfg.tau)), w);
  }

  const std::size_t R = zp.dim(0), V = zp.dim(1);
  std::vector<std::uint8_t> retained(R * V, 1);
  {
    NoGradGuard ng;
    auto teacher = softmax(detach(zp), cfg.tau);
    std::vector<double> row(V);
    for (std::size_t r = 0; r < R; ++r) {
      if (!w.keep[r]) continue;
      for (std::size_t v = 0; v < V; ++v) row[v] = static_cast<double>(teacher.at(r * V + v));
      const auto keep = build_dark_mask(row, gold.ids[r], cfg.dark);
      std::copy(keep.begin(), keep.end(), retained.begin() + static_cast<std::ptrdiff_t>(r * V));
    }
  }
  std::span<const std::uint8_t> keep(retained);
  if (cfg.renormalize && cfg.dark.kind != DarkMode::gold_only) {
    std::vector<std::uint8_t> dropped(retained.size());
    for (std::size_t i = 0; i < retained.size(); ++i) dropped[i] = retained[i] == 0;
    std::span<const std::uint8_t> out(dropped);
    auto p = softmax(masked_fill(zp, out, kMaskedLogit), cfg.tau);
    auto q = softmax(masked_fill(zq, out, kMaskedLogit), cfg.tau);
    return token_mean(kl_divergence_rows(p, q, keep), w);
  }
  return token_mean(kl_divergence_rows(softmax(zp, cfg.tau), softmax(zq, cfg.tau), keep), w);
}

template <typename Real>
Tensor<Real> total_loss(const Tensor<Real>& nll_joint, const Tensor<Real>& cr, double alpha) {
  return add(scale(nll_joint, 1.0 - alpha), scale(cr, alpha));
}

template <typename Real>
MultiViewLoss<Real> compute_loss(const TwoStreamLogits<Real>& logits, const TokenGrid& gold,
                                 const LossConfig& cfg) {
  cfg.validate();
  MultiViewLoss<Real> out;
  out.alpha = cfg.alpha;
  out.nll = mv_nll(logits, gold, cfg.eps_ls);
  const bool two_streams = logits.auxiliary.defined();
  if (!two_streams) {
    out.cr = Tensor<Real>::scalar(Real(0));
    out.total = out.nll.joint;
    return out;
  }
  if (cfg.consistency) {
    out.cr = consistency_kl(logits, gold, cfg);
    out.total = total_loss(out.nll.joint, out.cr, cfg.alpha);
  } else {
    {
      NoGradGuard ng;
      out.cr = consistency_kl(logits, gold, cfg);
    }
    out.total = out.nll.joint;
  }
  return out;
}

#define MVNMT_INSTANTIATE(Real)                                                                              \
  template struct MultiViewLoss<Real>;                                                                       \
  template NllTerms<Real> mv_nll(const TwoStreamLogits<Real>&, const TokenGrid&, double);                   \
  template Tensor<Real> consistency_kl(const TwoStreamLogits<Real>&, const TokenGrid&, const LossConfig&);  \
  template Tensor<Real> total_loss(const Tensor<Real>&, const Tensor<Real>&, double);                       \
  template MultiViewLoss<Real> compute_loss(const TwoStreamLogits<Real>&, const TokenGrid&, const LossConfig&);

MVNMT_INSTANTIATE(float)
MVNMT_INSTANTIATE(double)
#undef MVNMT_INSTANTIATE

}  // namespace mvnmt
