// SPDX-License-Identifier: Apache-2.0
//
// Multi-view training objective:
//   nll_joint = (nll_pri + nll_aux) / 2
//   cr        = mean over target tokens of KL(p_pri || p_aux)
//   total     = (1 - alpha) * nll_joint + alpha * cr
// Every term is averaged over non-pad target tokens.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mvnmt/model.hpp"
#include "mvnmt/tensor.hpp"
#include "mvnmt/tokens.hpp"

namespace mvnmt {

/// Which labels of the teacher distribution enter the consistency term.
struct DarkMode {
  enum Kind { full, gold_only, dark_only, rank_range };
  Kind kind = full;
  /// rank_range: 1-based ranks of non-gold labels sorted by descending
  /// teacher probability, inclusive on both ends.
  int rank_lo = 1;
  int rank_hi = 100;

  static DarkMode parse(const std::string& s);  // full|gold_only|dark_only|rank:A-B
  std::string str() const;
  void validate() const;
  bool operator==(const DarkMode&) const = default;
};

struct LossConfig {
  double alpha = 0.4;
  double eps_ls = 0.1;
  double tau = 1.0;
  bool detach_teacher = false;
  DarkMode dark;
  /// Renormalise both distributions over the retained labels before the KL.
  /// gold_only is never renormalised (it would be identically zero).
  bool renormalize = true;
  /// When false the consistency term is reported but not optimised, i.e.
  /// total = nll_joint.
  bool consistency = true;
  /// When false only the primary stream is decoded and trained
  /// (total = nll_pri), as for a single-view model.
  bool multi_view = true;

  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

template <typename V>
void visit_fields(LossConfig& c, V&& v) {
  v("alpha", c.alpha);
  v("eps_ls", c.eps_ls);
  v("tau", c.tau);
  v("detach_teacher", c.detach_teacher);
  v("dark_mode", c.dark);
  v("renormalize", c.renormalize);
  v("consistency", c.consistency);
  v("multi_view", c.multi_view);
}

struct LossBreakdown {
  double nll_pri = 0.0;
  double nll_aux = 0.0;
  double nll_joint = 0.0;
  double cr = 0.0;
  double total = 0.0;
  double alpha = 0.0;
  std::size_t token_count = 0;
};

template <typename Real>
struct NllTerms {
  Tensor<Real> pri;
  Tensor<Real> aux;    // == pri for single-stream logits
  Tensor<Real> joint;  // == pri for single-stream logits
  std::size_t token_count = 0;
};

template <typename Real>
struct MultiViewLoss {
  NllTerms<Real> nll;
  Tensor<Real> cr;
  Tensor<Real> total;
  double alpha = 0.0;

  LossBreakdown breakdown() const;
};

/// Per-stream label-smoothed NLL over `gold` (tgt_out, pad-marked).
/// Throws EmptyBatchError if every target position is padding.
template <typename Real>
NllTerms<Real> mv_nll(const TwoStreamLogits<Real>& logits, const TokenGrid& gold, double eps_ls);

/// Token-averaged KL(p_pri || p_aux) with temperature, detach and dark-mode
/// handling per `cfg`. `gold` supplies the padding and, for masked modes,
/// the gold labels.
template <typename Real>
Tensor<Real> consistency_kl(const TwoStreamLogits<Real>& logits, const TokenGrid& gold,
                            const LossConfig& cfg);

/// Retained-label flags (size V) for one teacher row. Throws ConfigError if
/// the retained set would be empty or the rank range does not fit.
std::vector<std::uint8_t> build_dark_mask(std::span<const double> p_teacher, int gold, const DarkMode& mode);

template <typename Real>
Tensor<Real> total_loss(const Tensor<Real>& nll_joint, const Tensor<Real>& cr, double alpha);

inline double total_loss(double nll_joint, double cr, double alpha) {
  return (1.0 - alpha) * nll_joint + alpha * cr;
}

/// Full objective for one batch.
template <typename Real>
MultiViewLoss<Real> compute_loss(const TwoStreamLogits<Real>& logits, const TokenGrid& gold,
                                 const LossConfig& cfg);

}  // namespace mvnmt
