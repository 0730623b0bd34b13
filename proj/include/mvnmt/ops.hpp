// SPDX-License-Identifier: Apache-2.0
//
// The differentiable operation set. Every function records itself on the
// tape when an input requires a gradient; otherwise it is a plain kernel.
// Reductions that feed a softmax or a normalisation accumulate in double
// regardless of Real.

#pragma once

#include <cstdint>
#include <span>
#include <string_view>

#include "mvnmt/tensor.hpp"

namespace mvnmt {

/// Lower bound applied to probabilities before taking a logarithm.
inline constexpr double kProbabilityFloor = 1e-9;
/// Value written into masked attention logits before the softmax.
inline constexpr double kMaskedLogit = -1e9;

/// [..., k] x [k, m] -> [..., m]; with `transpose_b`, b is [m, k].
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b, bool transpose_b = false);

/// Batched product over the leading dimension: [G, n, k] x [G, k, m] -> [G, n, m];
/// with `transpose_b`, b is [G, m, k].
template <typename Real>
Tensor<Real> bmm(const Tensor<Real>& a, const Tensor<Real>& b, bool transpose_b = false);

/// Swaps the last two dimensions.
template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& a);

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape);

/// Elementwise sum. `b` either has a's shape or a suffix of it (broadcast
/// over the leading dimensions, e.g. a bias row).
template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, double factor);

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& a);

/// [B, T, H*dh] -> [B*H, T, dh]
template <typename Real>
Tensor<Real> split_heads(const Tensor<Real>& x, std::size_t heads);

/// [B*H, T, dh] -> [B, T, H*dh]
template <typename Real>
Tensor<Real> merge_heads(const Tensor<Real>& x, std::size_t heads);

/// Looks up rows of `table` [V, d]; result shape is ids_shape + [d].
template <typename Real>
Tensor<Real> embedding(const Tensor<Real>& table, std::span<const int> ids, const Shape& ids_shape);

/// Selects rows along dimension 0 (rows may repeat).
template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, std::span<const std::size_t> rows);

/// Inverted dropout; the keep mask is a pure function of `seed`.
template <typename Real>
Tensor<Real> dropout(const Tensor<Real>& x, double p, std::uint64_t seed);

/// Softmax over the last dimension of z / tau, max-shift stabilised.
/// Throws InvalidArgument on non-finite input or tau <= 0.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& z, double tau = 1.0);

template <typename Real>
Tensor<Real> log_softmax(const Tensor<Real>& z, double tau = 1.0);

template <typename Real>
struct LayerNormParams {
  Tensor<Real> gain;
  Tensor<Real> bias;
  double epsilon = 1e-5;
};

/// y = g * (N(x) + noise) + b over the last dimension, where N(x) is the
/// zero-mean unit-(population)-variance normalisation. `noise`, if given,
/// has x's element count and is treated as a constant.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const LayerNormParams<Real>& params,
                        std::span<const Real> noise = {});

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x);

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x);

/// sum_i w_i * x_i with constant weights.
template <typename Real>
Tensor<Real> weighted_sum(const Tensor<Real>& x, std::span<const Real> weights);

/// Positions with mask != 0 are replaced by `value` and receive no gradient.
template <typename Real>
Tensor<Real> masked_fill(const Tensor<Real>& x, std::span<const std::uint8_t> mask, double value);

/// Per-row KL(p || q) = sum_v p(v) log(p(v)/q(v)) over [R, V] probability
/// rows, with both arguments clamped to kProbabilityFloor inside the log.
/// Gradients flow into both p and q. When `retained` (one flag per element)
/// is given only flagged terms are summed and the row-sum check is skipped.
template <typename Real>
Tensor<Real> kl_divergence_rows(const Tensor<Real>& p, const Tensor<Real>& q,
                                std::span<const std::uint8_t> retained = {});

/// Per-row label-smoothed NLL over [R, V] log-probabilities:
/// -(1-eps) lp[gold] - eps/(V-1) sum_{v != gold} lp[v].
template <typename Real>
Tensor<Real> label_smoothed_nll(const Tensor<Real>& logprobs, std::span<const int> gold, double eps);

/// Value copy that is cut from the tape.
template <typename Real>
Tensor<Real> detach(const Tensor<Real>& x);

/// Identity that leaves a labelled node on the tape (used by probes).
template <typename Real>
Tensor<Real> mark(const Tensor<Real>& x, std::string_view label);

}  // namespace mvnmt
