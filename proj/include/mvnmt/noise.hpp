// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace mvnmt {

/// Gaussian perturbation of the normalised value inside the encoder's last
/// layer normalisation: y = g * (N(x) + e) + b with e ~ N(0, eps_noise^2).
struct NoiseSpec {
  double eps_noise = 0.0;  // standard deviation
  std::uint64_t seed = 0;
  /// Distinguishes independent draws under one seed (e.g. sentence index).
  std::uint64_t stream = 0;
};

/// i.i.d. draws for `count` elements at the named injection site. Returns
/// an empty vector when eps_noise == 0 so the caller can skip injection.
/// Throws InvalidArgument for a negative eps_noise.
template <typename Real>
std::vector<Real> encoder_noise(const NoiseSpec& spec, std::string_view site, std::size_t count);

/// Returns normalized + e for one injection site (the perturbed N(x)).
template <typename Real>
std::vector<Real> inject_encoder_noise(std::span<const Real> normalized, const NoiseSpec& spec,
                                       std::string_view site);

}  // namespace mvnmt
