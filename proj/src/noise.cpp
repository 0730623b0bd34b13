// SPDX-License-Identifier: Apache-2.0
#include "mvnmt/noise.hpp"

#include "mvnmt/error.hpp"
#include "mvnmt/rng.hpp"

namespace mvnmt {

template <typename Real>
std::vector<Real> encoder_noise(const NoiseSpec& spec, std::string_view site, std::size_t count) {
  if (spec.eps_noise < 0.0) throw InvalidArgument("eps_noise must be >= 0");
  if (spec.eps_noise == 0.0) return {};
  Rng rng(derive_seed(spec.seed, spec.stream, hash_str(site)));
  std::vector<Real> out(count);
  for (auto& v : out) v = static_cast<Real>(spec.eps_noise * standard_normal(rng));
  return out;
}

template <typename Real>
std::vector<Real> inject_encoder_noise(std::span<const Real> normalized, const NoiseSpec& spec,
                                       std::string_view site) {
  std::vector<Real> out(normalized.begin(), normalized.end());
  const auto noise = encoder_noise<Real>(spec, site, out.size());
  for (std::size_t i = 0; i < noise.size(); ++i) out[i] += noise[i];
  return out;
}

template std::vector<float> encoder_noise<float>(const NoiseSpec&, std::string_view, std::size_t);
template std::vector<double> encoder_noise<double>(const NoiseSpec&, std::string_view, std::size_t);
template std::vector<float> inject_encoder_noise<float>(std::span<const float>, const NoiseSpec&,
                                                        std::string_view);
template std::vector<double> inject_encoder_noise<double>(std::span<const double>, const NoiseSpec&,
                                                          std::string_view);

}  // namespace mvnmt
