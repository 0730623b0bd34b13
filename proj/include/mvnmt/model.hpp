// SPDX-License-Identifier: Apache-2.0
//
// Multi-view Transformer encoder-decoder.
//
// The encoder runs its M layers once and exposes two views of the source:
// the primary view (top layer, through the top normalisation when present)
// and the auxiliary view (layer M_a through its own normalisation). The
// decoder is evaluated once per view. Both streams share the self-attention
// and feed-forward sublayers, the final normalisation and the output
// projection; each stream owns its cross-attention sublayer and the
// normalisation attached to it unless `share_can` is set.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mvnmt/noise.hpp"
#include "mvnmt/ops.hpp"
#include "mvnmt/tensor.hpp"
#include "mvnmt/tokens.hpp"

namespace mvnmt {

enum class NormStyle { prenorm, postnorm };
enum class View { primary, auxiliary };

const char* to_string(NormStyle s);
const char* to_string(View v);
NormStyle parse_norm_style(const std::string& s);
View parse_view(const std::string& s);

struct ModelConfig {
  int encoder_layers = 4;  // M
  int decoder_layers = 2;  // N
  int aux_layer = 2;       // M_a, 1 <= M_a <= M
  bool multi_view = true;
  int d_model = 32;
  int d_ffn = 64;
  int heads = 4;
  NormStyle norm_style = NormStyle::prenorm;
  /// Both decoder streams use one cross-attention sublayer (and its norm).
  bool share_can = false;
  /// Postnorm only: add the auxiliary-view normalisation after layer M_a.
  bool postnorm_aux_ln = true;
  /// Postnorm only: normalisation on top of the encoder (set when an
  /// auxiliary view that carried its own normalisation is stripped out).
  bool postnorm_top_ln = false;
  bool tie_output_embedding = false;
  double dropout = 0.1;
  double attn_dropout = 0.0;
  int src_vocab = 20;
  int tgt_vocab = 20;
  int max_len = 64;
  double tau = 1.0;
  double ln_epsilon = 1e-5;

  /// Throws ConfigError when an invariant does not hold.
  void validate() const;
  bool has_aux_ln() const {
    return multi_view && (norm_style == NormStyle::prenorm || postnorm_aux_ln);
  }
  bool has_top_ln() const { return norm_style == NormStyle::prenorm || postnorm_top_ln; }

  bool operator==(const ModelConfig&) const = default;
};

/// Calls v(name, field) for every serialisable field, in a fixed order.
template <typename V>
void visit_fields(ModelConfig& c, V&& v) {
  v("encoder_layers", c.encoder_layers);
  v("decoder_layers", c.decoder_layers);
  v("aux_layer", c.aux_layer);
  v("multi_view", c.multi_view);
  v("d_model", c.d_model);
  v("d_ffn", c.d_ffn);
  v("heads", c.heads);
  v("norm_style", c.norm_style);
  v("share_can", c.share_can);
  v("postnorm_aux_ln", c.postnorm_aux_ln);
  v("postnorm_top_ln", c.postnorm_top_ln);
  v("tie_output_embedding", c.tie_output_embedding);
  v("dropout", c.dropout);
  v("attn_dropout", c.attn_dropout);
  v("src_vocab", c.src_vocab);
  v("tgt_vocab", c.tgt_vocab);
  v("max_len", c.max_len);
  v("tau", c.tau);
  v("ln_epsilon", c.ln_epsilon);
}

enum class InitKind { xavier, embedding, ones, zeros };

struct ParameterSpec {
  std::string name;
  Shape shape;
  InitKind init;
};

/// Canonical list of parameters implied by a configuration.
std::vector<ParameterSpec> parameter_layout(const ModelConfig& cfg);

/// Closed-form element count of parameter_layout(cfg).
std::size_t parameter_count(const ModelConfig& cfg);

/// Ordered, named parameter tensors.
template <typename Real>
class ParameterSet {
 public:
  void add(const std::string& name, Tensor<Real> t);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<Real>& get(const std::string& name) const;
  Tensor<Real>& get(const std::string& name);
  std::size_t size() const { return entries_.size(); }
  std::size_t element_count() const;
  void zero_grad();

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<std::pair<std::string, Tensor<Real>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename Real>
struct EncoderViews {
  Tensor<Real> primary;    // [B, S, d]
  Tensor<Real> auxiliary;  // [B, S, d]; undefined for single-view models
  /// H^(0..M) before any top normalisation, when retention was requested.
  std::vector<Tensor<Real>> per_layer;
  std::vector<std::uint8_t> src_pad;  // [B, S]
  std::size_t batch = 0;
  std::size_t src_len = 0;

  const Tensor<Real>& view(View v) const { return v == View::primary ? primary : auxiliary; }
};

/// Decoder intermediates of one stream, per layer: after self-attention,
/// after cross-attention, and the final representation fed to W_o.
template <typename Real>
struct ActivationTrace {
  std::vector<Tensor<Real>> after_san;
  std::vector<Tensor<Real>> after_can;
  Tensor<Real> final_state;
};

template <typename Real>
struct TwoStreamLogits {
  Tensor<Real> primary;    // [B, T, V]
  Tensor<Real> auxiliary;  // [B, T, V]; undefined for single-view models
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  const NoiseSpec* noise = nullptr;
  bool retain_layers = false;
};

template <typename Real>
class Model {
 public:
  static Model build(const ModelConfig& cfg, std::uint64_t seed);
  /// Adopts an existing parameter set; names and shapes must match the
  /// layout of `cfg` exactly (ConfigError otherwise).
  static Model from_parameters(const ModelConfig& cfg, ParameterSet<Real> params);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Deep copy with independent parameter storage.
  Model clone() const;
  template <typename To>
  Model<To> cast() const;

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<Real>& parameters() { return params_; }
  const ParameterSet<Real>& parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.element_count(); }

  EncoderViews<Real> encode_views(const TokenGrid& src, const ForwardOptions& opts = {}) const;

  TwoStreamLogits<Real> decode_two_stream(const EncoderViews<Real>& views, const TokenGrid& tgt_in,
                                          const ForwardOptions& opts = {}) const;

  /// One decoder stream over `memory` (the representation of `view`).
  Tensor<Real> decode_single(View view, const Tensor<Real>& memory,
                             std::span<const std::uint8_t> src_pad, const TokenGrid& tgt_in,
                             const ForwardOptions& opts = {},
                             ActivationTrace<Real>* trace = nullptr) const;

  /// Inference model for one view: parameters of the other view are dropped
  /// and the result is an ordinary single-view model.
  Model strip_to_view(View view) const;

 private:
  struct Linear {
    Tensor<Real> w, b;
  };
  struct Attention {
    Linear q, k, v, o;
  };
  struct FeedForward {
    Linear in, out;
  };
  struct EncoderLayer {
    Attention san;
    LayerNormParams<Real> san_ln;
    FeedForward ffn;
    LayerNormParams<Real> ffn_ln;
  };
  struct DecoderLayer {
    Attention san;
    LayerNormParams<Real> san_ln;
    Attention can;
    LayerNormParams<Real> can_ln;
    Attention can_aux;
    LayerNormParams<Real> can_ln_aux;
    FeedForward ffn;
    LayerNormParams<Real> ffn_ln;
  };

  Model(ModelConfig cfg, ParameterSet<Real> params);
  void bind();

  Tensor<Real> embed(const Tensor<Real>& table, const TokenGrid& tokens, const ForwardOptions& opts,
                     std::string_view site) const;
  Tensor<Real> attention(const Attention& p, const Tensor<Real>& query, const Tensor<Real>& memory,
                         std::span<const std::uint8_t> key_pad, bool causal,
                         const ForwardOptions& opts, const std::string& site) const;
  Tensor<Real> feed_forward(const FeedForward& p, const Tensor<Real>& x) const;
  Tensor<Real> drop(const Tensor<Real>& x, double p, const ForwardOptions& opts,
                    const std::string& site) const;
  Tensor<Real> norm(const Tensor<Real>& x, const LayerNormParams<Real>& p,
                    const ForwardOptions& opts, std::string_view noise_site) const;

  ModelConfig cfg_;
  ParameterSet<Real> params_;
  Tensor<Real> src_embed_, tgt_embed_;
  std::vector<EncoderLayer> enc_;
  std::optional<LayerNormParams<Real>> enc_top_ln_, enc_aux_ln_;
  std::vector<DecoderLayer> dec_;
  std::optional<LayerNormParams<Real>> dec_top_ln_;
  Linear out_;
};

/// Sinusoidal position encodings [length, d].
template <typename Real>
std::vector<Real> positional_encoding(std::size_t length, std::size_t d);

using ModelF = Model<float>;
using ModelD = Model<double>;

}  // namespace mvnmt
