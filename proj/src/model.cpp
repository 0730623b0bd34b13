// SPDX-License-Identifier: Apache-2.0
#include "mvnmt/model.hpp"

#include <cmath>
#include <functional>

#include "mvnmt/error.hpp"
#include "mvnmt/rng.hpp"

namespace mvnmt {

const char* to_string(NormStyle s) { return s == NormStyle::prenorm ? "prenorm" : "postnorm"; }
const char* to_string(View v) { return v == View::primary ? "primary" : "auxiliary"; }

NormStyle parse_norm_style(const std::string& s) {
  if (s == "prenorm") return NormStyle::prenorm;
  if (s == "postnorm") return NormStyle::postnorm;
  throw ConfigError("unknown norm style '" + s + "' (expected prenorm|postnorm)");
}

View parse_view(const std::string& s) {
  if (s == "primary" || s == "pri") return View::primary;
  if (s == "auxiliary" || s == "aux") return View::auxiliary;
  throw ConfigError("unknown view '" + s + "' (expected primary|auxiliary)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (encoder_layers < 1) fail("encoder_layers must be >= 1");
  if (decoder_layers < 1) fail("decoder_layers must be >= 1");
  if (multi_view && (aux_layer < 1 || aux_layer > encoder_layers)) {
    fail("aux_layer must lie in [1, encoder_layers]");
  }
  if (d_model < 1 || heads < 1 || d_model % heads != 0) fail("d_model must be a positive multiple of heads");
  if (d_ffn < 1) fail("d_ffn must be >= 1");
  if (src_vocab <= kNumReserved || tgt_vocab <= kNumReserved) fail("vocabularies must exceed the reserved ids");
  if (max_len < 1) fail("max_len must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0 || attn_dropout < 0.0 || attn_dropout >= 1.0) {
    fail("dropout probabilities must lie in [0, 1)");
  }
  if (!(tau > 0.0)) fail("tau must be > 0");
  if (!(ln_epsilon > 0.0)) fail("ln_epsilon must be > 0");
}

std::vector<ParameterSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto f = static_cast<std::size_t>(cfg.d_ffn);
  std::vector<ParameterSpec> out;
  auto attention = [&](const std::string& p) {
    for (const char* m : {"q", "k", "v", "o"}) {
      out.push_back({p + ".w" + m, {d, d}, InitKind::xavier});
      out.push_back({p + ".b" + m, {d}, InitKind::zeros});
    }
  };
  auto norm = [&](const std::string& p) {
    out.push_back({p + ".g", {d}, InitKind::ones});
    out.push_back({p + ".b", {d}, InitKind::zeros});
  };
  auto ffn = [&](const std::string& p) {
    out.push_back({p + ".w1", {d, f}, InitKind::xavier});
    out.push_back({p + ".b1", {f}, InitKind::zeros});
    out.push_back({p + ".w2", {f, d}, InitKind::xavier});
    out.push_back({p + ".b2", {d}, InitKind::zeros});
  };
  out.push_back({"src_embed", {static_cast<std::size_t>(cfg.src_vocab), d}, InitKind::embedding});
  out.push_back({"tgt_embed", {static_cast<std::size_t>(cfg.tgt_vocab), d}, InitKind::embedding});
  for (int l = 1; l <= cfg.encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    attention(p + ".san");
    norm(p + ".san_ln");
    ffn(p + ".ffn");
    norm(p + ".ffn_ln");
  }
  if (cfg.has_top_ln()) norm("enc.top_ln");
  if (cfg.has_aux_ln()) norm("enc.aux_ln");
  for (int l = 1; l <= cfg.decoder_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    attention(p + ".san");
    norm(p + ".san_ln");
    attention(p + ".can");
    norm(p + ".can_ln");
    if (cfg.multi_view && !cfg.share_can) {
      attention(p + ".can_aux");
      norm(p + ".can_ln_aux");
    }
    ffn(p + ".ffn");
    norm(p + ".ffn_ln");
  }
  if (cfg.norm_style == NormStyle::prenorm) norm("dec.top_ln");
  if (!cfg.tie_output_embedding) {
    out.push_back({"out.w", {d, static_cast<std::size_t>(cfg.tgt_vocab)}, InitKind::xavier});
  }
  out.push_back({"out.b", {static_cast<std::size_t>(cfg.tgt_vocab)}, InitKind::zeros});
  return out;
}

std::size_t parameter_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& p : parameter_layout(cfg)) n += shape_numel(p.shape);
  return n;
}

template <typename Real>
void ParameterSet<Real>::add(const std::string& name, Tensor<Real> t) {
  if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(t));
}

template <typename Real>
const Tensor<Real>& ParameterSet<Real>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("missing parameter '" + name + "'");
  return entries_[it->second].second;
}

template <typename Real>
Tensor<Real>& ParameterSet<Real>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("missing parameter '" + name + "'");
  return entries_[it->second].second;
}

template <typename Real>
std::size_t ParameterSet<Real>::element_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

template <typename Real>
void ParameterSet<Real>::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

template <typename Real>
std::vector<Real> positional_encoding(std::size_t length, std::size_t d) {
  std::vector<Real> pe(length * d);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe[pos * d + i] = static_cast<Real>(std::sin(angle));
      if (i + 1 < d) pe[pos * d + i + 1] = static_cast<Real>(std::cos(angle));
    }
  }
  return pe;
}

template <typename Real>
Model<Real>::Model(ModelConfig cfg, ParameterSet<Real> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  bind();
}

template <typename Real>
Model<Real> Model<Real>::build(const ModelConfig& cfg, std::uint64_t seed) {
  ParameterSet<Real> params;
  for (const auto& spec : parameter_layout(cfg)) {
    // Each parameter draws from its own stream, so models whose layouts
    // differ still agree on every parameter they have in common.
    Rng rng(derive_seed(seed, hash_str(spec.name)));
    std::vector<Real> v(shape_numel(spec.shape));
    switch (spec.init) {
      case InitKind::xavier: {
        const double limit = std::sqrt(6.0 / static_cast<double>(spec.shape[0] + spec.shape[1]));
        for (auto& x : v) x = static_cast<Real>((2.0 * uniform01(rng) - 1.0) * limit);
        break;
      }
      case InitKind::embedding: {
        const double sd = 1.0 / std::sqrt(static_cast<double>(spec.shape[1]));
        for (auto& x : v) x = static_cast<Real>(sd * standard_normal(rng));
        break;
      }
      case InitKind::ones:
        std::fill(v.begin(), v.end(), Real(1));
        break;
      case InitKind::zeros:
        break;
    }
    params.add(spec.name, Tensor<Real>::from(spec.shape, std::move(v), true));
  }
  return Model(cfg, std::move(params));
}

template <typename Real>
Model<Real> Model<Real>::from_parameters(const ModelConfig& cfg, ParameterSet<Real> params) {
  const auto layout = parameter_layout(cfg);
  if (layout.size() != params.size()) {
    throw ConfigError("parameter set has " + std::to_string(params.size()) + " entries, config expects " +
                      std::to_string(layout.size()));
  }
  ParameterSet<Real> ordered;
  for (const auto& spec : layout) {
    const auto& t = params.get(spec.name);
    if (t.shape() != spec.shape) {
      throw ConfigError("parameter '" + spec.name + "' has shape " + shape_str(t.shape()) +
                        ", config expects " + shape_str(spec.shape));
    }
    ordered.add(spec.name, t);
  }
  return Model(cfg, std::move(ordered));
}

template <typename Real>
Model<Real> Model<Real>::clone() const {
  ParameterSet<Real> copy;
  for (const auto& [name, t] : params_) copy.add(name, t.clone(true));
  return Model(cfg_, std::move(copy));
}

template <typename Real>
template <typename To>
Model<To> Model<Real>::cast() const {
  ParameterSet<To> copy;
  for (const auto& [name, t] : params_) {
    std::vector<To> v(t.data().begin(), t.data().end());
    copy.add(name, Tensor<To>::from(t.shape(), std::move(v), true));
  }
  return Model<To>::from_parameters(cfg_, std::move(copy));
}

template <typename Real>
void Model<Real>::bind() {
  auto lin = [&](const std::string& w, const std::string& b) {
    return Linear{params_.get(w), params_.get(b)};
  };
  auto attention = [&](const std::string& p) {
    return Attention{lin(p + ".wq", p + ".bq"), lin(p + ".wk", p + ".bk"), lin(p + ".wv", p + ".bv"),
                     lin(p + ".wo", p + ".bo")};
  };
  auto norm = [&](const std::string& p) {
    return LayerNormParams<Real>{params_.get(p + ".g"), params_.get(p + ".b"), cfg_.ln_epsilon};
  };
  auto ffn = [&](const std::string& p) {
    return FeedForward{lin(p + ".w1", p + ".b1"), lin(p + ".w2", p + ".b2")};
  };
  src_embed_ = params_.get("src_embed");
  tgt_embed_ = params_.get("tgt_embed");
  enc_.clear();
  for (int l = 1; l <= cfg_.encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    enc_.push_back({attention(p + ".san"), norm(p + ".san_ln"), ffn(p + ".ffn"), norm(p + ".ffn_ln")});
  }
  enc_top_ln_.reset();
  enc_aux_ln_.reset();
  if (cfg_.has_top_ln()) enc_top_ln_ = norm("enc.top_ln");
  if (cfg_.has_aux_ln()) enc_aux_ln_ = norm("enc.aux_ln");
  dec_.clear();
  for (int l = 1; l <= cfg_.decoder_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    DecoderLayer layer{attention(p + ".san"), norm(p + ".san_ln"), attention(p + ".can"),
                       norm(p + ".can_ln"),   {},                  {},
                       ffn(p + ".ffn"),       norm(p + ".ffn_ln")};
    if (cfg_.multi_view) {
      const bool own = !cfg_.share_can;
      layer.can_aux = own ? attention(p + ".can_aux") : layer.can;
      layer.can_ln_aux = own ? norm(p + ".can_ln_aux") : layer.can_ln;
    }
    dec_.push_back(std::move(layer));
  }
  dec_top_ln_.reset();
  if (cfg_.norm_style == NormStyle::prenorm) dec_top_ln_ = norm("dec.top_ln");
  out_ = Linear{cfg_.tie_output_embedding ? Tensor<Real>{} : params_.get("out.w"), params_.get("out.b")};
}

template <typename Real>
Tensor<Real> Model<Real>::drop(const Tensor<Real>& x, double p, const ForwardOptions& opts,
                               const std::string& site) const {
  if (!opts.training || p == 0.0) return x;
  return dropout(x, p, derive_seed(opts.seed, opts.step, hash_str(site)));
}

template <typename Real>
Tensor<Real> Model<Real>::norm(const Tensor<Real>& x, const LayerNormParams<Real>& p,
                               const ForwardOptions& opts, std::string_view noise_site) const {
  if (opts.noise != nullptr && !noise_site.empty()) {
    const auto noise = encoder_noise<Real>(*opts.noise, noise_site, x.numel());
    if (!noise.empty()) return layer_norm(x, p, std::span<const Real>(noise));
  }
  return layer_norm(x, p);
}

template <typename Real>
Tensor<Real> Model<Real>::embed(const Tensor<Real>& table, const TokenGrid& tokens,
                                const ForwardOptions& opts, std::string_view site) const {
  const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
  auto x = embedding(table, std::span<const int>(tokens.ids), Shape{tokens.rows, tokens.cols});
  x = scale(x, std::sqrt(static_cast<double>(d)));
  auto pe = Tensor<Real>::from(Shape{tokens.cols, d}, positional_encoding<Real>(tokens.cols, d));
  x = add(x, pe);
  return drop(x, cfg_.dropout, opts, std::string(site));
}

template <typename Real>
Tensor<Real> Model<Real>::attention(const Attention& p, const Tensor<Real>& query,
                                    const Tensor<Real>& memory, std::span<const std::uint8_t> key_pad,
                                    bool causal, const ForwardOptions& opts,
                                    const std::string& site) const {
  const std::size_t B = query.dim(0), Tq = query.dim(1), Tk = memory.dim(1);
  const auto H = static_cast<std::size_t>(cfg_.heads);
  const std::size_t dh = static_cast<std::size_t>(cfg_.d_model) / H;
  auto q = split_heads(add(matmul(query, p.q.w), p.q.b), H);
  auto k = split_heads(add(matmul(memory, p.k.w), p.k.b), H);
  auto v = split_heads(add(matmul(memory, p.v.w), p.v.b), H);
  auto scores = scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<std::uint8_t> mask(B * H * Tq * Tk, 0);
  bool any = false;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < Tq; ++i)
        for (std::size_t j = 0; j < Tk; ++j) {
          const bool m = key_pad[b * Tk + j] != 0 || (causal && j > i);
          mask[((b * H + h) * Tq + i) * Tk + j] = m;
          any = any || m;
        }
  if (any) scores = masked_fill(scores, std::span<const std::uint8_t>(mask), kMaskedLogit);
  auto weights = drop(softmax(scores), cfg_.attn_dropout, opts, site + ".attn");
  auto context = merge_heads(bmm(weights, v), H);
  return add(matmul(context, p.o.w), p.o.b);
}

template <typename Real>
Tensor<Real> Model<Real>::feed_forward(const FeedForward& p, const Tensor<Real>& x) const {
  auto h = relu(add(matmul(x, p.in.w), p.in.b));
  return add(matmul(h, p.out.w), p.out.b);
}

template <typename Real>
EncoderViews<Real> Model<Real>::encode_views(const TokenGrid& src, const ForwardOptions& opts) const {
  if (src.ids.size() != src.rows * src.cols || src.pad.size() != src.ids.size()) {
    throw ShapeError("source grid is inconsistent");
  }
  const bool prenorm = cfg_.norm_style == NormStyle::prenorm;
  std::span<const std::uint8_t> pad(src.pad);
  EncoderViews<Real> views;
  views.src_pad = src.pad;
  views.batch = src.rows;
  views.src_len = src.cols;

  auto x = embed(src_embed_, src, opts, "enc.embed");
  if (opts.retain_layers) views.per_layer.push_back(x);
  for (std::size_t l = 0; l < enc_.size(); ++l) {
    const EncoderLayer& L = enc_[l];
    const std::string site = "enc." + std::to_string(l + 1);
    const bool last = l + 1 == enc_.size();
    if (prenorm) {
      auto q = norm(x, L.san_ln, opts, {});
      auto h = add(x, drop(attention(L.san, q, q, pad, false, opts, site + ".san"), cfg_.dropout, opts,
                           site + ".san"));
      x = add(h, drop(feed_forward(L.ffn, norm(h, L.ffn_ln, opts, {})), cfg_.dropout, opts, site + ".ffn"));
    } else {
      auto h = norm(add(x, drop(attention(L.san, x, x, pad, false, opts, site + ".san"), cfg_.dropout, opts,
                                site + ".san")),
                    L.san_ln, opts, {});
      // Without a top normalisation, the last normalisation of the encoder
      // is this layer's output norm.
      const std::string_view noise_site = last && !enc_top_ln_ ? "enc.top_ln" : "";
      x = norm(add(h, drop(feed_forward(L.ffn, h), cfg_.dropout, opts, site + ".ffn")), L.ffn_ln, opts,
               noise_site);
    }
    if (grad_enabled()) x = mark(x, "encoder_layer");
    if (opts.retain_layers) views.per_layer.push_back(x);
    if (cfg_.multi_view && static_cast<int>(l + 1) == cfg_.aux_layer) {
      views.auxiliary = enc_aux_ln_ ? norm(x, *enc_aux_ln_, opts, "enc.aux_ln") : x;
    }
  }
  views.primary = enc_top_ln_ ? norm(x, *enc_top_ln_, opts, "enc.top_ln") : x;
  return views;
}

template <typename Real>
Tensor<Real> Model<Real>::decode_single(View view, const Tensor<Real>& memory,
                                        std::span<const std::uint8_t> src_pad, const TokenGrid& tgt_in,
                                        const ForwardOptions& opts, ActivationTrace<Real>* trace) const {
  if (view == View::auxiliary && !cfg_.multi_view) {
    throw ContractError("auxiliary view requested from a single-view model");
  }
  if (!memory.defined() || memory.rank() != 3 || memory.dim(0) != tgt_in.rows ||
      memory.dim(2) != static_cast<std::size_t>(cfg_.d_model) ||
      src_pad.size() != memory.dim(0) * memory.dim(1)) {
    throw ShapeError("decoder memory / mask / target shapes disagree");
  }
  if (tgt_in.ids.size() != tgt_in.rows * tgt_in.cols || tgt_in.pad.size() != tgt_in.ids.size()) {
    throw ShapeError("target grid is inconsistent");
  }
  const bool prenorm = cfg_.norm_style == NormStyle::prenorm;
  const bool primary = view == View::primary;
  const std::string stream = primary ? "dec.pri." : "dec.aux.";
  std::span<const std::uint8_t> tpad(tgt_in.pad);

  auto z = embed(tgt_embed_, tgt_in, opts, stream + "embed");
  for (std::size_t l = 0; l < dec_.size(); ++l) {
    const DecoderLayer& L = dec_[l];
    const Attention& can = primary ? L.can : L.can_aux;
    const LayerNormParams<Real>& can_ln = primary ? L.can_ln : L.can_ln_aux;
    const std::string site = stream + std::to_string(l + 1);
    if (prenorm) {
      auto q = norm(z, L.san_ln, opts, {});
      z = add(z, drop(attention(L.san, q, q, tpad, true, opts, site + ".san"), cfg_.dropout, opts, site + ".san"));
      if (trace) trace->after_san.push_back(z);
      z = add(z, drop(attention(can, norm(z, can_ln, opts, {}), memory, src_pad, false, opts, site + ".can"),
                      cfg_.dropout, opts, site + ".can"));
      if (trace) trace->after_can.push_back(z);
      z = add(z, drop(feed_forward(L.ffn, norm(z, L.ffn_ln, opts, {})), cfg_.dropout, opts, site + ".ffn"));
    } else {
      z = norm(add(z, drop(attention(L.san, z, z, tpad, true, opts, site + ".san"), cfg_.dropout, opts,
                           site + ".san")),
               L.san_ln, opts, {});
      if (trace) trace->after_san.push_back(z);
      z = norm(add(z, drop(attention(can, z, memory, src_pad, false, opts, site + ".can"), cfg_.dropout,
                           opts, site + ".can")),
               can_ln, opts, {});
      if (trace) trace->after_can.push_back(z);
      z = norm(add(z, drop(feed_forward(L.ffn, z), cfg_.dropout, opts, site + ".ffn")), L.ffn_ln, opts, {});
    }
  }
  if (dec_top_ln_) z = norm(z, *dec_top_ln_, opts, {});
  if (trace) trace->final_state = z;
  auto logits = cfg_.tie_output_embedding ? matmul(z, tgt_embed_, true) : matmul(z, out_.w);
  return add(logits, out_.b);
}

template <typename Real>
TwoStreamLogits<Real> Model<Real>::decode_two_stream(const EncoderViews<Real>& views,
                                                     const TokenGrid& tgt_in,
                                                     const ForwardOptions& opts) const {
  TwoStreamLogits<Real> out;
  std::span<const std::uint8_t> pad(views.src_pad);
  out.primary = decode_single(View::primary, views.primary, pad, tgt_in, opts);
  if (cfg_.multi_view) {
    if (!views.auxiliary.defined() || views.auxiliary.shape() != views.primary.shape()) {
      throw ShapeError("auxiliary view missing or shaped differently from the primary view");
    }
    out.auxiliary = decode_single(View::auxiliary, views.auxiliary, pad, tgt_in, opts);
  }
  return out;
}

template <typename Real>
Model<Real> Model<Real>::strip_to_view(View view) const {
  ModelConfig cfg = cfg_;
  cfg.multi_view = false;
  // Name in the stripped model -> name in this model.
  std::function<std::string(const std::string&)> rename = [](const std::string& name) { return name; };
  if (view == View::auxiliary) {
    if (!cfg_.multi_view) throw ContractError("cannot strip to the auxiliary view of a single-view model");
    cfg.encoder_layers = cfg_.aux_layer;
    cfg.aux_layer = cfg_.aux_layer;
    if (cfg_.norm_style == NormStyle::postnorm) cfg.postnorm_top_ln = cfg_.has_aux_ln();
    const bool shared = cfg_.share_can;
    rename = [shared](const std::string& name) {
      auto replace_segment = [&](const std::string& from, const std::string& to) -> std::optional<std::string> {
        const auto pos = name.find(from);
        if (pos == std::string::npos) return std::nullopt;
        return name.substr(0, pos) + to + name.substr(pos + from.size());
      };
      if (name.rfind("enc.top_ln.", 0) == 0) return "enc.aux_ln." + name.substr(11);
      if (!shared) {
        if (auto r = replace_segment(".can.", ".can_aux.")) return *r;
        if (auto r = replace_segment(".can_ln.", ".can_ln_aux.")) return *r;
      }
      return name;
    };
  }
  ParameterSet<Real> params;
  for (const auto& spec : parameter_layout(cfg)) params.add(spec.name, params_.get(rename(spec.name)).clone(true));
  return Model(cfg, std::move(params));
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;
template std::vector<float> positional_encoding<float>(std::size_t, std::size_t);
template std::vector<double> positional_encoding<double>(std::size_t, std::size_t);

}  // namespace mvnmt
