// SPDX-License-Identifier: Apache-2.0
#include <random>
#include <set>

#include "doctest.h"
#include "mvnmt/model.hpp"
#include "support/gradcheck.hpp"

using namespace mvnmt;

namespace {

ModelConfig small_config(NormStyle style = NormStyle::prenorm) {
  ModelConfig c;
  c.encoder_layers = 3;
  c.decoder_layers = 2;
  c.aux_layer = 2;
  c.d_model = 8;
  c.d_ffn = 16;
  c.heads = 2;
  c.src_vocab = 11;
  c.tgt_vocab = 13;
  c.norm_style = style;
  c.dropout = 0.0;
  return c;
}

TokenGrid random_grid(std::mt19937_64& rng, std::size_t rows, std::size_t max_len, int vocab,
                      bool with_bos = false) {
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  std::uniform_int_distribution<int> tok(kNumReserved, vocab - 1);
  std::vector<std::vector<int>> seqs(rows);
  for (auto& s : seqs) {
    const std::size_t n = len(rng);
    if (with_bos) s.push_back(kBosId);
    while (s.size() < n + (with_bos ? 1 : 0)) s.push_back(tok(rng));
  }
  return TokenGrid::from_rows(seqs);
}

template <typename Real>
bool bitwise_equal(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a.at(i) != b.at(i)) return false;
  return true;
}

/// Parameters used only by the auxiliary stream.
std::vector<std::string> auxiliary_only(const ModelConfig& cfg) {
  std::vector<std::string> out;
  ModelConfig single = cfg;
  single.multi_view = false;
  std::set<std::string> shared;
  for (const auto& s : parameter_layout(single)) shared.insert(s.name);
  for (const auto& s : parameter_layout(cfg))
    if (!shared.count(s.name)) out.push_back(s.name);
  return out;
}

}  // namespace

TEST_CASE("build is deterministic per seed") {
  auto a = ModelF::build(small_config(), 5);
  auto b = ModelF::build(small_config(), 5);
  auto c = ModelF::build(small_config(), 6);
  bool any_diff = false;
  for (const auto& [name, t] : a.parameters()) {
    CHECK(bitwise_equal(t, b.parameters().get(name)));
    any_diff = any_diff || !bitwise_equal(t, c.parameters().get(name));
  }
  CHECK(any_diff);
  CHECK(a.parameter_count() == parameter_count(small_config()));
}

TEST_CASE("config invariants are enforced") {
  auto c = small_config();
  c.aux_layer = 4;
  CHECK_THROWS_AS(ModelF::build(c, 1), ConfigError);
  c = small_config();
  c.aux_layer = 0;
  CHECK_THROWS_AS(ModelF::build(c, 1), ConfigError);
  c = small_config();
  c.heads = 3;
  CHECK_THROWS_AS(ModelF::build(c, 1), ConfigError);
  c = small_config();
  c.decoder_layers = 0;
  CHECK_THROWS_AS(ModelF::build(c, 1), ConfigError);
  c = small_config();
  c.aux_layer = c.encoder_layers;
  CHECK_NOTHROW(ModelF::build(c, 1));
}

TEST_CASE("shared cross-attention removes exactly one CAN and one LN per decoder layer") {
  for (auto style : {NormStyle::prenorm, NormStyle::postnorm}) {
    auto own = small_config(style);
    auto shared = own;
    shared.share_can = true;
    const std::size_t d = static_cast<std::size_t>(own.d_model);
    const std::size_t can = 4 * d * d + 4 * d;
    const std::size_t ln = 2 * d;
    CHECK(parameter_count(own) - parameter_count(shared) == own.decoder_layers * (can + ln));
    auto single = own;
    single.multi_view = false;
    // A shared-CAN model is a single-view model plus the auxiliary-view norm.
    CHECK(parameter_count(shared) == parameter_count(single) + (shared.has_aux_ln() ? ln : 0));
  }
}

TEST_CASE("a single-view build holds exactly the primary-path parameters") {
  auto mv = ModelF::build(small_config(), 3);
  auto cfg = small_config();
  cfg.multi_view = false;
  auto sv = ModelF::build(cfg, 3);
  for (const auto& [name, t] : sv.parameters()) {
    REQUIRE(mv.parameters().contains(name));
    CHECK(bitwise_equal(t, mv.parameters().get(name)));
  }
  CHECK(sv.parameters().size() + auxiliary_only(small_config()).size() == mv.parameters().size());
}

TEST_CASE("views coincide when the auxiliary tap is the top layer") {
  auto cfg = small_config();
  cfg.aux_layer = cfg.encoder_layers;
  auto m = ModelD::build(cfg, 2);
  std::mt19937_64 rng(1);
  auto src = random_grid(rng, 3, 6, cfg.src_vocab);
  NoGradGuard ng;
  auto v = m.encode_views(src);
  CHECK(bitwise_equal(v.primary, v.auxiliary));
}

TEST_CASE("per-layer retention returns M+1 entries ending at the top layer") {
  auto m = ModelD::build(small_config(), 2);
  std::mt19937_64 rng(1);
  auto src = random_grid(rng, 2, 5, 11);
  ForwardOptions o;
  o.retain_layers = true;
  NoGradGuard ng;
  auto v = m.encode_views(src, o);
  REQUIRE(v.per_layer.size() == 4);
  auto top = layer_norm(v.per_layer.back(), LayerNormParams<double>{m.parameters().get("enc.top_ln.g"),
                                                                   m.parameters().get("enc.top_ln.b"), 1e-5});
  CHECK(bitwise_equal(top, v.primary));
}

TEST_CASE("zero noise is a bitwise identity and positive noise perturbs") {
  for (auto style : {NormStyle::prenorm, NormStyle::postnorm}) {
    auto m = ModelF::build(small_config(style), 4);
    std::mt19937_64 rng(2);
    auto src = random_grid(rng, 3, 7, 11);
    NoGradGuard ng;
    auto clean = m.encode_views(src);
    NoiseSpec zero{0.0, 9};
    ForwardOptions o;
    o.noise = &zero;
    auto same = m.encode_views(src, o);
    CHECK(bitwise_equal(clean.primary, same.primary));
    CHECK(bitwise_equal(clean.auxiliary, same.auxiliary));
    NoiseSpec some{0.3, 9};
    o.noise = &some;
    auto noised = m.encode_views(src, o);
    CHECK_FALSE(bitwise_equal(clean.primary, noised.primary));
    auto again = m.encode_views(src, o);
    CHECK(bitwise_equal(noised.primary, again.primary));
  }
  NoiseSpec bad{-0.1, 1};
  CHECK_THROWS_AS(encoder_noise<float>(bad, "enc.top_ln", 4), InvalidArgument);
}

TEST_CASE("injected noise has the requested moments") {
  NoiseSpec spec{0.25, 17};
  auto e = encoder_noise<double>(spec, "enc.top_ln", 1000000);
  double m = 0.0, v = 0.0;
  for (double x : e) m += x;
  m /= static_cast<double>(e.size());
  for (double x : e) v += (x - m) * (x - m);
  const double sd = std::sqrt(v / static_cast<double>(e.size()));
  CHECK(std::abs(m) < 0.01 * 0.25);
  CHECK(std::abs(sd - 0.25) < 0.01 * 0.25);
}

TEST_CASE("decoder is causal") {
  auto m = ModelD::build(small_config(), 7);
  std::mt19937_64 rng(3);
  auto src = random_grid(rng, 1, 5, 11);
  auto tgt = random_grid(rng, 1, 6, 13, true);
  tgt = TokenGrid::from_rows({{kBosId, 5, 6, 7, 8, 9}});
  NoGradGuard ng;
  auto views = m.encode_views(src);
  auto base = m.decode_two_stream(views, tgt);
  for (std::size_t j = 1; j < 6; ++j) {
    auto changed = tgt;
    changed.ids[j] = changed.ids[j] == 4 ? 5 : 4;
    auto out = m.decode_two_stream(views, changed);
    const std::size_t V = 13;
    for (std::size_t pos = 0; pos < j; ++pos)
      for (std::size_t v = 0; v < V; ++v) {
        CHECK(out.primary.at(pos * V + v) == base.primary.at(pos * V + v));
        CHECK(out.auxiliary.at(pos * V + v) == base.auxiliary.at(pos * V + v));
      }
  }
}

TEST_CASE("streams are isolated") {
  auto m = ModelD::build(small_config(), 8);
  std::mt19937_64 rng(4);
  auto src = random_grid(rng, 2, 5, 11);
  auto tgt = random_grid(rng, 2, 5, 13, true);
  NoGradGuard ng;
  auto views = m.encode_views(src);
  auto base = m.decode_two_stream(views, tgt);
  auto zeroed = views;
  zeroed.auxiliary = TensorD::zeros(views.auxiliary.shape());
  auto out = m.decode_two_stream(zeroed, tgt);
  CHECK(bitwise_equal(out.primary, base.primary));
  CHECK_FALSE(bitwise_equal(out.auxiliary, base.auxiliary));
}

TEST_CASE("primary logits carry no gradient into auxiliary-only parameters") {
  for (auto style : {NormStyle::prenorm, NormStyle::postnorm}) {
    auto m = ModelD::build(small_config(style), 9);
    std::mt19937_64 rng(5);
    auto src = random_grid(rng, 2, 5, 11);
    auto tgt = random_grid(rng, 2, 5, 13, true);
    auto out = m.decode_two_stream(m.encode_views(src), tgt);
    backward(sum(out.primary));
    for (const auto& name : auxiliary_only(m.config())) {
      INFO(name);
      const auto& t = m.parameters().get(name);
      bool zero = true;
      for (double g : t.grad()) zero = zero && g == 0.0;
      CHECK(zero);
    }
    CHECK(m.parameters().get("dec.1.can.wq").has_grad());
  }
}

TEST_CASE("mirrored streams produce identical logits") {
  auto m = ModelD::build(small_config(), 10);
  for (auto& [name, t] : m.parameters()) {
    const auto pos = name.find(".can_aux.");
    const auto pos_ln = name.find(".can_ln_aux.");
    std::string src_name;
    if (pos != std::string::npos) src_name = name.substr(0, pos) + ".can." + name.substr(pos + 9);
    if (pos_ln != std::string::npos) src_name = name.substr(0, pos_ln) + ".can_ln." + name.substr(pos_ln + 12);
    if (src_name.empty()) continue;
    const auto from = m.parameters().get(src_name).data();
    std::copy(from.begin(), from.end(), t.mutable_data().begin());
  }
  std::mt19937_64 rng(6);
  auto src = random_grid(rng, 2, 5, 11);
  auto tgt = random_grid(rng, 2, 5, 13, true);
  NoGradGuard ng;
  auto views = m.encode_views(src);
  views.auxiliary = views.primary;
  auto out = m.decode_two_stream(views, tgt);
  CHECK(bitwise_equal(out.primary, out.auxiliary));
}

TEST_CASE("decode_single reproduces each stream of the two-stream decoder") {
  for (auto style : {NormStyle::prenorm, NormStyle::postnorm}) {
    auto m = ModelF::build(small_config(style), 11);
    std::mt19937_64 rng(7);
    auto src = random_grid(rng, 3, 6, 11);
    auto tgt = random_grid(rng, 3, 6, 13, true);
    NoGradGuard ng;
    auto views = m.encode_views(src);
    auto both = m.decode_two_stream(views, tgt);
    CHECK(bitwise_equal(m.decode_single(View::primary, views.primary, views.src_pad, tgt), both.primary));
    CHECK(bitwise_equal(m.decode_single(View::auxiliary, views.auxiliary, views.src_pad, tgt), both.auxiliary));
  }
}

TEST_CASE("scrambling auxiliary-only parameters leaves the primary stream unchanged") {
  auto m = ModelF::build(small_config(), 12);
  std::mt19937_64 rng(8);
  auto src = random_grid(rng, 3, 6, 11);
  auto tgt = random_grid(rng, 3, 6, 13, true);
  NoGradGuard ng;
  auto views = m.encode_views(src);
  auto before = m.decode_single(View::primary, views.primary, views.src_pad, tgt);
  std::normal_distribution<float> noise(0.0f, 3.0f);
  for (const auto& name : auxiliary_only(m.config()))
    for (auto& x : m.parameters().get(name).mutable_data()) x = noise(rng);
  auto views2 = m.encode_views(src);
  CHECK(bitwise_equal(views.primary, views2.primary));
  auto after = m.decode_single(View::primary, views2.primary, views2.src_pad, tgt);
  CHECK(bitwise_equal(before, after));
}

TEST_CASE("stripping keeps exactly one view") {
  for (auto style : {NormStyle::prenorm, NormStyle::postnorm}) {
    for (bool share : {false, true}) {
      auto cfg = small_config(style);
      cfg.share_can = share;
      auto m = ModelF::build(cfg, 13);
      auto pri = m.strip_to_view(View::primary);
      auto single_cfg = cfg;
      single_cfg.multi_view = false;
      CHECK(pri.parameter_count() == parameter_count(single_cfg));
      CHECK_FALSE(pri.config().multi_view);

      auto aux = m.strip_to_view(View::auxiliary);
      CHECK(aux.config().encoder_layers == cfg.aux_layer);
      CHECK_FALSE(aux.config().multi_view);

      std::mt19937_64 rng(9);
      for (int trial = 0; trial < 5; ++trial) {
        auto src = random_grid(rng, 2, 6, 11);
        auto tgt = random_grid(rng, 2, 6, 13, true);
        NoGradGuard ng;
        auto views = m.encode_views(src);
        auto full = m.decode_two_stream(views, tgt);
        auto pv = pri.encode_views(src);
        CHECK(bitwise_equal(pri.decode_single(View::primary, pv.primary, pv.src_pad, tgt), full.primary));
        auto av = aux.encode_views(src);
        CHECK(bitwise_equal(av.primary, views.auxiliary));
        CHECK(bitwise_equal(aux.decode_single(View::primary, av.primary, av.src_pad, tgt), full.auxiliary));
      }
    }
  }
  auto single_cfg = small_config();
  single_cfg.multi_view = false;
  CHECK_THROWS_AS(ModelF::build(single_cfg, 1).strip_to_view(View::auxiliary), ContractError);
}

TEST_CASE("appending source padding leaves logits unchanged") {
  auto m = ModelF::build(small_config(), 14);
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    auto src = random_grid(rng, 1, 6, 11);
    auto tgt = random_grid(rng, 1, 5, 13, true);
    auto padded = src;
    const std::size_t extra = 3;
    padded.cols += extra;
    padded.ids.resize(padded.cols, kPadId);
    padded.pad.resize(padded.cols, 1);
    NoGradGuard ng;
    auto a = m.decode_two_stream(m.encode_views(src), tgt);
    auto b = m.decode_two_stream(m.encode_views(padded), tgt);
    for (std::size_t i = 0; i < a.primary.numel(); ++i) {
      CHECK(std::abs(a.primary.at(i) - b.primary.at(i)) <= 1e-5f);
      CHECK(std::abs(a.auxiliary.at(i) - b.auxiliary.at(i)) <= 1e-5f);
    }
  }
}

TEST_CASE("both views come from a single encoder pass") {
  auto m = ModelF::build(small_config(), 15);
  std::mt19937_64 rng(11);
  auto src = random_grid(rng, 2, 5, 11);
  auto tgt = random_grid(rng, 2, 5, 13, true);
  auto out = m.decode_two_stream(m.encode_views(src), tgt);
  auto loss = add(sum(out.primary), sum(out.auxiliary));
  auto tape = Tape<float>::record(loss);
  CHECK(tape.count("encoder_layer") == static_cast<std::size_t>(m.config().encoder_layers));
}

TEST_CASE("out-of-vocabulary source ids are rejected") {
  auto m = ModelF::build(small_config(), 16);
  auto src = TokenGrid::from_rows({{5, 11}});
  CHECK_THROWS_AS(m.encode_views(src), IndexError);
}

TEST_CASE("parameter adoption checks names and shapes") {
  auto m = ModelF::build(small_config(), 17);
  ParameterSet<float> params;
  for (const auto& [name, t] : m.parameters()) params.add(name, t.clone(true));
  CHECK_NOTHROW(ModelF::from_parameters(small_config(), std::move(params)));
  auto other = small_config();
  other.d_ffn = 12;
  ParameterSet<float> again;
  for (const auto& [name, t] : m.parameters()) again.add(name, t.clone(true));
  CHECK_THROWS_AS(ModelF::from_parameters(other, std::move(again)), ConfigError);
}

TEST_CASE("model gradients match finite differences for both norm styles") {
  for (auto style : {NormStyle::prenorm, NormStyle::postnorm}) {
    auto cfg = small_config(style);
    cfg.encoder_layers = 2;
    cfg.aux_layer = 1;
    cfg.decoder_layers = 1;
    cfg.d_model = 4;
    cfg.d_ffn = 6;
    cfg.src_vocab = 7;
    cfg.tgt_vocab = 7;
    auto m = ModelD::build(cfg, 18);
    std::mt19937_64 rng(12);
    auto src = random_grid(rng, 2, 4, 7);
    auto tgt = random_grid(rng, 2, 3, 7, true);
    std::vector<TensorD> inputs;
    for (const auto& [name, t] : m.parameters()) inputs.push_back(t);
    auto r = mvnmt::testing::gradcheck(to_string(style), inputs, [&] {
      auto out = m.decode_two_stream(m.encode_views(src), tgt);
      return add(mvnmt::testing::probe(out.primary, 1), mvnmt::testing::probe(out.auxiliary, 2));
    });
    INFO(r.label);
    CHECK(r.rel_error < 1e-4);
  }
}
