// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "doctest.h"
#include "json.hpp"
#include "mvnmt/error.hpp"
#include "mvnmt/training.hpp"
#include "support/tempdir.hpp"

using namespace mvnmt;
using mvnmt::testing::TempDir;

namespace {

ModelConfig small_config(bool multi_view = true) {
  ModelConfig c;
  c.encoder_layers = 2;
  c.aux_layer = 1;
  c.decoder_layers = 1;
  c.d_model = 16;
  c.d_ffn = 32;
  c.heads = 2;
  c.src_vocab = c.tgt_vocab = 12;
  c.multi_view = multi_view;
  return c;
}

TrainConfig quick_train(int updates) {
  TrainConfig t;
  t.max_updates = updates;
  t.warmup_steps = 20;
  t.base_lr = 3e-3;
  t.batch_tokens = 160;
  t.seed = 11;
  return t;
}

bool same_bits(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

std::vector<StepStats> run(ModelF& model, const ParallelCorpus& corpus, const TrainConfig& t,
                           const LossConfig& l) {
  Trainer trainer(model, corpus, t, l);
  return trainer.run();
}

}  // namespace

TEST_CASE("lr_at examples") {
  CHECK(lr_at(4000, 7e-4, 4000) == doctest::Approx(7e-4).epsilon(1e-15));
  CHECK(lr_at(2000, 7e-4, 4000) == doctest::Approx(3.5e-4).epsilon(1e-15));
  CHECK(lr_at(16000, 7e-4, 4000) == doctest::Approx(3.5e-4).epsilon(1e-15));
  CHECK_THROWS_AS(lr_at(0, 7e-4, 4000), ContractError);
  // Continuous at the end of warm-up.
  CHECK(std::abs(lr_at(4001, 1.0, 4000) - lr_at(4000, 1.0, 4000)) < 3e-4);
  CHECK(std::abs(lr_at(3999, 1.0, 4000) - lr_at(4000, 1.0, 4000)) < 3e-4);
}

TEST_CASE("adam matches the closed-form update on a scalar quadratic") {
  const double a = 3.0, w0 = 1.25, lr = 0.01;
  TrainConfig cfg;
  ParameterSet<double> params;
  params.add("w", TensorD::from({1}, {w0}, true));
  auto state = AdamState<double>::init(params);
  auto grad_step = [&] {
    params.zero_grad();
    auto& w = params.get("w");
    backward(scale(mul(w, w), a / 2.0));
    adam_update(params, state, lr, cfg);
  };
  // Step 1: m_hat = g, v_hat = g^2.
  grad_step();
  const double g1 = a * w0;
  const double w1 = w0 - lr * g1 / (std::abs(g1) + cfg.adam_eps);
  CHECK(std::abs(params.get("w").item() - w1) < 1e-10);
  // Step 2 from the recurrences written out.
  grad_step();
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2, g2 = a * w1;
  const double m2 = b1 * (1 - b1) * g1 + (1 - b1) * g2;
  const double v2 = b2 * (1 - b2) * g1 * g1 + (1 - b2) * g2 * g2;
  const double w2 = w1 - lr * (m2 / (1 - b1 * b1)) / (std::sqrt(v2 / (1 - b2 * b2)) + cfg.adam_eps);
  CHECK(std::abs(params.get("w").item() - w2) < 1e-10);
  CHECK(state.step == 2);
}

TEST_CASE("parameters without gradients are left untouched") {
  ParameterSet<double> params;
  params.add("a", TensorD::from({2}, {1.0, 2.0}, true));
  params.add("b", TensorD::from({2}, {3.0, 4.0}, true));
  auto state = AdamState<double>::init(params);
  backward(sum(params.get("a")));
  adam_update(params, state, 0.1, TrainConfig{});
  CHECK(params.get("b").data()[0] == 3.0);
  CHECK(params.get("b").data()[1] == 4.0);
  CHECK(state.m[1][0] == 0.0);
  CHECK(params.get("a").data()[0] != 1.0);
}

TEST_CASE("train config validation") {
  TrainConfig t;
  t.warmup_steps = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.batch_tokens = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.adam_beta2 = 1.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("two runs with the same seed produce identical losses") {
  const auto corpus = gen_toy_corpus(ToyTask::copy, 12, 3, 8, 200, 5);
  auto a = ModelF::build(small_config(), 3);
  auto b = ModelF::build(small_config(), 3);
  const auto ha = run(a, corpus, quick_train(15), LossConfig{});
  const auto hb = run(b, corpus, quick_train(15), LossConfig{});
  REQUIRE(ha.size() == 15);
  for (std::size_t i = 0; i < ha.size(); ++i) {
    CHECK(ha[i].loss.nll_pri == hb[i].loss.nll_pri);
    CHECK(ha[i].loss.nll_aux == hb[i].loss.nll_aux);
    CHECK(ha[i].loss.cr == hb[i].loss.cr);
    CHECK(ha[i].loss.total == hb[i].loss.total);
  }
  for (const auto& [name, t] : a.parameters()) CHECK(same_bits(t.data(), b.parameters().get(name).data()));
}

TEST_CASE("primary-only training of a multi-view model tracks a single-view model") {
  const auto corpus = gen_toy_corpus(ToyTask::reverse, 12, 3, 8, 200, 6);
  auto mv = ModelF::build(small_config(true), 4);
  auto sv = ModelF::build(small_config(false), 4);
  LossConfig off;
  off.alpha = 0.0;
  off.multi_view = false;
  const auto hm = run(mv, corpus, quick_train(20), off);
  const auto hs = run(sv, corpus, quick_train(20), off);
  for (std::size_t i = 0; i < hm.size(); ++i) CHECK(hm[i].loss.nll_pri == hs[i].loss.nll_pri);
  for (const auto& [name, t] : sv.parameters()) CHECK(same_bits(t.data(), mv.parameters().get(name).data()));
}

TEST_CASE("alpha = 0 reproduces joint-NLL-only training bitwise") {
  const auto corpus = gen_toy_corpus(ToyTask::copy, 12, 3, 8, 200, 7);
  auto a = ModelF::build(small_config(), 9);
  auto b = ModelF::build(small_config(), 9);
  LossConfig zero;
  zero.alpha = 0.0;
  LossConfig nll_only;
  nll_only.consistency = false;
  const auto ha = run(a, corpus, quick_train(15), zero);
  const auto hb = run(b, corpus, quick_train(15), nll_only);
  for (std::size_t i = 0; i < ha.size(); ++i) {
    CHECK(ha[i].loss.total == hb[i].loss.total);
    CHECK(ha[i].loss.total == ha[i].loss.nll_joint);
  }
  for (const auto& [name, t] : a.parameters()) CHECK(same_bits(t.data(), b.parameters().get(name).data()));
}

TEST_CASE("joint NLL decreases over 10-step windows on the copy task") {
  const auto corpus = gen_toy_corpus(ToyTask::copy, 12, 3, 8, 1000, 8);
  ModelConfig cfg = small_config();
  cfg.d_model = 32;
  cfg.d_ffn = 64;
  cfg.heads = 4;
  auto model = ModelF::build(cfg, 1);
  TrainConfig t = quick_train(200);
  t.base_lr = 2e-3;
  t.warmup_steps = 50;
  t.batch_tokens = 800;
  const auto h = run(model, corpus, t, LossConfig{});
  REQUIRE(h.size() == 200);
  std::vector<double> windows;
  for (std::size_t w = 0; w < 20; ++w) {
    double s = 0.0;
    for (std::size_t i = 0; i < 10; ++i) s += h[w * 10 + i].loss.nll_joint;
    windows.push_back(s / 10.0);
  }
  for (std::size_t w = 1; w < windows.size(); ++w) {
    INFO("window " << w << ": " << windows[w - 1] << " -> " << windows[w]);
    CHECK(windows[w] < windows[w - 1]);
  }
}

TEST_CASE("non-finite losses abort with diagnostics") {
  const auto corpus = gen_toy_corpus(ToyTask::copy, 12, 3, 5, 20, 1);
  auto model = ModelF::build(small_config(), 2);
  model.parameters().get(model.parameters().begin()->first).mutable_data()[0] = std::nanf("");
  auto batch = make_batch(corpus, {0, 1, 2});
  auto state = AdamState<float>::init(model.parameters());
  try {
    train_step(model, std::span<const Batch>(&batch, 1), LossConfig{}, TrainConfig{}, state);
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip is bitwise") {
  TempDir dir;
  const auto corpus = gen_toy_corpus(ToyTask::copy, 12, 3, 6, 100, 2);
  auto model = ModelF::build(small_config(), 5);
  Trainer trainer(model, corpus, quick_train(3), LossConfig{});
  trainer.run();
  const auto vocab = Vocabulary::synthetic(12);
  const auto path = dir.path() / "m.ckpt";
  save_checkpoint(path, model, &trainer.optimizer(), 3, TrainCursor{11, 0, 3}, &vocab);
  const auto ck = load_checkpoint(path);
  CHECK(ck.config == model.config());
  CHECK(ck.step == 3);
  CHECK(ck.cursor.batch == 3);
  REQUIRE(ck.vocab.has_value());
  CHECK(*ck.vocab == vocab);
  REQUIRE(ck.params.size() == model.parameters().size());
  for (const auto& [name, t] : model.parameters()) CHECK(same_bits(t.data(), ck.params.get(name).data()));
  REQUIRE(ck.optimizer.has_value());
  CHECK(ck.optimizer->step == trainer.optimizer().step);
  for (std::size_t i = 0; i < ck.optimizer->m.size(); ++i) {
    CHECK(same_bits(ck.optimizer->m[i], trainer.optimizer().m[i]));
    CHECK(same_bits(ck.optimizer->v[i], trainer.optimizer().v[i]));
  }
  auto restored = ck.model();
  const auto batch = make_batch(corpus, {0, 1});
  const auto va = model.encode_views(batch.src);
  const auto vb = restored.encode_views(batch.src);
  CHECK(same_bits(va.primary.data(), vb.primary.data()));
}

TEST_CASE("checkpoint guards") {
  TempDir dir;
  auto model = ModelF::build(small_config(), 5);
  const auto path = dir.path() / "m.ckpt";
  save_checkpoint(path, model, nullptr, 0, {});
  const std::string bytes = slurp(path);

  SUBCASE("config mismatch") {
    ModelConfig other = small_config();
    other.d_ffn = 48;
    try {
      load_checkpoint(path, &other);
      FAIL("expected a config mismatch");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("config mismatch") != std::string::npos);
      CHECK(std::string(e.what()).find("d_ffn") != std::string::npos);
    }
  }
  SUBCASE("truncated by one byte") {
    spit(path, bytes.substr(0, bytes.size() - 1));
    CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);
  }
  SUBCASE("flipped payload byte") {
    std::string damaged = bytes;
    damaged[damaged.size() - 3] ^= 0x40;
    spit(path, damaged);
    CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);
  }
  SUBCASE("foreign version") {
    std::string other = bytes;
    const auto at = other.find("\"format_version\":1");
    REQUIRE(at != std::string::npos);
    other[at + std::strlen("\"format_version\":")] = '7';
    spit(path, other);
    try {
      load_checkpoint(path);
      FAIL("expected a version error");
    } catch (const IntegrityError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
  }
  SUBCASE("not a checkpoint") {
    spit(path, "hello\n");
    CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);
  }
}

namespace {

/// Reads the parameter arrays of a checkpoint straight from its bytes.
std::map<std::string, std::vector<float>> raw_params(const std::filesystem::path& p) {
  const std::string file = slurp(p);
  const auto l1 = file.find('\n');
  const auto l2 = file.find('\n', l1 + 1);
  const std::size_t len = std::stoul(file.substr(l1 + 1, l2 - l1 - 1));
  const auto meta = nlohmann::json::parse(file.substr(l2 + 1, len));
  const std::size_t base = l2 + 1 + len;
  std::map<std::string, std::vector<float>> out;
  for (const auto& a : meta["arrays"]) {
    if (a["group"] != "param") continue;
    std::vector<float> v(a["bytes"].get<std::size_t>() / sizeof(float));
    std::memcpy(v.data(), file.data() + base + a["offset"].get<std::size_t>(), v.size() * sizeof(float));
    out[a["name"].get<std::string>()] = std::move(v);
  }
  return out;
}

}  // namespace

TEST_CASE("checkpoint averaging") {
  TempDir dir;
  const auto cfg = small_config();
  SUBCASE("single checkpoint is the identity") {
    auto m = ModelF::build(cfg, 1);
    save_checkpoint(dir.path() / "a.ckpt", m, nullptr, 4, {});
    const auto avg = average_checkpoints({dir.path() / "a.ckpt"});
    for (const auto& [name, t] : m.parameters()) CHECK(same_bits(t.data(), avg.params.get(name).data()));
    CHECK_FALSE(avg.optimizer.has_value());
  }
  SUBCASE("opposite checkpoints cancel") {
    auto m = ModelF::build(cfg, 1);
    auto neg = m.clone();
    for (auto& [_, t] : neg.parameters())
      for (auto& x : t.mutable_data()) x = -x;
    save_checkpoint(dir.path() / "a.ckpt", m, nullptr, 1, {});
    save_checkpoint(dir.path() / "b.ckpt", neg, nullptr, 2, {});
    const auto avg = average_checkpoints({dir.path() / "a.ckpt", dir.path() / "b.ckpt"});
    for (const auto& [_, t] : avg.params)
      for (float x : t.data()) CHECK(x == 0.0f);
  }
  SUBCASE("mean of five matches an external mean") {
    std::vector<std::filesystem::path> paths;
    for (int s = 0; s < 5; ++s) {
      auto m = ModelF::build(cfg, 100 + s);
      paths.push_back(dir.path() / ("c" + std::to_string(s) + ".ckpt"));
      save_checkpoint(paths.back(), m, nullptr, s, {});
    }
    std::map<std::string, std::vector<long double>> sums;
    for (const auto& p : paths)
      for (const auto& [name, v] : raw_params(p)) {
        auto& acc = sums[name];
        acc.resize(v.size(), 0.0L);
        for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
      }
    const auto avg = average_checkpoints(paths);
    CHECK(avg.step == 4);
    double worst = 0.0;
    for (const auto& [name, acc] : sums) {
      const auto d = avg.params.get(name).data();
      for (std::size_t i = 0; i < acc.size(); ++i)
        worst = std::max(worst, static_cast<double>(std::abs(static_cast<long double>(d[i]) - acc[i] / 5.0L)));
    }
    CHECK(worst < 1e-7);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(average_checkpoints({}), InvalidArgument);
    auto a = ModelF::build(cfg, 1);
    auto other_cfg = cfg;
    other_cfg.heads = 4;
    auto b = ModelF::build(other_cfg, 1);
    save_checkpoint(dir.path() / "a.ckpt", a, nullptr, 0, {});
    save_checkpoint(dir.path() / "b.ckpt", b, nullptr, 0, {});
    CHECK_THROWS_AS(average_checkpoints({dir.path() / "a.ckpt", dir.path() / "b.ckpt"}), ConfigError);
  }
}

TEST_CASE("trainer keeps the last k checkpoints and logs every step") {
  TempDir dir;
  const auto corpus = gen_toy_corpus(ToyTask::copy, 12, 3, 6, 100, 2);
  auto model = ModelF::build(small_config(), 5);
  TrainConfig t = quick_train(7);
  t.checkpoint_every = 2;
  t.keep_last_k = 2;
  TrainerOutput out{dir.path() / "ckpt", dir.path() / "loss.csv", nullptr};
  Trainer trainer(model, corpus, t, LossConfig{}, out);
  trainer.run();
  CHECK_FALSE(std::filesystem::exists(out.dir / "checkpoint_2.ckpt"));
  CHECK(std::filesystem::exists(out.dir / "checkpoint_4.ckpt"));
  CHECK(std::filesystem::exists(out.dir / "checkpoint_6.ckpt"));
  CHECK(std::filesystem::exists(out.dir / "last.ckpt"));
  CHECK(trainer.checkpoints().size() == 2);
  CHECK(load_checkpoint(out.dir / "last.ckpt").step == 7);

  std::ifstream log(out.loss_log);
  std::string line;
  std::getline(log, line);
  CHECK(line == "step,lr,nll_pri,nll_aux,cr,total");
  int rows = 0;
  while (std::getline(log, line)) ++rows;
  CHECK(rows == 7);
}

TEST_CASE("trainer stops early when the callback asks") {
  const auto corpus = gen_toy_corpus(ToyTask::copy, 12, 3, 6, 100, 2);
  auto model = ModelF::build(small_config(), 5);
  Trainer trainer(model, corpus, quick_train(50), LossConfig{});
  const auto h = trainer.run([](const StepStats& s) { return s.step < 4; });
  CHECK(h.size() == 4);
}
