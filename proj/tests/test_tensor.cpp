// SPDX-License-Identifier: Apache-2.0
#include <array>
#include <cmath>
#include <random>

#include "doctest.h"
#include "mvnmt/ops.hpp"
#include "support/gradcheck.hpp"

using namespace mvnmt;
using mvnmt::testing::random_tensor;

namespace {

TensorD vec(std::vector<double> v, bool grad = false) {
  const std::size_t n = v.size();
  return TensorD::from({n}, std::move(v), grad);
}

TensorD rows(std::size_t r, std::size_t c, std::vector<double> v, bool grad = false) {
  return TensorD::from({r, c}, std::move(v), grad);
}

}  // namespace

TEST_CASE("softmax_with_temperature examples") {
  auto uniform = softmax(vec({0, 0, 0, 0}), 1.0);
  for (double p : uniform.data()) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));

  // 1/(1+e), e/(1+e) evaluated at 30 digits.
  auto two = softmax(vec({1, 2}), 1.0);
  CHECK(two.at(0) == doctest::Approx(0.268941421369995).epsilon(1e-12));
  CHECK(two.at(1) == doctest::Approx(0.731058578630005).epsilon(1e-12));

  auto hot = softmax(vec({1, 2}), 1e6);
  CHECK(hot.at(0) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(hot.at(1) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("softmax rejects invalid input") {
  CHECK_THROWS_AS(softmax(vec({1, 2}), 0.0), InvalidArgument);
  CHECK_THROWS_AS(softmax(vec({1, 2}), -1.0), InvalidArgument);
  CHECK_THROWS_AS(softmax(vec({1, std::nan("")}), 1.0), InvalidArgument);
  CHECK_THROWS_AS(softmax(vec({1, INFINITY}), 1.0), InvalidArgument);
}

TEST_CASE("softmax rows sum to one for extreme finite logits") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto z = random_tensor(rng, {4, 17}, -500.0, 500.0, false);
    for (double tau : {0.1, 1.0, 3.0}) {
      auto pf = softmax(TensorF::from(z.shape(), std::vector<float>(z.data().begin(), z.data().end())), tau);
      for (std::size_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (std::size_t v = 0; v < 17; ++v) s += pf.at(r * 17 + v);
        CHECK(std::abs(s - 1.0) <= 1e-6);
      }
    }
  }
}

TEST_CASE("layer_norm_affine examples") {
  auto ones = vec({1, 1, 1});
  auto zeros = vec({0, 0, 0});
  auto constant = layer_norm(vec({4, 4, 4}), LayerNormParams<double>{ones, zeros, 1e-5});
  for (double v : constant.data()) CHECK(v == 0.0);

  // mean 2, population variance 2/3 -> +-sqrt(3/2)
  auto y = layer_norm(vec({1, 2, 3}), LayerNormParams<double>{ones, zeros, 1e-12});
  CHECK(y.at(0) == doctest::Approx(-1.224744871391589).epsilon(1e-9));
  CHECK(y.at(1) == doctest::Approx(0.0));
  CHECK(y.at(2) == doctest::Approx(1.224744871391589).epsilon(1e-9));

  auto b = vec({0.5, -2, 7});
  auto annihilated = layer_norm(vec({3, -1, 8}), LayerNormParams<double>{vec({0, 0, 0}), b, 1e-5});
  for (std::size_t i = 0; i < 3; ++i) CHECK(annihilated.at(i) == b.at(i));

  CHECK_THROWS_AS(layer_norm(vec({1, 2}), LayerNormParams<double>{ones, zeros, 1e-5}), ShapeError);
}

TEST_CASE("layer_norm output is standardised") {
  std::mt19937_64 rng(11);
  auto x = random_tensor(rng, {6, 16}, -10.0, 10.0, false);
  auto y = layer_norm(x, LayerNormParams<double>{TensorD::from({16}, std::vector<double>(16, 1.0)),
                                                 TensorD::zeros({16}), 1e-12});
  for (std::size_t r = 0; r < 6; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < 16; ++i) m += y.at(r * 16 + i);
    m /= 16;
    for (std::size_t i = 0; i < 16; ++i) v += (y.at(r * 16 + i) - m) * (y.at(r * 16 + i) - m);
    v /= 16;
    CHECK(std::abs(m) < 1e-9);
    CHECK(std::abs(v - 1.0) < 1e-5);
  }
}

TEST_CASE("kl_divergence_rows examples") {
  auto p = rows(1, 2, {0.9, 0.1});
  CHECK(kl_divergence_rows(p, p).item() == 0.0);
  // 0.9 ln 1.8 + 0.1 ln 0.2
  CHECK(kl_divergence_rows(p, rows(1, 2, {0.5, 0.5})).item() ==
        doctest::Approx(0.368064207168497).epsilon(1e-12));
  CHECK(kl_divergence_rows(rows(1, 2, {1.0, 0.0}), rows(1, 2, {0.5, 0.5})).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(kl_divergence_rows(rows(1, 2, {0.9, 0.2}), rows(1, 2, {0.5, 0.5})), InvalidDistribution);
  CHECK_THROWS_AS(kl_divergence_rows(rows(1, 2, {0.5, 0.5}), rows(1, 3, {0.2, 0.3, 0.5})), ShapeError);
}

TEST_CASE("kl_divergence_rows is non-negative and zero on identical rows") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    auto p = mvnmt::testing::random_distribution(rng, 3, 7, false);
    auto q = mvnmt::testing::random_distribution(rng, 3, 7, false);
    auto kl = kl_divergence_rows(p, q);
    for (double v : kl.data()) CHECK(v >= -1e-9);
    auto self = kl_divergence_rows(p, p);
    for (double v : self.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("kl_divergence_rows differentiates both arguments") {
  auto p = rows(1, 3, {0.6, 0.3, 0.1}, true);
  auto q = rows(1, 3, {0.2, 0.5, 0.3}, true);
  backward(sum(kl_divergence_rows(p, q)));
  REQUIRE(p.has_grad());
  REQUIRE(q.has_grad());
  CHECK(q.grad()[0] == doctest::Approx(-0.6 / 0.2));
  CHECK(p.grad()[0] == doctest::Approx(std::log(0.6 / 0.2) + 1.0));
}

TEST_CASE("label_smoothed_nll examples") {
  auto lp = rows(1, 3, {-0.5, -2.0, -3.0});
  std::array<int, 1> gold{1};
  CHECK(label_smoothed_nll(lp, std::span<const int>(gold), 0.0).item() == 2.0);

  auto uniform = log_softmax(rows(1, 4, {0, 0, 0, 0}));
  for (int g = 0; g < 4; ++g) {
    std::array<int, 1> gg{g};
    CHECK(label_smoothed_nll(uniform, std::span<const int>(gg), 0.1).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }

  auto p = rows(1, 4, {std::log(0.7), std::log(0.1), std::log(0.1), std::log(0.1)});
  std::array<int, 1> zero{0};
  // -(0.9 ln 0.7 + (0.1/3) * 3 ln 0.1)
  CHECK(label_smoothed_nll(p, std::span<const int>(zero), 0.1).item() ==
        doctest::Approx(0.551265958844264).epsilon(1e-12));

  std::array<int, 1> bad{4};
  CHECK_THROWS_AS(label_smoothed_nll(p, std::span<const int>(bad), 0.1), IndexError);
}

TEST_CASE("detach blocks gradients") {
  auto a = vec({1.5, -2.0, 3.0}, true);
  auto b = vec({0.5, 4.0, -1.0}, true);
  backward(sum(mul(detach(a), b)));
  CHECK_FALSE(a.has_grad());
  REQUIRE(b.has_grad());
  for (std::size_t i = 0; i < 3; ++i) CHECK(b.grad()[i] == a.at(i));

  auto dd = detach(detach(a));
  CHECK_FALSE(dd.requires_grad());
  for (std::size_t i = 0; i < 3; ++i) CHECK(dd.at(i) == a.at(i));
}

TEST_CASE("backward basics") {
  auto w = vec({1, 2}, true);
  backward(sum(mul(w, w)));
  CHECK(w.grad()[0] == 2.0);
  CHECK(w.grad()[1] == 4.0);

  auto used = vec({1, 2}, true);
  auto unused = vec({3, 4}, true);
  backward(sum(used));
  CHECK_FALSE(unused.has_grad());

  CHECK_THROWS_AS(backward(mul(used, used)), ContractError);
}

TEST_CASE("tape is in reverse topological order") {
  std::mt19937_64 rng(1);
  auto x = random_tensor(rng, {2, 3});
  auto w = random_tensor(rng, {3, 3});
  auto h = relu(matmul(x, w));
  auto loss = sum(add(softmax(h), matmul(h, w)));
  auto tape = Tape<double>::record(loss);
  REQUIRE(!tape.order.empty());
  CHECK(tape.order.front() == loss.node());
  std::unordered_map<const Node<double>*, std::size_t> position;
  for (std::size_t i = 0; i < tape.order.size(); ++i) position[tape.order[i]] = i;
  for (const auto* n : tape.order)
    for (const auto& in : n->inputs)
      if (in->requires_grad) CHECK(position.at(in.get()) > position.at(n));
}

TEST_CASE("no-grad mode records nothing") {
  auto w = vec({1, 2}, true);
  NoGradGuard guard;
  auto y = mul(w, w);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("dropout is deterministic per seed and inverted") {
  auto x = TensorD::from({1000}, std::vector<double>(1000, 1.0));
  auto a = dropout(x, 0.25, 42);
  auto b = dropout(x, 0.25, 42);
  auto c = dropout(x, 0.25, 43);
  bool differs = false;
  double total = 0.0;
  for (std::size_t i = 0; i < 1000; ++i) {
    CHECK(a.at(i) == b.at(i));
    differs = differs || a.at(i) != c.at(i);
    CHECK((a.at(i) == 0.0 || a.at(i) == doctest::Approx(1.0 / 0.75)));
    total += a.at(i);
  }
  CHECK(differs);
  CHECK(total / 1000.0 == doctest::Approx(1.0).epsilon(0.1));
  CHECK(dropout(x, 0.0, 1).node() == x.node());
}

TEST_CASE("matmul rows do not depend on batch composition") {
  std::mt19937_64 rng(9);
  auto a = random_tensor(rng, {7, 13}, -1, 1, false);
  auto w = random_tensor(rng, {13, 5}, -1, 1, false);
  auto all = matmul(TensorF::from(a.shape(), std::vector<float>(a.data().begin(), a.data().end())),
                    TensorF::from(w.shape(), std::vector<float>(w.data().begin(), w.data().end())));
  for (std::size_t r = 0; r < 7; ++r) {
    std::vector<float> row(a.data().begin() + r * 13, a.data().begin() + (r + 1) * 13);
    auto one = matmul(TensorF::from({1, 13}, row),
                      TensorF::from(w.shape(), std::vector<float>(w.data().begin(), w.data().end())));
    for (std::size_t j = 0; j < 5; ++j) CHECK(one.at(j) == all.at(r * 5 + j));
  }
}

TEST_CASE("every differentiable op matches central finite differences") {
  for (const auto& r : mvnmt::testing::op_gradient_suite()) {
    INFO(r.label);
    CHECK(r.numeric_norm > 0.0);
    CHECK(r.rel_error < 1e-4);
  }
}
