// SPDX-License-Identifier: Apache-2.0
#include "mvnmt/ops.hpp"

#include <cmath>
#include <limits>

#include "mvnmt/rng.hpp"

namespace mvnmt {
namespace {

// C[n, m] (+)= A[n, k] * B[k, m]. Each output element is accumulated in
// increasing k order, so a row's result does not depend on how many rows
// are processed together.
template <typename Real>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const Real* __restrict A, const Real* __restrict B,
             Real* __restrict C) {
  for (std::size_t i = 0; i < n; ++i) {
    Real* crow = C + i * m;
    const Real* arow = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real a = arow[p];
      const Real* brow = B + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += a * brow[j];
    }
  }
}

// C[k, m] += A[n, k]^T * B[n, m]
template <typename Real>
void gemm_tn(std::size_t n, std::size_t k, std::size_t m, const Real* __restrict A, const Real* __restrict B,
             Real* __restrict C) {
  for (std::size_t i = 0; i < n; ++i) {
    const Real* arow = A + i * k;
    const Real* brow = B + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const Real a = arow[p];
      Real* crow = C + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += a * brow[j];
    }
  }
}

template <typename Real>
std::vector<Real> transposed(const Real* src, std::size_t rows, std::size_t cols) {
  std::vector<Real> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

template <typename Real>
void accumulate_into(Node<Real>& n, const std::vector<Real>& g) {
  if (!n.requires_grad) return;
  auto& buf = n.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

std::size_t last_dim(const Shape& s) {
  if (s.empty()) throw ShapeError("operation needs at least one dimension");
  return s.back();
}

}  // namespace

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b, bool transpose_b) {
  if (b.rank() != 2) throw ShapeError("matmul: right operand must be 2-D, got " + shape_str(b.shape()));
  const std::size_t k = last_dim(a.shape());
  const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t m = transpose_b ? b.dim(0) : b.dim(1);
  if (k != bk) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.numel() / k;
  std::vector<Real> out(n * m, Real(0));
  if (transpose_b) {
    auto bt = transposed(b.data().data(), m, k);
    gemm_nn(n, k, m, a.data().data(), bt.data(), out.data());
  } else {
    gemm_nn(n, k, m, a.data().data(), b.data().data(), out.data());
  }
  Shape shape = a.shape();
  shape.back() = m;
  return make_result<Real>("matmul", std::move(shape), std::move(out), {a, b},
                           [n, k, m, transpose_b](Node<Real>& self) {
    Node<Real>& A = *self.inputs[0];
    Node<Real>& B = *self.inputs[1];
    const Real* dC = self.grad.data();
    if (A.requires_grad) {
      auto& dA = A.grad_buffer();
      if (transpose_b) {
        gemm_nn(n, m, k, dC, B.value.data(), dA.data());
      } else {
        auto bt = transposed(B.value.data(), k, m);
        gemm_nn(n, m, k, dC, bt.data(), dA.data());
      }
    }
    if (B.requires_grad) {
      auto& dB = B.grad_buffer();
      if (transpose_b) {
        gemm_tn(n, m, k, dC, A.value.data(), dB.data());
      } else {
        gemm_tn(n, k, m, A.value.data(), dC, dB.data());
      }
    }
  });
}

template <typename Real>
Tensor<Real> bmm(const Tensor<Real>& a, const Tensor<Real>& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw ShapeError("bmm: expected [G,n,k] x [G,k,m], got " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t G = a.dim(0), n = a.dim(1), k = a.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  const std::size_t m = transpose_b ? b.dim(1) : b.dim(2);
  if (bk != k) throw ShapeError("bmm: inner dimensions differ");
  std::vector<Real> out(G * n * m, Real(0));
  for (std::size_t g = 0; g < G; ++g) {
    const Real* A = a.data().data() + g * n * k;
    const Real* B = b.data().data() + g * k * m;
    Real* C = out.data() + g * n * m;
    if (transpose_b) {
      auto bt = transposed(B, m, k);
      gemm_nn(n, k, m, A, bt.data(), C);
    } else {
      gemm_nn(n, k, m, A, B, C);
    }
  }
  return make_result<Real>("bmm", Shape{G, n, m}, std::move(out), {a, b},
                           [G, n, k, m, transpose_b](Node<Real>& self) {
    Node<Real>& An = *self.inputs[0];
    Node<Real>& Bn = *self.inputs[1];
    for (std::size_t g = 0; g < G; ++g) {
      const Real* dC = self.grad.data() + g * n * m;
      const Real* A = An.value.data() + g * n * k;
      const Real* B = Bn.value.data() + g * k * m;
      if (An.requires_grad) {
        Real* dA = An.grad_buffer().data() + g * n * k;
        if (transpose_b) {
          gemm_nn(n, m, k, dC, B, dA);
        } else {
          auto bt = transposed(B, k, m);
          gemm_nn(n, m, k, dC, bt.data(), dA);
        }
      }
      if (Bn.requires_grad) {
        Real* dB = Bn.grad_buffer().data() + g * k * m;
        if (transpose_b) {
          gemm_tn(n, m, k, dC, A, dB);
        } else {
          gemm_tn(n, k, m, A, dC, dB);
        }
      }
    }
  });
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2");
  const std::size_t r = a.dim(-2), c = a.dim(-1);
  const std::size_t G = a.numel() / (r * c);
  std::vector<Real> out(a.numel());
  for (std::size_t g = 0; g < G; ++g) {
    auto t = transposed(a.data().data() + g * r * c, r, c);
    std::copy(t.begin(), t.end(), out.begin() + static_cast<std::ptrdiff_t>(g * r * c));
  }
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return make_result<Real>("transpose", std::move(shape), std::move(out), {a},
                           [G, r, c](Node<Real>& self) {
    auto& dA = self.inputs[0]->grad_buffer();
    for (std::size_t g = 0; g < G; ++g) {
      auto t = transposed(self.grad.data() + g * r * c, c, r);
      for (std::size_t i = 0; i < r * c; ++i) dA[g * r * c + i] += t[i];
    }
  });
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<Real> out(a.data().begin(), a.data().end());
  return make_result<Real>("reshape", std::move(shape), std::move(out), {a},
                           [](Node<Real>& self) { accumulate_into(*self.inputs[0], self.grad); });
}

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
    throw ShapeError("add: " + shape_str(bs) + " does not broadcast onto " + shape_str(as));
  }
  const std::size_t inner = b.numel();
  const std::size_t outer = a.numel() / inner;
  std::vector<Real> out(a.numel());
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = pa[o * inner + i] + pb[i];
  return make_result<Real>("add", as, std::move(out), {a, b}, [outer, inner](Node<Real>& self) {
    accumulate_into(*self.inputs[0], self.grad);
    Node<Real>& B = *self.inputs[1];
    if (B.requires_grad) {
      auto& dB = B.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) dB[i] += self.grad[o * inner + i];
    }
  });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<Real>("mul", a.shape(), std::move(out), {a, b}, [](Node<Real>& self) {
    Node<Real>& A = *self.inputs[0];
    Node<Real>& B = *self.inputs[1];
    if (A.requires_grad) {
      auto& d = A.grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * B.value[i];
    }
    if (B.requires_grad) {
      auto& d = B.grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * A.value[i];
    }
  });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, double factor) {
  const Real f = static_cast<Real>(factor);
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * f;
  return make_result<Real>("scale", a.shape(), std::move(out), {a}, [f](Node<Real>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * f;
  });
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > Real(0) ? a.data()[i] : Real(0);
  return make_result<Real>("relu", a.shape(), std::move(out), {a}, [](Node<Real>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i)
      if (self.value[i] > Real(0)) d[i] += self.grad[i];
  });
}

template <typename Real>
Tensor<Real> split_heads(const Tensor<Real>& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.dim(2) % heads != 0) {
    throw ShapeError("split_heads: expected [B,T,H*dh], got " + shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2), dh = D / heads;
  std::vector<Real> out(x.numel());
  const Real* src = x.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(src + (b * T + t) * D + h * dh, dh, out.data() + ((b * heads + h) * T + t) * dh);
  return make_result<Real>("split_heads", Shape{B * heads, T, dh}, std::move(out), {x},
                           [B, T, D, dh, heads](Node<Real>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t h = 0; h < heads; ++h) {
          const Real* g = self.grad.data() + ((b * heads + h) * T + t) * dh;
          Real* dst = d.data() + (b * T + t) * D + h * dh;
          for (std::size_t e = 0; e < dh; ++e) dst[e] += g[e];
        }
  });
}

template <typename Real>
Tensor<Real> merge_heads(const Tensor<Real>& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.dim(0) % heads != 0) {
    throw ShapeError("merge_heads: expected [B*H,T,dh], got " + shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0) / heads, T = x.dim(1), dh = x.dim(2), D = dh * heads;
  std::vector<Real> out(x.numel());
  const Real* src = x.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < T; ++t)
        std::copy_n(src + ((b * heads + h) * T + t) * dh, dh, out.data() + (b * T + t) * D + h * dh);
  return make_result<Real>("merge_heads", Shape{B, T, D}, std::move(out), {x},
                           [B, T, D, dh, heads](Node<Real>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < T; ++t) {
          const Real* g = self.grad.data() + (b * T + t) * D + h * dh;
          Real* dst = d.data() + ((b * heads + h) * T + t) * dh;
          for (std::size_t e = 0; e < dh; ++e) dst[e] += g[e];
        }
  });
}

template <typename Real>
Tensor<Real> embedding(const Tensor<Real>& table, std::span<const int> ids, const Shape& ids_shape) {
  if (table.rank() != 2) throw ShapeError("embedding table must be [V, d]");
  if (shape_numel(ids_shape) != ids.size()) throw ShapeError("embedding: ids do not match ids_shape");
  const std::size_t V = table.dim(0), d = table.dim(1);
  std::vector<Real> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw IndexError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                       std::to_string(V));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  Shape shape = ids_shape;
  shape.push_back(d);
  std::vector<int> saved(ids.begin(), ids.end());
  return make_result<Real>("embedding", std::move(shape), std::move(out), {table},
                           [saved = std::move(saved), d](Node<Real>& self) {
    auto& dT = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      Real* dst = dT.data() + static_cast<std::size_t>(saved[i]) * d;
      const Real* g = self.grad.data() + i * d;
      for (std::size_t e = 0; e < d; ++e) dst[e] += g[e];
    }
  });
}

template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, std::span<const std::size_t> rows) {
  if (x.rank() < 1) throw ShapeError("gather_rows on scalar");
  const std::size_t R = x.dim(0), width = x.numel() / R;
  std::vector<Real> out(rows.size() * width);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= R) throw IndexError("gather_rows: row out of range");
    std::copy_n(x.data().data() + rows[i] * width, width, out.data() + i * width);
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return make_result<Real>("gather_rows", std::move(shape), std::move(out), {x},
                           [saved = std::move(saved), width](Node<Real>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < saved.size(); ++i)
      for (std::size_t e = 0; e < width; ++e) d[saved[i] * width + e] += self.grad[i * width + e];
  });
}

template <typename Real>
Tensor<Real> dropout(const Tensor<Real>& x, double p, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw InvalidArgument("dropout probability must be in [0, 1)");
  if (p == 0.0) return x;
  Rng rng(seed);
  const Real keep_scale = static_cast<Real>(1.0 / (1.0 - p));
  std::vector<Real> factor(x.numel());
  for (auto& f : factor) f = uniform01(rng) >= p ? keep_scale : Real(0);
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor[i];
  return make_result<Real>("dropout", x.shape(), std::move(out), {x},
                           [factor = std::move(factor)](Node<Real>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * factor[i];
  });
}

namespace {

template <typename Real>
void check_softmax_input(const Tensor<Real>& z, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("softmax temperature must be > 0");
  for (Real v : z.data())
    if (!std::isfinite(v)) throw NonFiniteInput("softmax input is not finite");
}

}  // namespace

template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& z, double tau) {
  check_softmax_input(z, tau);
  const std::size_t V = last_dim(z.shape());
  const std::size_t R = z.numel() / V;
  std::vector<Real> out(z.numel());
  const Real* src = z.data().data();
  for (std::size_t r = 0; r < R; ++r) {
    const Real* row = src + r * V;
    Real* dst = out.data() + r * V;
    const double mx = *std::max_element(row, row + V);
    double total = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      const double e = std::exp((static_cast<double>(row[v]) - mx) / tau);
      dst[v] = static_cast<Real>(e);
      total += e;
    }
    for (std::size_t v = 0; v < V; ++v) dst[v] = static_cast<Real>(static_cast<double>(dst[v]) / total);
  }
  return make_result<Real>("softmax", z.shape(), std::move(out), {z}, [R, V, tau](Node<Real>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < R; ++r) {
      const Real* y = self.value.data() + r * V;
      const Real* g = self.grad.data() + r * V;
      double dot = 0.0;
      for (std::size_t v = 0; v < V; ++v) dot += static_cast<double>(g[v]) * y[v];
      for (std::size_t v = 0; v < V; ++v)
        d[r * V + v] += static_cast<Real>(y[v] * (g[v] - dot) / tau);
    }
  });
}

template <typename Real>
Tensor<Real> log_softmax(const Tensor<Real>& z, double tau) {
  check_softmax_input(z, tau);
  const std::size_t V = last_dim(z.shape());
  const std::size_t R = z.numel() / V;
  std::vector<Real> out(z.numel());
  const Real* src = z.data().data();
  for (std::size_t r = 0; r < R; ++r) {
    const Real* row = src + r * V;
    const double mx = *std::max_element(row, row + V);
    double total = 0.0;
    for (std::size_t v = 0; v < V; ++v) total += std::exp((static_cast<double>(row[v]) - mx) / tau);
    const double lse = std::log(total);
    for (std::size_t v = 0; v < V; ++v)
      out[r * V + v] = static_cast<Real>((static_cast<double>(row[v]) - mx) / tau - lse);
  }
  return make_result<Real>("log_softmax", z.shape(), std::move(out), {z},
                           [R, V, tau](Node<Real>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < R; ++r) {
      const Real* y = self.value.data() + r * V;
      const Real* g = self.grad.data() + r * V;
      double gsum = 0.0;
      for (std::size_t v = 0; v < V; ++v) gsum += g[v];
      for (std::size_t v = 0; v < V; ++v)
        d[r * V + v] += static_cast<Real>((g[v] - std::exp(static_cast<double>(y[v])) * gsum) / tau);
    }
  });
}

template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const LayerNormParams<Real>& params,
                        std::span<const Real> noise) {
  const std::size_t D = last_dim(x.shape());
  if (params.gain.numel() != D || params.bias.numel() != D) {
    throw ShapeError("layer_norm: width " + std::to_string(D) + " vs parameters of width " +
                     std::to_string(params.gain.numel()));
  }
  if (!(params.epsilon > 0.0)) throw InvalidArgument("layer_norm epsilon must be > 0");
  if (!noise.empty() && noise.size() != x.numel()) throw ShapeError("layer_norm: noise size mismatch");
  const std::size_t R = x.numel() / D;
  std::vector<Real> normalized(x.numel());
  std::vector<Real> inv_std(R);
  std::vector<Real> out(x.numel());
  const Real* g = params.gain.data().data();
  const Real* b = params.bias.data().data();
  for (std::size_t r = 0; r < R; ++r) {
    const Real* row = x.data().data() + r * D;
    double mu = 0.0;
    for (std::size_t i = 0; i < D; ++i) mu += row[i];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t i = 0; i < D; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(D);
    const double rs = 1.0 / std::sqrt(var + params.epsilon);
    inv_std[r] = static_cast<Real>(rs);
    for (std::size_t i = 0; i < D; ++i) {
      const std::size_t k = r * D + i;
      normalized[k] = static_cast<Real>((row[i] - mu) * rs);
      const Real n = noise.empty() ? normalized[k] : normalized[k] + noise[k];
      out[k] = g[i] * n + b[i];
    }
  }
  std::vector<Real> saved_noise(noise.begin(), noise.end());
  return make_result<Real>(
      "layer_norm", x.shape(), std::move(out), {x, params.gain, params.bias},
      [R, D, normalized = std::move(normalized), inv_std = std::move(inv_std),
       saved_noise = std::move(saved_noise)](Node<Real>& self) {
        Node<Real>& X = *self.inputs[0];
        Node<Real>& G = *self.inputs[1];
        Node<Real>& Bn = *self.inputs[2];
        const Real* g = G.value.data();
        for (std::size_t r = 0; r < R; ++r) {
          const Real* dy = self.grad.data() + r * D;
          const Real* nrm = normalized.data() + r * D;
          if (G.requires_grad) {
            auto& dG = G.grad_buffer();
            for (std::size_t i = 0; i < D; ++i) {
              const Real n = saved_noise.empty() ? nrm[i] : nrm[i] + saved_noise[r * D + i];
              dG[i] += dy[i] * n;
            }
          }
          if (Bn.requires_grad) {
            auto& dB = Bn.grad_buffer();
            for (std::size_t i = 0; i < D; ++i) dB[i] += dy[i];
          }
          if (X.requires_grad) {
            double mean_dn = 0.0, mean_dn_n = 0.0;
            for (std::size_t i = 0; i < D; ++i) {
              const double dn = static_cast<double>(dy[i]) * g[i];
              mean_dn += dn;
              mean_dn_n += dn * nrm[i];
            }
            mean_dn /= static_cast<double>(D);
            mean_dn_n /= static_cast<double>(D);
            auto& dX = X.grad_buffer();
            for (std::size_t i = 0; i < D; ++i) {
              const double dn = static_cast<double>(dy[i]) * g[i];
              dX[r * D + i] += static_cast<Real>(inv_std[r] * (dn - mean_dn - nrm[i] * mean_dn_n));
            }
          }
        }
      });
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  double total = 0.0;
  for (Real v : x.data()) total += v;
  return make_result<Real>("sum", Shape{1}, {static_cast<Real>(total)}, {x}, [](Node<Real>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (auto& v : d) v += self.grad[0];
  });
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  double total = 0.0;
  for (Real v : x.data()) total += v;
  const double n = static_cast<double>(x.numel());
  return make_result<Real>("mean", Shape{1}, {static_cast<Real>(total / n)}, {x},
                           [n](Node<Real>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    const Real g = static_cast<Real>(self.grad[0] / n);
    for (auto& v : d) v += g;
  });
}

template <typename Real>
Tensor<Real> weighted_sum(const Tensor<Real>& x, std::span<const Real> weights) {
  if (weights.size() != x.numel()) throw ShapeError("weighted_sum: weight count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += static_cast<double>(weights[i]) * x.data()[i];
  std::vector<Real> w(weights.begin(), weights.end());
  return make_result<Real>("weighted_sum", Shape{1}, {static_cast<Real>(total)}, {x},
                           [w = std::move(w)](Node<Real>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += w[i] * self.grad[0];
  });
}

template <typename Real>
Tensor<Real> masked_fill(const Tensor<Real>& x, std::span<const std::uint8_t> mask, double value) {
  if (mask.size() != x.numel()) throw ShapeError("masked_fill: mask size mismatch");
  std::vector<Real> out(x.data().begin(), x.data().end());
  const Real fill = static_cast<Real>(value);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = fill;
  std::vector<std::uint8_t> saved(mask.begin(), mask.end());
  return make_result<Real>("masked_fill", x.shape(), std::move(out), {x},
                           [saved = std::move(saved)](Node<Real>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i)
      if (!saved[i]) d[i] += self.grad[i];
  });
}

template <typename Real>
Tensor<Real> kl_divergence_rows(const Tensor<Real>& p, const Tensor<Real>& q,
                                std::span<const std::uint8_t> retained) {
  if (p.shape() != q.shape()) {
    throw ShapeError("kl_divergence_rows: shapes differ " + shape_str(p.shape()) + " vs " +
                     shape_str(q.shape()));
  }
  if (!retained.empty() && retained.size() != p.numel()) {
    throw ShapeError("kl_divergence_rows: retained mask size mismatch");
  }
  const std::size_t V = last_dim(p.shape());
  const std::size_t R = p.numel() / V;
  const double floor = kProbabilityFloor;
  if (retained.empty()) {
    for (std::size_t r = 0; r < R; ++r) {
      double sp = 0.0, sq = 0.0;
      for (std::size_t v = 0; v < V; ++v) {
        sp += p.data()[r * V + v];
        sq += q.data()[r * V + v];
      }
      if (std::abs(sp - 1.0) > 1e-5 || std::abs(sq - 1.0) > 1e-5) {
        throw InvalidDistribution("row " + std::to_string(r) + " does not sum to 1 (p: " +
                                  std::to_string(sp) + ", q: " + std::to_string(sq) + ")");
      }
    }
  }
  std::vector<Real> out(R);
  for (std::size_t r = 0; r < R; ++r) {
    double acc = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      const std::size_t k = r * V + v;
      if (!retained.empty() && !retained[k]) continue;
      const double pv = p.data()[k];
      if (pv == 0.0) continue;
      acc += pv * (std::log(std::max(pv, floor)) - std::log(std::max<double>(q.data()[k], floor)));
    }
    out[r] = static_cast<Real>(acc);
  }
  std::vector<std::uint8_t> saved(retained.begin(), retained.end());
  Shape shape(p.shape().begin(), p.shape().end() - 1);
  if (shape.empty()) shape.push_back(1);
  return make_result<Real>("kl_divergence", std::move(shape), std::move(out), {p, q},
                           [R, V, floor, saved = std::move(saved)](Node<Real>& self) {
    Node<Real>& P = *self.inputs[0];
    Node<Real>& Q = *self.inputs[1];
    for (std::size_t r = 0; r < R; ++r) {
      const double g = self.grad[r];
      for (std::size_t v = 0; v < V; ++v) {
        const std::size_t k = r * V + v;
        if (!saved.empty() && !saved[k]) continue;
        const double pv = P.value[k];
        const double qv = Q.value[k];
        if (P.requires_grad) {
          const double dp = (pv > floor ? std::log(pv) + 1.0 : std::log(floor)) -
                            std::log(std::max(qv, floor));
          P.grad_buffer()[k] += static_cast<Real>(g * dp);
        }
        if (Q.requires_grad && qv > floor) {
          Q.grad_buffer()[k] += static_cast<Real>(-g * pv / qv);
        }
      }
    }
  });
}

template <typename Real>
Tensor<Real> label_smoothed_nll(const Tensor<Real>& logprobs, std::span<const int> gold, double eps) {
  if (!(eps >= 0.0 && eps < 1.0)) throw InvalidArgument("label smoothing must be in [0, 1)");
  const std::size_t V = last_dim(logprobs.shape());
  const std::size_t R = logprobs.numel() / V;
  if (gold.size() != R) throw ShapeError("label_smoothed_nll: one gold index per row required");
  for (int g : gold)
    if (g < 0 || static_cast<std::size_t>(g) >= V) {
      throw IndexError("gold index " + std::to_string(g) + " outside vocabulary of size " +
                       std::to_string(V));
    }
  const double other = V > 1 ? eps / static_cast<double>(V - 1) : 0.0;
  const double on = V > 1 ? 1.0 - eps : 1.0;
  std::vector<Real> out(R);
  for (std::size_t r = 0; r < R; ++r) {
    const Real* row = logprobs.data().data() + r * V;
    const auto gi = static_cast<std::size_t>(gold[r]);
    double rest = 0.0;
    for (std::size_t v = 0; v < V; ++v)
      if (v != gi) rest += row[v];
    out[r] = static_cast<Real>(eps == 0.0 ? -static_cast<double>(row[gi]) : -(on * row[gi] + other * rest));
  }
  std::vector<int> saved(gold.begin(), gold.end());
  Shape shape(logprobs.shape().begin(), logprobs.shape().end() - 1);
  if (shape.empty()) shape.push_back(1);
  return make_result<Real>("label_smoothed_nll", std::move(shape), std::move(out), {logprobs},
                           [R, V, on, other, saved = std::move(saved)](Node<Real>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < R; ++r) {
      const double g = self.grad[r];
      for (std::size_t v = 0; v < V; ++v) {
        const double w = v == static_cast<std::size_t>(saved[r]) ? on : other;
        d[r * V + v] += static_cast<Real>(-g * w);
      }
    }
  });
}

template <typename Real>
Tensor<Real> detach(const Tensor<Real>& x) {
  return Tensor<Real>::from(x.shape(), std::vector<Real>(x.data().begin(), x.data().end()), false);
}

template <typename Real>
Tensor<Real> mark(const Tensor<Real>& x, std::string_view label) {
  std::vector<Real> out(x.data().begin(), x.data().end());
  return make_result<Real>(label, x.shape(), std::move(out), {x},
                           [](Node<Real>& self) { accumulate_into(*self.inputs[0], self.grad); });
}

#define MVNMT_INSTANTIATE_OPS(R)                                                               \
  template Tensor<R> matmul(const Tensor<R>&, const Tensor<R>&, bool);                         \
  template Tensor<R> bmm(const Tensor<R>&, const Tensor<R>&, bool);                            \
  template Tensor<R> transpose(const Tensor<R>&);                                              \
  template Tensor<R> reshape(const Tensor<R>&, Shape);                                         \
  template Tensor<R> add(const Tensor<R>&, const Tensor<R>&);                                  \
  template Tensor<R> mul(const Tensor<R>&, const Tensor<R>&);                                  \
  template Tensor<R> scale(const Tensor<R>&, double);                                          \
  template Tensor<R> relu(const Tensor<R>&);                                                   \
  template Tensor<R> split_heads(const Tensor<R>&, std::size_t);                               \
  template Tensor<R> merge_heads(const Tensor<R>&, std::size_t);                               \
  template Tensor<R> embedding(const Tensor<R>&, std::span<const int>, const Shape&);          \
  template Tensor<R> gather_rows(const Tensor<R>&, std::span<const std::size_t>);              \
  template Tensor<R> dropout(const Tensor<R>&, double, std::uint64_t);                         \
  template Tensor<R> softmax(const Tensor<R>&, double);                                        \
  template Tensor<R> log_softmax(const Tensor<R>&, double);                                    \
  template Tensor<R> layer_norm(const Tensor<R>&, const LayerNormParams<R>&, std::span<const R>); \
  template Tensor<R> sum(const Tensor<R>&);                                                    \
  template Tensor<R> mean(const Tensor<R>&);                                                   \
  template Tensor<R> weighted_sum(const Tensor<R>&, std::span<const R>);                       \
  template Tensor<R> masked_fill(const Tensor<R>&, std::span<const std::uint8_t>, double);     \
  template Tensor<R> kl_divergence_rows(const Tensor<R>&, const Tensor<R>&,                    \
                                        std::span<const std::uint8_t>);                        \
  template Tensor<R> label_smoothed_nll(const Tensor<R>&, std::span<const int>, double);       \
  template Tensor<R> detach(const Tensor<R>&);                                                 \
  template Tensor<R> mark(const Tensor<R>&, std::string_view);

MVNMT_INSTANTIATE_OPS(float)
MVNMT_INSTANTIATE_OPS(double)

}  // namespace mvnmt
