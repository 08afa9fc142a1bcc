#include "todsynth/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "todsynth/errors.hpp"

namespace todsynth {

namespace {

std::vector<float> transposed(std::span<const float> src, std::size_t rows, std::size_t cols) {
  std::vector<float> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

void add_into(std::span<float> dst, std::span<const float> src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

void gemm(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
          std::size_t n, std::size_t k, bool trans_a, bool trans_b, bool accumulate) {
  std::vector<float> at, bt;
  const float* ap = a.data();
  const float* bp = b.data();
  if (trans_a) {
    at = transposed(a, k, m);
    ap = at.data();
  }
  if (trans_b) {
    bt = transposed(b, n, k);
    bp = bt.data();
  }
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* arow = ap + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const float* brow = bp + p * n;
      double* accp = acc.data();
      for (std::size_t j = 0; j < n; ++j) accp[j] += av * static_cast<double>(brow[j]);
    }
    float* crow = c.data() + i * n;
    if (accumulate) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<float>(crow[j] + acc[j]);
    } else {
      for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<float>(acc[j]);
    }
  }
}

std::vector<double> per_position_cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t p_count = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != p_count) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(p_count) + " positions");
  }
  std::vector<double> out(p_count, 0.0);
  for (std::size_t p = 0; p < p_count; ++p) {
    if (labels[p] == kIgnoreIndex) continue;
    if (labels[p] >= classes) {
      throw ContractError("cross_entropy: label " + std::to_string(labels[p]) + " outside [0, " +
                          std::to_string(classes) + ")");
    }
    const float* row = logits.data().data() + p * classes;
    const double mx = *std::max_element(row, row + classes);
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += std::exp(row[c] - mx);
    out[p] = mx + std::log(s) - row[labels[p]];
  }
  return out;
}

namespace ops {

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank("matmul", av, 2);
  require_rank("matmul", bv, 2);
  if (av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: inner extents differ for " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  gemm(av.data(), bv.data(), out.data(), m, n, k, false, false);
  Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b, m, n, k](Tape& t, std::span<const float> g) {
    if (a.needs_grad()) gemm(g, b.value().data(), t.grad_buffer(a), m, k, n, false, true, true);
    if (b.needs_grad()) gemm(a.value().data(), g, t.grad_buffer(b), k, n, m, true, false, true);
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank("matmul_nt", av, 2);
  require_rank("matmul_nt", bv, 2);
  if (av.dim(1) != bv.dim(1)) {
    throw DimensionError("matmul_nt: inner extents differ for " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()) + "^T");
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  Tensor out({m, n});
  gemm(av.data(), bv.data(), out.data(), m, n, k, false, true);
  Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b, m, n, k](Tape& t, std::span<const float> g) {
    // C = A Bᵀ: dA = G B, dB = Gᵀ A
    if (a.needs_grad()) gemm(g, b.value().data(), t.grad_buffer(a), m, k, n, false, false, true);
    if (b.needs_grad()) gemm(g, a.value().data(), t.grad_buffer(b), n, k, m, true, false, true);
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_rank("transpose", av, 2);
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out({c, r}, transposed(av.data(), r, c));
  Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [a, r, c](Tape& t, std::span<const float> g) {
    add_into(t.grad_buffer(a), transposed(g, c, r));
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  add_into(out.data(), b.value().data());
  out.set_requires_grad(false);
  Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b](Tape& t, std::span<const float> g) {
    if (a.needs_grad()) add_into(t.grad_buffer(a), g);
    if (b.needs_grad()) add_into(t.grad_buffer(b), g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor out(a.value().shape());
  auto ad = a.value().data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ad[i] - bd[i];
  Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b](Tape& t, std::span<const float> g) {
    if (a.needs_grad()) add_into(t.grad_buffer(a), g);
    if (b.needs_grad()) {
      auto gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor out(a.value().shape());
  auto ad = a.value().data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ad[i] * bd[i];
  Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b](Tape& t, std::span<const float> g) {
    auto ad = a.value().data();
    auto bd = b.value().data();
    if (a.needs_grad()) {
      auto ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
    }
    if (b.needs_grad()) {
      auto gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
    }
  });
}

Var scale(Var a, float s) {
  Tensor out(a.value().shape());
  auto ad = a.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ad[i] * s;
  Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [a, s](Tape& t, std::span<const float> g) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

Var add_rowwise(Var a, Var bias) {
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  require_rank("add_rowwise", av, 2);
  const std::size_t m = av.dim(0), n = av.dim(1);
  if (bv.numel() != n) {
    throw DimensionError("add_rowwise: bias " + shape_str(bv.shape()) + " does not fit rows of " +
                         shape_str(av.shape()));
  }
  Tensor out = av;
  out.set_requires_grad(false);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  }
  Var inputs[] = {a, bias};
  return a.tape().record(std::move(out), inputs, [a, bias, m, n](Tape& t, std::span<const float> g) {
    if (a.needs_grad()) add_into(t.grad_buffer(a), g);
    if (bias.needs_grad()) {
      std::vector<double> acc(n, 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) acc[j] += g[i * n + j];
      }
      auto gb = t.grad_buffer(bias);
      for (std::size_t j = 0; j < n; ++j) gb[j] += static_cast<float>(acc[j]);
    }
  });
}

Var add_broadcast_row(Var a, Var row) { return add_rowwise(a, row); }

Var mul_rowwise(Var a, Var scale_v) {
  const Tensor& av = a.value();
  const Tensor& sv = scale_v.value();
  require_rank("mul_rowwise", av, 2);
  const std::size_t m = av.dim(0), n = av.dim(1);
  if (sv.numel() != n) {
    throw DimensionError("mul_rowwise: scale " + shape_str(sv.shape()) + " does not fit rows of " +
                         shape_str(av.shape()));
  }
  Tensor out(av.shape());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] * sv[j];
  }
  Var inputs[] = {a, scale_v};
  return a.tape().record(std::move(out), inputs, [a, scale_v, m, n](Tape& t, std::span<const float> g) {
    const Tensor& av = a.value();
    const Tensor& sv = scale_v.value();
    if (a.needs_grad()) {
      auto ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] * sv[j];
      }
    }
    if (scale_v.needs_grad()) {
      std::vector<double> acc(n, 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) acc[j] += static_cast<double>(g[i * n + j]) * av[i * n + j];
      }
      auto gs = t.grad_buffer(scale_v);
      for (std::size_t j = 0; j < n; ++j) gs[j] += static_cast<float>(acc[j]);
    }
  });
}

namespace {
template <class F, class DF>
Var unary(Var a, F f, DF df) {
  Tensor out(a.value().shape());
  auto ad = a.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(ad[i]);
  Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [a, df](Tape& t, std::span<const float> g) {
    auto ad = a.value().data();
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(ad[i]);
  });
}

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
}  // namespace

Var relu(Var a) {
  return unary(a, [](float x) { return x > 0.0f ? x : 0.0f; },
               [](float x) { return x > 0.0f ? 1.0f : 0.0f; });
}

Var gelu(Var a) {
  return unary(
      a,
      [](float x) {
        const float u = kGeluC * (x + 0.044715f * x * x * x);
        return 0.5f * x * (1.0f + std::tanh(u));
      },
      [](float x) {
        const float u = kGeluC * (x + 0.044715f * x * x * x);
        const float th = std::tanh(u);
        const float du = kGeluC * (1.0f + 3.0f * 0.044715f * x * x);
        return 0.5f * (1.0f + th) + 0.5f * x * (1.0f - th * th) * du;
      });
}

Var silu(Var a) {
  return unary(
      a, [](float x) { return x / (1.0f + std::exp(-x)); },
      [](float x) {
        const float s = 1.0f / (1.0f + std::exp(-x));
        return s * (1.0f + x * (1.0f - s));
      });
}

Var sum(Var a) {
  double s = 0.0;
  for (float v : a.value().data()) s += v;
  Var inputs[] = {a};
  return a.tape().record(Tensor::scalar(static_cast<float>(s)), inputs, [a](Tape& t, std::span<const float> g) {
    auto ga = t.grad_buffer(a);
    for (auto& v : ga) v += g[0];
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  for (float v : a.value().data()) s += v;
  Var inputs[] = {a};
  return a.tape().record(Tensor::scalar(static_cast<float>(s / n)), inputs,
                         [a, n](Tape& t, std::span<const float> g) {
                           const float d = static_cast<float>(g[0] / n);
                           auto ga = t.grad_buffer(a);
                           for (auto& v : ga) v += d;
                         });
}

Var mse(Var pred, Var target) {
  require_same_shape("mse", pred.value(), target.value());
  const double n = static_cast<double>(pred.numel());
  auto pd = pred.value().data();
  auto td = target.value().data();
  double s = 0.0;
  for (std::size_t i = 0; i < pd.size(); ++i) {
    const double d = static_cast<double>(pd[i]) - td[i];
    s += d * d;
  }
  Var inputs[] = {pred, target};
  return pred.tape().record(Tensor::scalar(static_cast<float>(s / n)), inputs,
                            [pred, target, n](Tape& t, std::span<const float> g) {
                              auto pd = pred.value().data();
                              auto td = target.value().data();
                              const double k = 2.0 * g[0] / n;
                              if (pred.needs_grad()) {
                                auto gp = t.grad_buffer(pred);
                                for (std::size_t i = 0; i < pd.size(); ++i)
                                  gp[i] += static_cast<float>(k * (pd[i] - td[i]));
                              }
                              if (target.needs_grad()) {
                                auto gt = t.grad_buffer(target);
                                for (std::size_t i = 0; i < pd.size(); ++i)
                                  gt[i] -= static_cast<float>(k * (pd[i] - td[i]));
                              }
                            });
}

Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(xv.shape()));
  }
  const auto& sh = xv.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  const std::size_t n = sh[axis];
  Tensor out(sh);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      float mx = xv[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(static_cast<double>(xv[base + j * inner]) - mx);
        out[base + j * inner] = static_cast<float>(e);
        s += e;
      }
      for (std::size_t j = 0; j < n; ++j) {
        out[base + j * inner] = static_cast<float>(out[base + j * inner] / s);
      }
    }
  }
  auto y = std::make_shared<std::vector<float>>(out.storage());
  Var inputs[] = {x};
  return x.tape().record(std::move(out), inputs, [x, y, outer, inner, n](Tape& t, std::span<const float> g) {
    const auto& yv = *y;
    auto gx = t.grad_buffer(x);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          dot += static_cast<double>(g[idx]) * yv[idx];
        }
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          gx[idx] += static_cast<float>(yv[idx] * (g[idx] - dot));
        }
      }
    }
  });
}

Var attention(Var q, Var k, Var v, std::size_t heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_rank("attention", qv, 2);
  require_rank("attention", kv, 2);
  require_rank("attention", vv, 2);
  const std::size_t lq = qv.dim(0), lk = kv.dim(0), d = qv.dim(1);
  if (kv.dim(1) != d || vv.dim(1) != d || vv.dim(0) != lk) {
    throw DimensionError("attention: q " + shape_str(qv.shape()) + ", k " + shape_str(kv.shape()) + ", v " +
                         shape_str(vv.shape()) + " disagree");
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                         " heads");
  }
  const std::size_t dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  // Probabilities per head, [heads × lq × lk], kept for the backward pass.
  auto probs = std::make_shared<std::vector<float>>(heads * lq * lk);
  Tensor out({lq, d});
  std::vector<double> row(lk);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < lq; ++i) {
      const float* qi = qv.data().data() + i * d + off;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < lk; ++j) {
        const float* kj = kv.data().data() + j * d + off;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += static_cast<double>(qi[c]) * kj[c];
        row[j] = s * inv;
        mx = std::max(mx, row[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < lk; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      float* pi = probs->data() + (h * lq + i) * lk;
      for (std::size_t j = 0; j < lk; ++j) pi[j] = static_cast<float>(row[j] / z);
      float* oi = out.data().data() + i * d + off;
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < lk; ++j) acc += static_cast<double>(pi[j]) * vv[j * d + off + c];
        oi[c] = static_cast<float>(acc);
      }
    }
  }
  Var inputs[] = {q, k, v};
  return q.tape().record(std::move(out), inputs,
                         [q, k, v, probs, heads, lq, lk, d, dh, inv](Tape& t, std::span<const float> g) {
    const auto& qd = q.value().data();
    const auto& kd = k.value().data();
    const auto& vd = v.value().data();
    std::vector<double> gq(lq * d, 0.0), gk(lk * d, 0.0), gv(lk * d, 0.0), dp(lk);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < lq; ++i) {
        const float* pi = probs->data() + (h * lq + i) * lk;
        const float* gi = g.data() + i * d + off;
        double dot = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            s += static_cast<double>(gi[c]) * vd[j * d + off + c];
            gv[j * d + off + c] += static_cast<double>(pi[j]) * gi[c];
          }
          dp[j] = s;
          dot += s * pi[j];
        }
        for (std::size_t j = 0; j < lk; ++j) {
          const double ds = pi[j] * (dp[j] - dot) * inv;
          if (ds == 0.0) continue;
          for (std::size_t c = 0; c < dh; ++c) {
            gq[i * d + off + c] += ds * kd[j * d + off + c];
            gk[j * d + off + c] += ds * qd[i * d + off + c];
          }
        }
      }
    }
    auto flush = [&t](Var x, const std::vector<double>& src) {
      if (!x.needs_grad()) return;
      auto dst = t.grad_buffer(x);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] += static_cast<float>(src[i]);
    };
    flush(q, gq);
    flush(k, gk);
    flush(v, gv);
  });
}

Var rms_norm(Var x, Var gain, float eps) {
  const Tensor& xv = x.value();
  require_rank("rms_norm", xv, 2);
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (gain.numel() != n) {
    throw DimensionError("rms_norm: gain " + shape_str(gain.shape()) + " does not fit " + shape_str(xv.shape()));
  }
  const Tensor& gv = gain.value();
  auto inv = std::make_shared<std::vector<float>>(m);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += static_cast<double>(xv[i * n + j]) * xv[i * n + j];
    const float r = static_cast<float>(1.0 / std::sqrt(ss / n + eps));
    (*inv)[i] = r;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * r * gv[j];
  }
  Var inputs[] = {x, gain};
  return x.tape().record(std::move(out), inputs, [x, gain, inv, m, n](Tape& t, std::span<const float> g) {
    const Tensor& xv = x.value();
    const Tensor& gv = gain.value();
    std::vector<double> ggain(n, 0.0);
    std::span<float> gx;
    if (x.needs_grad()) gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < m; ++i) {
      const double r = (*inv)[i];
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double xh = xv[i * n + j] * r;
        const double u = static_cast<double>(g[i * n + j]) * gv[j];
        dot += u * xh;
        ggain[j] += static_cast<double>(g[i * n + j]) * xh;
      }
      dot /= static_cast<double>(n);
      if (!gx.empty()) {
        for (std::size_t j = 0; j < n; ++j) {
          const double xh = xv[i * n + j] * r;
          const double u = static_cast<double>(g[i * n + j]) * gv[j];
          gx[i * n + j] += static_cast<float>((u - xh * dot) * r);
        }
      }
    }
    if (gain.needs_grad()) {
      auto gg = t.grad_buffer(gain);
      for (std::size_t j = 0; j < n; ++j) gg[j] += static_cast<float>(ggain[j]);
    }
  });
}

Var cross_entropy(Var logits, std::span<const std::uint8_t> labels) {
  const Tensor& lv = logits.value();
  auto per = per_position_cross_entropy(lv, labels);
  const std::size_t p_count = lv.dim(0), classes = lv.dim(1);
  std::size_t counted = 0;
  double total = 0.0;
  for (std::size_t p = 0; p < p_count; ++p) {
    if (labels[p] == kIgnoreIndex) continue;
    ++counted;
    total += per[p];
  }
  if (counted == 0) throw ContractError("cross_entropy: every position is ignored; loss is empty");
  auto lab = std::make_shared<std::vector<std::uint8_t>>(labels.begin(), labels.end());
  Var inputs[] = {logits};
  return logits.tape().record(
      Tensor::scalar(static_cast<float>(total / counted)), inputs,
      [logits, lab, p_count, classes, counted](Tape& t, std::span<const float> g) {
        const Tensor& lv = logits.value();
        auto gl = t.grad_buffer(logits);
        const double k = g[0] / static_cast<double>(counted);
        std::vector<double> e(classes);
        for (std::size_t p = 0; p < p_count; ++p) {
          const std::uint8_t y = (*lab)[p];
          if (y == kIgnoreIndex) continue;
          const float* row = lv.data().data() + p * classes;
          const double mx = *std::max_element(row, row + classes);
          double s = 0.0;
          for (std::size_t c = 0; c < classes; ++c) s += (e[c] = std::exp(row[c] - mx));
          for (std::size_t c = 0; c < classes; ++c) {
            const double target = c == y ? 1.0 : 0.0;
            gl[p * classes + c] += static_cast<float>(k * (e[c] / s - target));
          }
        }
      });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs,
                         [a](Tape& t, std::span<const float> g) { add_into(t.grad_buffer(a), g); });
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  Shape sh = parts[0].shape();
  const Shape tail(sh.begin() + 1, sh.end());
  std::size_t lead = 0;
  std::vector<std::size_t> sizes;
  for (const Var& p : parts) {
    const Shape& ps = p.shape();
    if (Shape(ps.begin() + 1, ps.end()) != tail) {
      throw DimensionError("concat: trailing extents differ between " + shape_str(sh) + " and " + shape_str(ps));
    }
    lead += ps[0];
    sizes.push_back(p.numel());
  }
  sh[0] = lead;
  Tensor out(sh);
  std::size_t off = 0;
  for (const Var& p : parts) {
    auto d = p.value().data();
    std::copy(d.begin(), d.end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += d.size();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(out), ins, [ins, sizes](Tape& t, std::span<const float> g) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (ins[i].needs_grad()) add_into(t.grad_buffer(ins[i]), g.subspan(off, sizes[i]));
      off += sizes[i];
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Shape& sh = a.shape();
  if (count == 0 || begin + count > sh[0]) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + shape_str(sh));
  }
  const std::size_t row = a.numel() / sh[0];
  Shape osh = sh;
  osh[0] = count;
  auto src = a.value().data().subspan(begin * row, count * row);
  Tensor out(osh, std::vector<float>(src.begin(), src.end()));
  Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [a, begin, row](Tape& t, std::span<const float> g) {
    add_into(t.grad_buffer(a).subspan(begin * row, g.size()), g);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const std::size_t m = parts[0].shape()[0];
  std::size_t n = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    require_rank("concat_cols", p.value(), 2);
    if (p.shape()[0] != m) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.shape()[1]);
    n += p.shape()[1];
  }
  Tensor out({m, n});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    const std::size_t w = widths[k];
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(pv.data().data() + i * w, w, out.data().data() + i * n + off);
    }
    off += w;
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(out), ins, [ins, widths, m, n](Tape& t, std::span<const float> g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ins.size(); ++k) {
      const std::size_t w = widths[k];
      if (ins[k].needs_grad()) {
        auto gk = t.grad_buffer(ins[k]);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < w; ++j) gk[i * w + j] += g[i * n + off + j];
        }
      }
      off += w;
    }
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  require_rank("slice_cols", av, 2);
  const std::size_t m = av.dim(0), n = av.dim(1);
  if (count == 0 || begin + count > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + shape_str(av.shape()));
  }
  Tensor out({m, count});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(av.data().data() + i * n + begin, count, out.data().data() + i * count);
  }
  Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [a, begin, count, m, n](Tape& t, std::span<const float> g) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < count; ++j) ga[i * n + begin + j] += g[i * count + j];
    }
  });
}

Var gather(Var a, std::vector<std::uint32_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) {
    throw DimensionError("gather: " + std::to_string(index.size()) + " indices for shape " + shape_str(out_shape));
  }
  const std::size_t n = a.numel();
  Tensor out(std::move(out_shape));
  auto ad = a.value().data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw DimensionError("gather: index out of range");
    out[i] = ad[index[i]];
  }
  auto idx = std::make_shared<std::vector<std::uint32_t>>(std::move(index));
  Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [a, idx](Tape& t, std::span<const float> g) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[(*idx)[i]] += g[i];
  });
}

Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank("conv2d", xv, 3);
  require_rank("conv2d", wv, 4);
  const std::size_t c_in = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const std::size_t c_out = wv.dim(0), ks = wv.dim(2);
  if (wv.dim(1) != c_in || wv.dim(3) != ks) {
    throw DimensionError("conv2d: kernel " + shape_str(wv.shape()) + " does not match input " + shape_str(xv.shape()));
  }
  if (b.numel() != c_out) throw DimensionError("conv2d: bias length does not match output channels");
  if (stride == 0 || h + 2 * pad < ks || wd + 2 * pad < ks) throw DimensionError("conv2d: invalid geometry");
  const std::size_t ho = (h + 2 * pad - ks) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - ks) / stride + 1;
  const std::size_t rows = c_in * ks * ks, cols = ho * wo;

  // im2col; the same index map drives col2im in the backward pass.
  auto map = std::make_shared<std::vector<std::int32_t>>(rows * cols);
  auto colv = std::make_shared<std::vector<float>>(rows * cols);
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t ky = 0; ky < ks; ++ky) {
      for (std::size_t kx = 0; kx < ks; ++kx) {
        const std::size_t r = (c * ks + ky) * ks + kx;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            const std::size_t at = r * cols + oy * wo + ox;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) {
              (*map)[at] = -1;
              (*colv)[at] = 0.0f;
            } else {
              const auto src = static_cast<std::int32_t>((c * h + static_cast<std::size_t>(iy)) * wd +
                                                         static_cast<std::size_t>(ix));
              (*map)[at] = src;
              (*colv)[at] = xv[static_cast<std::size_t>(src)];
            }
          }
        }
      }
    }
  }
  Tensor out({c_out, ho, wo});
  gemm(wv.data(), *colv, out.data(), c_out, cols, rows, false, false);
  const Tensor& bv = b.value();
  for (std::size_t o = 0; o < c_out; ++o) {
    for (std::size_t i = 0; i < cols; ++i) out[o * cols + i] += bv[o];
  }
  Var inputs[] = {x, w, b};
  return x.tape().record(std::move(out), inputs,
                         [x, w, b, map, colv, c_out, rows, cols](Tape& t, std::span<const float> g) {
                           if (w.needs_grad()) gemm(g, *colv, t.grad_buffer(w), c_out, rows, cols, false, true, true);
                           if (b.needs_grad()) {
                             auto gb = t.grad_buffer(b);
                             for (std::size_t o = 0; o < c_out; ++o) {
                               double s = 0.0;
                               for (std::size_t i = 0; i < cols; ++i) s += g[o * cols + i];
                               gb[o] += static_cast<float>(s);
                             }
                           }
                           if (x.needs_grad()) {
                             std::vector<float> dcol(rows * cols);
                             gemm(w.value().data(), g, dcol, rows, cols, c_out, true, false);
                             auto gx = t.grad_buffer(x);
                             for (std::size_t i = 0; i < dcol.size(); ++i) {
                               const std::int32_t src = (*map)[i];
                               if (src >= 0) gx[static_cast<std::size_t>(src)] += dcol[i];
                             }
                           }
                         });
}

Var upsample2x(Var x) {
  const Tensor& xv = x.value();
  require_rank("upsample2x", xv, 3);
  const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  std::vector<std::uint32_t> index(c * 4 * h * w);
  std::size_t i = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t xx = 0; xx < 2 * w; ++xx) {
        index[i++] = static_cast<std::uint32_t>((ch * h + y / 2) * w + xx / 2);
      }
    }
  }
  return gather(x, std::move(index), Shape{c, 2 * h, 2 * w});
}

}  // namespace ops
}  // namespace todsynth
