#include "seed/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "seed/errors.hpp"

namespace seed::ops {

namespace {

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor make_output(Shape shape, std::vector<double> data, bool track) {
  Tensor out(std::move(shape), std::move(data), track);
  round_in_place(out.data());
  return out;
}

// Gradient buffer of a tensor that produced no upstream gradient is empty;
// adjoints skip in that case.
const std::vector<double>* upstream(const Tensor& out) {
  const auto& g = out.impl()->grad;
  return g.empty() ? nullptr : &g;
}

void require_matrix(const Tensor& t, const char* name) {
  if (t.ndim() != 2) {
    throw ConfigError(std::string(name) + " must be a matrix, got " +
                      shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                      " vs " + shape_string(b.shape()));
  }
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x k] += a[m x n] * b[k x n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

Mask causal_mask(std::size_t n) {
  Mask m(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m[i * n + j] = 1;
  }
  return m;
}

Mask full_mask(std::size_t query_len, std::size_t key_len) {
  return Mask(query_len * key_len, 1);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ConfigError("matmul: inner extents differ, " + shape_string(a.shape()) +
                      " x " + shape_string(b.shape()));
  }
  std::vector<double> c(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), c.data(), m, k, n);
  const bool track = tracking({&a, &b});
  Tensor out = make_output({m, n}, std::move(c), track);
  if (track) {
    active_tape()->record([a, b, out, m, k, n]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      if (a.requires_grad()) gemm_nt(g->data(), b.data().data(), a.grad().data(), m, n, k);
      if (b.requires_grad()) gemm_tn(a.data().data(), g->data(), b.grad().data(), m, k, n);
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  require_matrix(x, "transpose input");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> y(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x.data()[i * n + j];
  }
  const bool track = tracking({&x});
  Tensor out = make_output({n, m}, std::move(y), track);
  if (track) {
    active_tape()->record([x, out, m, n]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      auto gx = x.grad();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += (*g)[j * m + i];
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  const bool track = tracking({&a, &b});
  Tensor out = make_output(a.shape(), std::move(y), track);
  if (track) {
    active_tape()->record([a, b, out]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += (*g)[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  const bool track = tracking({&a, &b});
  Tensor out = make_output(a.shape(), std::move(y), track);
  if (track) {
    active_tape()->record([a, b, out]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= (*g)[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  const bool track = tracking({&a, &b});
  Tensor out = make_output(a.shape(), std::move(y), track);
  if (track) {
    active_tape()->record([a, b, out]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += (*g)[i] * a[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * factor;
  const bool track = tracking({&x});
  Tensor out = make_output(x.shape(), std::move(y), track);
  if (track) {
    active_tape()->record([x, out, factor]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i] * factor;
    });
  }
  return out;
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.cols();
  if (bias.numel() != n) {
    throw ConfigError("add_row: bias " + shape_string(bias.shape()) +
                      " does not match rows of " + shape_string(x.shape()));
  }
  const std::size_t m = x.rows();
  std::vector<double> y(x.numel());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = x[i * n + j] + bias[j];
  }
  const bool track = tracking({&x, &bias});
  Tensor out = make_output(x.shape(), std::move(y), track);
  if (track) {
    active_tape()->record([x, bias, out, m, n]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gb[j] += (*g)[i * n + j];
        }
      }
    });
  }
  return out;
}

Tensor div_by_scalar(const Tensor& x, const Tensor& s) {
  const double d = s.item();
  if (d == 0.0) throw ContractViolation("div_by_scalar: zero divisor");
  std::vector<double> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] / d;
  const bool track = tracking({&x, &s});
  Tensor out = make_output(x.shape(), std::move(y), track);
  if (track) {
    active_tape()->record([x, s, out, d]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i] / d;
      }
      if (s.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) acc += (*g)[i] * x[i];
        s.grad()[0] -= acc / (d * d);
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  std::vector<double> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = x[i];
    y[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v)));
  }
  const bool track = tracking({&x});
  Tensor out = make_output(x.shape(), std::move(y), track);
  if (track) {
    active_tape()->record([x, out]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const double v = x[i];
        const double u = kGeluC * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
        const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        gx[i] += (*g)[i] * d;
      }
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> y(x.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    double* out = y.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(row[j] - mx);
      total += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= total;
  }
  const bool track = tracking({&x});
  Tensor out = make_output(x.shape(), std::move(y), track);
  if (track) {
    active_tape()->record([x, out, m, n]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      auto gx = x.grad();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += (*g)[i * n + j] * out[i * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          gx[i * n + j] += out[i * n + j] * ((*g)[i * n + j] - dot);
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (eps <= 0.0) throw ContractViolation("layer_norm: eps must be positive");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n) {
    throw ConfigError("layer_norm: gain/bias extent does not match " +
                      shape_string(x.shape()));
  }
  std::vector<double> y(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      y[i * n + j] = xhat[i * n + j] * gain[j] + bias[j];
    }
  }
  const bool track = tracking({&x, &gain, &bias});
  Tensor out = make_output(x.shape(), std::move(y), track);
  if (track) {
    active_tape()->record([x, gain, bias, out, m, n, xhat = std::move(xhat),
                           inv_std = std::move(inv_std)]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      if (gain.requires_grad()) {
        auto gg = gain.grad();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gg[j] += (*g)[i * n + j] * xhat[i * n + j];
        }
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gb[j] += (*g)[i * n + j];
        }
      }
      if (x.requires_grad()) {
        auto gx = x.grad();
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = (*g)[i * n + j] * gain[j];
            mean_d += d;
            mean_dx += d * xhat[i * n + j];
          }
          mean_d *= inv_n;
          mean_dx *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = (*g)[i * n + j] * gain[j];
            gx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
          }
        }
      }
    });
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const Mask& mask) {
  require_matrix(q, "attention q");
  return multi_head_attention(q, k, v, mask,
                              {.batch = 1, .heads = 1, .query_len = q.dim(0),
                               .key_len = k.rows()});
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Mask& mask, const AttentionLayout& layout) {
  const std::size_t B = layout.batch, H = layout.heads;
  const std::size_t Lq = layout.query_len, Lk = layout.key_len;
  const std::size_t D = q.cols();
  if (H == 0 || D % H != 0) {
    throw ConfigError("attention: width " + std::to_string(D) +
                      " not divisible by head count " + std::to_string(H));
  }
  if (q.rows() != B * Lq || k.rows() != B * Lk || v.rows() != B * Lk ||
      k.cols() != D || v.cols() != D) {
    throw ConfigError("attention: inconsistent shapes q" + shape_string(q.shape()) +
                      " k" + shape_string(k.shape()) + " v" + shape_string(v.shape()));
  }
  if (!mask.empty()) {
    if (mask.size() != Lq * Lk) throw ConfigError("attention: mask size mismatch");
    for (std::size_t i = 0; i < Lq; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < Lk; ++j) any = any || mask[i * Lk + j];
      if (!any) {
        throw ContractViolation("attention: query row " + std::to_string(i) +
                                " has no permitted key");
      }
    }
  }
  const std::size_t dh = D / H;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> probs(B * H * Lq * Lk);
  std::vector<double> y(B * Lq * D, 0.0);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < Lq; ++i) {
        double* p = probs.data() + ((b * H + h) * Lq + i) * Lk;
        const double* qi = qd + (b * Lq + i) * D + h * dh;
        double mx = kMaskedScore;
        for (std::size_t j = 0; j < Lk; ++j) {
          const double* kj = kd + (b * Lk + j) * D + h * dh;
          double s = 0.0;
          for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
          s *= sc;
          if (!mask.empty() && !mask[i * Lk + j]) s += kMaskedScore;
          p[j] = s;
          mx = std::max(mx, s);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < Lk; ++j) {
          p[j] = std::exp(p[j] - mx);
          total += p[j];
        }
        double* yi = y.data() + (b * Lq + i) * D + h * dh;
        for (std::size_t j = 0; j < Lk; ++j) {
          p[j] /= total;
          if (p[j] == 0.0) continue;
          const double* vj = vd + (b * Lk + j) * D + h * dh;
          for (std::size_t t = 0; t < dh; ++t) yi[t] += p[j] * vj[t];
        }
      }
    }
  }
  const bool track = tracking({&q, &k, &v});
  Tensor out = make_output({B * Lq, D}, std::move(y), track);
  if (track) {
    active_tape()->record([q, k, v, out, probs = std::move(probs), B, H, Lq, Lk, D,
                           dh, sc]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      const bool need_q = q.requires_grad(), need_k = k.requires_grad(),
                 need_v = v.requires_grad();
      double* gq = need_q ? q.grad().data() : nullptr;
      double* gk = need_k ? k.grad().data() : nullptr;
      double* gv = need_v ? v.grad().data() : nullptr;
      const double* qd = q.data().data();
      const double* kd = k.data().data();
      const double* vd = v.data().data();
      std::vector<double> dp(Lk);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          for (std::size_t i = 0; i < Lq; ++i) {
            const double* p = probs.data() + ((b * H + h) * Lq + i) * Lk;
            const double* gi = g->data() + (b * Lq + i) * D + h * dh;
            double dot = 0.0;
            for (std::size_t j = 0; j < Lk; ++j) {
              if (p[j] == 0.0) {
                dp[j] = 0.0;
                continue;
              }
              const double* vj = vd + (b * Lk + j) * D + h * dh;
              double s = 0.0;
              for (std::size_t t = 0; t < dh; ++t) s += gi[t] * vj[t];
              dp[j] = s;
              dot += s * p[j];
              if (need_v) {
                double* gvj = gv + (b * Lk + j) * D + h * dh;
                for (std::size_t t = 0; t < dh; ++t) gvj[t] += p[j] * gi[t];
              }
            }
            const double* qi = qd + (b * Lq + i) * D + h * dh;
            double* gqi = need_q ? gq + (b * Lq + i) * D + h * dh : nullptr;
            for (std::size_t j = 0; j < Lk; ++j) {
              if (p[j] == 0.0) continue;
              const double ds = p[j] * (dp[j] - dot) * sc;
              const double* kj = kd + (b * Lk + j) * D + h * dh;
              if (need_q) {
                for (std::size_t t = 0; t < dh; ++t) gqi[t] += ds * kj[t];
              }
              if (need_k) {
                double* gkj = gk + (b * Lk + j) * D + h * dh;
                for (std::size_t t = 0; t < dh; ++t) gkj[t] += ds * qi[t];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                     std::span<const double> weights) {
  const std::size_t n = logits.rows(), vocab = logits.cols();
  if (targets.size() != n || weights.size() != n) {
    throw ConfigError("cross_entropy: " + std::to_string(n) + " rows but " +
                      std::to_string(targets.size()) + " targets and " +
                      std::to_string(weights.size()) + " weights");
  }
  double wsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] < 0.0) throw ContractViolation("cross_entropy: negative weight");
    if (targets[i] >= vocab) {
      throw ContractViolation("cross_entropy: target " + std::to_string(targets[i]) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
    wsum += weights[i];
  }
  if (!(wsum > 0.0)) throw ContractViolation("cross_entropy: all-zero weight mask");
  std::vector<double> probs(logits.numel());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * vocab;
    double* p = probs.data() + i * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double total = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      p[j] = std::exp(row[j] - mx);
      total += p[j];
    }
    for (std::size_t j = 0; j < vocab; ++j) p[j] /= total;
    if (weights[i] != 0.0) {
      loss += weights[i] * (mx + std::log(total) - row[targets[i]]);
    }
  }
  loss /= wsum;
  const bool track = tracking({&logits});
  Tensor out = make_output({1}, {loss}, track);
  if (track) {
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    std::vector<double> w(weights.begin(), weights.end());
    active_tape()->record([logits, out, probs = std::move(probs), tg = std::move(tg),
                           w = std::move(w), wsum, n, vocab]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      auto gl = logits.grad();
      for (std::size_t i = 0; i < n; ++i) {
        if (w[i] == 0.0) continue;
        const double f = (*g)[0] * w[i] / wsum;
        for (std::size_t j = 0; j < vocab; ++j) gl[i * vocab + j] += f * probs[i * vocab + j];
        gl[i * vocab + tg[i]] -= f;
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  require_matrix(table, "embedding table");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw ContractViolation("embedding: empty id list");
  std::vector<double> y(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw ContractViolation("embedding: id " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(vocab) + " rows");
    }
    std::copy_n(table.data().data() + ids[i] * d, d, y.data() + i * d);
  }
  const bool track = tracking({&table});
  Tensor out = make_output({ids.size(), d}, std::move(y), track);
  if (track) {
    std::vector<std::size_t> idv(ids.begin(), ids.end());
    active_tape()->record([table, out, idv = std::move(idv), d]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      auto gt = table.grad();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        for (std::size_t t = 0; t < d; ++t) gt[idv[i] * d + t] += (*g)[i * d + t];
      }
    });
  }
  return out;
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse_loss");
  const double n = static_cast<double>(a.numel());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  const bool track = tracking({&a, &b});
  Tensor out = make_output({1}, {acc / n}, track);
  if (track) {
    active_tape()->record([a, b, out, n]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      const double f = 2.0 * (*g)[0] / n;
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += f * (a[i] - b[i]);
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= f * (a[i] - b[i]);
      }
    });
  }
  return out;
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "cosine_similarity");
  constexpr double kTiny = 1e-12;
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> y(m), na(m), nb(m);
  for (std::size_t i = 0; i < m; ++i) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      ab += a[i * n + j] * b[i * n + j];
      aa += a[i * n + j] * a[i * n + j];
      bb += b[i * n + j] * b[i * n + j];
    }
    na[i] = std::max(std::sqrt(aa), kTiny);
    nb[i] = std::max(std::sqrt(bb), kTiny);
    y[i] = ab / (na[i] * nb[i]);
  }
  std::vector<double> cosines = y;
  const bool track = tracking({&a, &b});
  Tensor out = make_output({m}, std::move(y), track);
  if (track) {
    active_tape()->record([a, b, out, m, n, na = std::move(na), nb = std::move(nb),
                           cosines = std::move(cosines)]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      for (std::size_t i = 0; i < m; ++i) {
        const double gi = (*g)[i], c = cosines[i];
        if (a.requires_grad()) {
          auto ga = a.grad();
          for (std::size_t j = 0; j < n; ++j) {
            ga[i * n + j] += gi * (b[i * n + j] / (na[i] * nb[i]) -
                                   c * a[i * n + j] / (na[i] * na[i]));
          }
        }
        if (b.requires_grad()) {
          auto gb = b.grad();
          for (std::size_t j = 0; j < n; ++j) {
            gb[i * n + j] += gi * (a[i * n + j] / (na[i] * nb[i]) -
                                   c * b[i * n + j] / (nb[i] * nb[i]));
          }
        }
      }
    });
  }
  return out;
}

Tensor l2_normalize(const Tensor& x) {
  constexpr double kTiny = 1e-12;
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> y(x.numel()), norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += x[i * n + j] * x[i * n + j];
    norms[i] = std::max(std::sqrt(ss), kTiny);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = x[i * n + j] / norms[i];
  }
  std::vector<double> unit = y;
  const bool track = tracking({&x});
  Tensor out = make_output(x.shape(), std::move(y), track);
  if (track) {
    active_tape()->record([x, out, m, n, norms = std::move(norms),
                           unit = std::move(unit)]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      auto gx = x.grad();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += (*g)[i * n + j] * unit[i * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          gx[i * n + j] += ((*g)[i * n + j] - unit[i * n + j] * dot) / norms[i];
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
  const bool track = tracking({&x});
  Tensor out = make_output({1}, {acc}, track);
  if (track) {
    active_tape()->record([x, out]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      auto gx = x.grad();
      for (auto& v : gx) v += (*g)[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ConfigError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  const bool track = tracking({&x});
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()),
             track);
  if (track) {
    active_tape()->record([x, out]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i];
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t n = x.cols();
  if (count == 0 || begin + count > x.rows()) {
    throw ContractViolation("slice_rows: [" + std::to_string(begin) + ", " +
                            std::to_string(begin + count) + ") outside " +
                            shape_string(x.shape()));
  }
  std::vector<double> y(x.data().begin() + begin * n,
                        x.data().begin() + (begin + count) * n);
  const bool track = tracking({&x});
  Tensor out({count, n}, std::move(y), track);
  if (track) {
    active_tape()->record([x, out, begin, count, n]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      auto gx = x.grad();
      for (std::size_t i = 0; i < count * n; ++i) gx[begin * n + i] += (*g)[i];
    });
  }
  return out;
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t n = x.cols();
  if (rows.empty()) throw ContractViolation("select_rows: empty selection");
  std::vector<double> y(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) throw ContractViolation("select_rows: index out of range");
    std::copy_n(x.data().data() + rows[i] * n, n, y.data() + i * n);
  }
  const bool track = tracking({&x});
  Tensor out({rows.size(), n}, std::move(y), track);
  if (track) {
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    active_tape()->record([x, out, idx = std::move(idx), n]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      auto gx = x.grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t t = 0; t < n; ++t) gx[idx[i] * n + t] += (*g)[i * n + t];
      }
    });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractViolation("concat_rows: nothing to concatenate");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  bool track = false;
  for (const auto& p : parts) {
    if (p.cols() != n) throw ConfigError("concat_rows: column mismatch");
    total += p.rows();
    track = track || p.requires_grad();
  }
  track = track && active_tape() != nullptr;
  std::vector<double> y;
  y.reserve(total * n);
  for (const auto& p : parts) y.insert(y.end(), p.data().begin(), p.data().end());
  Tensor out({total, n}, std::move(y), track);
  if (track) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    active_tape()->record([inputs = std::move(inputs), out]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      std::size_t offset = 0;
      for (auto& p : inputs) {
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += (*g)[offset + i];
        }
        offset += p.numel();
      }
    });
  }
  return out;
}

Tensor straight_through(const Tensor& x, const Tensor& values) {
  require_same_shape(x, values, "straight_through");
  const bool track = tracking({&x});
  Tensor out(x.shape(), std::vector<double>(values.data().begin(), values.data().end()),
             track);
  if (track) {
    active_tape()->record([x, out]() mutable {
      const auto* g = upstream(out);
      if (!g) return;
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i];
    });
  }
  return out;
}

}  // namespace seed::ops
