#ifndef SEED_OPS_HPP_
#define SEED_OPS_HPP_

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "seed/tensor.hpp"

// Differentiable tensor operations. Every op records its adjoint on the
// thread's active tape when one is installed and any input requires a
// gradient; otherwise it is a plain forward evaluation.
namespace seed::ops {

// Row-major [query_len x key_len] table; nonzero means the key is visible.
using Mask = std::vector<std::uint8_t>;

Mask causal_mask(std::size_t n);
Mask full_mask(std::size_t query_len, std::size_t key_len);

// Additive value standing in for -inf on disallowed attention scores.
inline constexpr double kMaskedScore = -1e30;

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// Adds bias[cols] to every row of x.
Tensor add_row(const Tensor& x, const Tensor& bias);
// x / s for a one-element tensor s.
Tensor div_by_scalar(const Tensor& x, const Tensor& s);

// tanh approximation.
Tensor gelu(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// softmax(q k^T / sqrt(d) + mask) v for a single head.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const Mask& mask);

struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t heads = 1;
  std::size_t query_len = 0;
  std::size_t key_len = 0;
};

// Batched multi-head attention. q is [batch*query_len x D], k and v are
// [batch*key_len x D]; head h uses columns [h*D/heads, (h+1)*D/heads). The
// mask is shared by every batch element and head; empty means unrestricted.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Mask& mask, const AttentionLayout& layout);

// Mask-weighted mean of -log softmax(logits_i)[target_i].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                     std::span<const double> weights);

// Row gather; the adjoint scatter-adds into the table.
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

Tensor mse_loss(const Tensor& a, const Tensor& b);
// Per-row cosine similarity, shape [rows].
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
Tensor l2_normalize(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor concat_rows(std::span<const Tensor> parts);

// Forward value is `values`; the adjoint passes straight through to x.
Tensor straight_through(const Tensor& x, const Tensor& values);

}  // namespace seed::ops

#endif  // SEED_OPS_HPP_
