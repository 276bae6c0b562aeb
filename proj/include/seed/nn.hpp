#ifndef SEED_NN_HPP_
#define SEED_NN_HPP_

#include <cstddef>
#include <string>
#include <vector>

#include "seed/ops.hpp"
#include "seed/optim.hpp"
#include "seed/random.hpp"
#include "seed/tensor.hpp"

// Layers shared by the Q-Former, the detokenizer decoder and the LM.
namespace seed::nn {

using ParamList = std::vector<NamedTensor>;

// y = x W + b, plus scale * (x A) B when a low-rank adapter is attached.
struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out], undefined when the layer has none
  Tensor lora_a;  // [in x r]
  Tensor lora_b;  // [r x out], zero at attach time
  double lora_scale = 0.0;

  static Linear create(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const;

  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }
  bool has_lora() const { return lora_a.defined(); }
  void attach_lora(std::size_t rank, double alpha, Rng& rng);
  // W <- W + scale * A B; drops the adapter.
  void merge_lora();

  void collect(const std::string& prefix, ParamList& out) const;
  void collect_lora(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm create(std::size_t d);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct FeedForward {
  Linear up;
  Linear down;

  static FeedForward create(std::size_t d, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// The key projection has no bias: softmax is invariant to it.
struct Attention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  static Attention create(std::size_t d_model, std::size_t d_kv, std::size_t heads, Rng& rng);
  // x_q is [batch*query_len x d_model], x_kv is [batch*key_len x d_kv].
  Tensor operator()(const Tensor& x_q, const Tensor& x_kv, const ops::Mask& mask,
                    std::size_t batch, std::size_t query_len, std::size_t key_len) const;
  void collect(const std::string& prefix, ParamList& out) const;
  std::vector<Linear*> projections() { return {&q, &k, &v, &o}; }
};

// Pre-norm self-attention block: x + attn(ln(x)), then x + ffn(ln(x)).
struct SelfBlock {
  LayerNorm ln1;
  Attention attn;
  LayerNorm ln2;
  FeedForward ffn;

  static SelfBlock create(std::size_t d, std::size_t heads, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x, const ops::Mask& mask, std::size_t batch,
                    std::size_t len) const;
  void collect(const std::string& prefix, ParamList& out) const;
  std::vector<Linear*> linears();
};

void set_requires_grad(const ParamList& params, bool value);
// Copies tensor values (not grads) into fresh storage.
ParamList deep_copy(const ParamList& params);
std::size_t count(const ParamList& params);

}  // namespace seed::nn

#endif  // SEED_NN_HPP_
