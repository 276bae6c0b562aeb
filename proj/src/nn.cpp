#include "seed/nn.hpp"

#include <cmath>

#include "seed/errors.hpp"

namespace seed::nn {

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  Linear l;
  l.weight = randn({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng, true);
  if (with_bias) l.bias = Tensor::zeros({out}, true);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = ops::matmul(x, weight);
  if (bias.defined()) y = ops::add_row(y, bias);
  if (has_lora()) {
    y = ops::add(y, ops::scale(ops::matmul(ops::matmul(x, lora_a), lora_b), lora_scale));
  }
  return y;
}

void Linear::attach_lora(std::size_t rank, double alpha, Rng& rng) {
  if (rank == 0 || rank >= std::min(in(), out())) {
    throw ConfigError("lora rank " + std::to_string(rank) + " must be in [1, " +
                      std::to_string(std::min(in(), out())) + ")");
  }
  lora_a = randn({in(), rank}, 1.0 / std::sqrt(static_cast<double>(in())), rng, true);
  lora_b = Tensor::zeros({rank, out()}, true);
  lora_scale = alpha / static_cast<double>(rank);
}

void Linear::merge_lora() {
  if (!has_lora()) throw ContractViolation("merge_lora: no adapter attached");
  const std::size_t r = lora_a.cols(), n_in = in(), n_out = out();
  auto w = weight.mutable_data();
  for (std::size_t i = 0; i < n_in; ++i) {
    for (std::size_t j = 0; j < n_out; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < r; ++t) acc += lora_a.at(i, t) * lora_b.at(t, j);
      w[i * n_out + j] = round_to_precision(w[i * n_out + j] + lora_scale * acc);
    }
  }
  lora_a = Tensor();
  lora_b = Tensor();
  lora_scale = 0.0;
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

void Linear::collect_lora(const std::string& prefix, ParamList& out) const {
  if (!has_lora()) return;
  out.push_back({prefix + ".lora_a", lora_a});
  out.push_back({prefix + ".lora_b", lora_b});
}

LayerNorm LayerNorm::create(std::size_t d) {
  return {Tensor::filled({d}, 1.0, true), Tensor::zeros({d}, true)};
}

Tensor LayerNorm::operator()(const Tensor& x) const { return ops::layer_norm(x, gain, bias); }

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

FeedForward FeedForward::create(std::size_t d, std::size_t hidden, Rng& rng) {
  FeedForward f;
  f.up = Linear::create(d, hidden, rng);
  f.down = Linear::create(hidden, d, rng);
  return f;
}

Tensor FeedForward::operator()(const Tensor& x) const { return down(ops::gelu(up(x))); }

void FeedForward::collect(const std::string& prefix, ParamList& out) const {
  up.collect(prefix + ".up", out);
  down.collect(prefix + ".down", out);
}

Attention Attention::create(std::size_t d_model, std::size_t d_kv, std::size_t heads,
                            Rng& rng) {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d_model) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  Attention a;
  a.q = Linear::create(d_model, d_model, rng);
  a.k = Linear::create(d_kv, d_model, rng, false);
  a.v = Linear::create(d_kv, d_model, rng);
  a.o = Linear::create(d_model, d_model, rng);
  a.heads = heads;
  return a;
}

Tensor Attention::operator()(const Tensor& x_q, const Tensor& x_kv, const ops::Mask& mask,
                             std::size_t batch, std::size_t query_len,
                             std::size_t key_len) const {
  const ops::AttentionLayout layout{
      .batch = batch, .heads = heads, .query_len = query_len, .key_len = key_len};
  return o(ops::multi_head_attention(q(x_q), k(x_kv), v(x_kv), mask, layout));
}

void Attention::collect(const std::string& prefix, ParamList& out) const {
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
}

SelfBlock SelfBlock::create(std::size_t d, std::size_t heads, std::size_t hidden, Rng& rng) {
  SelfBlock b;
  b.ln1 = LayerNorm::create(d);
  b.attn = Attention::create(d, d, heads, rng);
  b.ln2 = LayerNorm::create(d);
  b.ffn = FeedForward::create(d, hidden, rng);
  return b;
}

Tensor SelfBlock::operator()(const Tensor& x, const ops::Mask& mask, std::size_t batch,
                             std::size_t len) const {
  const Tensor h = ln1(x);
  Tensor y = ops::add(x, attn(h, h, mask, batch, len, len));
  return ops::add(y, ffn(ln2(y)));
}

void SelfBlock::collect(const std::string& prefix, ParamList& out) const {
  ln1.collect(prefix + ".ln1", out);
  attn.collect(prefix + ".attn", out);
  ln2.collect(prefix + ".ln2", out);
  ffn.collect(prefix + ".ffn", out);
}

std::vector<Linear*> SelfBlock::linears() {
  return {&attn.q, &attn.k, &attn.v, &attn.o, &ffn.up, &ffn.down};
}

void set_requires_grad(const ParamList& params, bool value) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.set_requires_grad(value);
  }
}

ParamList deep_copy(const ParamList& params) {
  ParamList out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, p.tensor.clone()});
  return out;
}

std::size_t count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

}  // namespace seed::nn
