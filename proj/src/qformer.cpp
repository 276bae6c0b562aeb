#include "seed/qformer.hpp"

#include <cmath>
#include <numeric>

#include <json.hpp>

#include "seed/errors.hpp"
#include "seed/ops.hpp"

namespace seed {

namespace {

constexpr std::uint64_t kStage1Tag = 0x5747e1;

std::size_t ffn_hidden(std::size_t d) { return 4 * d; }

}  // namespace

std::size_t patch_count(std::size_t image_size, std::size_t patch_size) {
  if (patch_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image side " + std::to_string(image_size) +
                      " is not divisible by patch size " + std::to_string(patch_size));
  }
  const std::size_t side = image_size / patch_size;
  return side * side;
}

PatchEmbedder PatchEmbedder::create(std::uint64_t seed, std::size_t image_size,
                                    std::size_t patch_size, std::size_t d_patch) {
  const std::size_t P = patch_count(image_size, patch_size);
  const std::size_t in = patch_size * patch_size * 3;
  Rng rng(mix_seed(seed, 0x9a7c4));
  PatchEmbedder e;
  e.patch_size_ = patch_size;
  e.weight_ = randn({in, d_patch}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  e.position_ = randn({P, d_patch}, 0.5, rng);
  return e;
}

Tensor PatchEmbedder::encode(const data::ToyImage& image) const {
  if (image.width != image.height) {
    throw ConfigError("patch encoder needs square images, got " + std::to_string(image.width) +
                      "x" + std::to_string(image.height));
  }
  const std::size_t p = patch_size_;
  const std::size_t P = patch_count(image.width, p);
  if (P != num_patches()) {
    throw ConfigError("image yields " + std::to_string(P) + " patches, encoder expects " +
                      std::to_string(num_patches()));
  }
  const std::size_t side = image.width / p, d = dim(), in = p * p * 3;
  std::vector<double> patch(in), out(P * d);
  const auto w = weight_.data();
  for (std::size_t py = 0; py < side; ++py) {
    for (std::size_t px = 0; px < side; ++px) {
      std::size_t t = 0;
      for (std::size_t y = 0; y < p; ++y) {
        for (std::size_t x = 0; x < p; ++x) {
          for (std::size_t c = 0; c < 3; ++c) {
            patch[t++] = static_cast<double>(image.at(py * p + y, px * p + x, c)) - 0.5;
          }
        }
      }
      const std::size_t row = py * side + px;
      double* o = out.data() + row * d;
      for (std::size_t j = 0; j < d; ++j) o[j] = position_.at(row, j);
      for (std::size_t i = 0; i < in; ++i) {
        for (std::size_t j = 0; j < d; ++j) o[j] += patch[i] * w[i * d + j];
      }
    }
  }
  for (auto& v : out) v = static_cast<double>(static_cast<float>(v));
  return Tensor({P, d}, std::move(out));
}

void PatchEmbedder::store(Checkpoint& ckpt) const {
  ckpt.add("patch.weight", weight_);
  ckpt.add("patch.position", position_);
}

PatchEmbedder PatchEmbedder::load(const Checkpoint& ckpt) {
  PatchEmbedder e;
  e.weight_ = ckpt.get("patch.weight").clone();
  e.position_ = ckpt.get("patch.position").clone();
  const double side = std::sqrt(static_cast<double>(e.weight_.rows()) / 3.0);
  e.patch_size_ = static_cast<std::size_t>(std::lround(side));
  if (e.patch_size_ * e.patch_size_ * 3 != e.weight_.rows()) {
    throw LoadError("patch.weight has " + std::to_string(e.weight_.rows()) +
                    " rows, not 3*p*p");
  }
  return e;
}

nn::ParamList PatchEmbedder::parameters() const {
  return {{"patch.weight", weight_}, {"patch.position", position_}};
}

QFormerShape QFormerShape::from(const RunConfig& config) {
  return {.num_queries = config.num_queries,
          .dim = config.qformer_dim,
          .layers = config.qformer_layers,
          .heads = config.qformer_heads,
          .d_patch = config.d_patch,
          .d_ref = config.d_ref};
}

QFormer QFormer::create(const QFormerShape& shape, double temperature_init, Rng& rng) {
  if (shape.num_queries == 0) throw ConfigError("qformer needs at least one query");
  QFormer m;
  m.shape = shape;
  m.queries = randn({shape.num_queries, shape.dim}, 1.0, rng, true);
  for (std::size_t l = 0; l < shape.layers; ++l) {
    QFormerBlock b;
    b.ln_self = nn::LayerNorm::create(shape.dim);
    b.self_attn = nn::Attention::create(shape.dim, shape.dim, shape.heads, rng);
    b.ln_cross = nn::LayerNorm::create(shape.dim);
    b.cross_attn = nn::Attention::create(shape.dim, shape.d_patch, shape.heads, rng);
    b.ln_ffn = nn::LayerNorm::create(shape.dim);
    b.ffn = nn::FeedForward::create(shape.dim, ffn_hidden(shape.dim), rng);
    m.blocks.push_back(std::move(b));
  }
  m.ln_out = nn::LayerNorm::create(shape.dim);
  m.projection = nn::Linear::create(shape.dim, shape.d_ref, rng);
  m.temperature = Tensor::scalar(static_cast<float>(temperature_init), true);
  m.clamp_temperature();
  return m;
}

Tensor QFormer::forward(const Tensor& patches, std::size_t batch, AttentionMode mode) const {
  const std::size_t Q = shape.num_queries;
  if (batch == 0 || patches.rows() % batch != 0 || patches.cols() != shape.d_patch) {
    throw ConfigError("qformer: patch block " + shape_string(patches.shape()) +
                      " does not fit batch " + std::to_string(batch) + " with d_patch " +
                      std::to_string(shape.d_patch));
  }
  const std::size_t P = patches.rows() / batch;
  std::vector<std::size_t> rows(batch * Q);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < Q; ++i) rows[b * Q + i] = i;
  }
  const ops::Mask self_mask = mode == AttentionMode::causal ? ops::causal_mask(Q) : ops::Mask{};
  Tensor h = ops::select_rows(queries, rows);
  for (const auto& blk : blocks) {
    const Tensor a = blk.ln_self(h);
    h = ops::add(h, blk.self_attn(a, a, self_mask, batch, Q, Q));
    h = ops::add(h, blk.cross_attn(blk.ln_cross(h), patches, {}, batch, Q, P));
    h = ops::add(h, blk.ffn(blk.ln_ffn(h)));
  }
  return ln_out(h);
}

Tensor QFormer::project(const Tensor& embeds, std::size_t batch) const {
  const std::size_t Q = shape.num_queries;
  if (embeds.rows() != batch * Q) {
    throw ConfigError("project: expected " + std::to_string(batch * Q) + " rows, got " +
                      std::to_string(embeds.rows()));
  }
  std::vector<std::size_t> last(batch);
  for (std::size_t b = 0; b < batch; ++b) last[b] = b * Q + Q - 1;
  return ops::l2_normalize(projection(ops::select_rows(embeds, last)));
}

void QFormer::clamp_temperature() {
  auto t = temperature.mutable_data();
  t[0] = std::clamp(t[0], kMinTemperature, kMaxTemperature);
}

nn::ParamList QFormer::parameters() const {
  nn::ParamList out;
  out.push_back({"qformer.queries", queries});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "qformer.block" + std::to_string(l);
    b.ln_self.collect(p + ".ln_self", out);
    b.self_attn.collect(p + ".self_attn", out);
    b.ln_cross.collect(p + ".ln_cross", out);
    b.cross_attn.collect(p + ".cross_attn", out);
    b.ln_ffn.collect(p + ".ln_ffn", out);
    b.ffn.collect(p + ".ffn", out);
  }
  ln_out.collect("qformer.ln_out", out);
  projection.collect("qformer.projection", out);
  out.push_back({"qformer.temperature", temperature});
  return out;
}

void QFormer::store(Checkpoint& ckpt) const { store_parameters(ckpt, parameters()); }

QFormer QFormer::load(const Checkpoint& ckpt, const QFormerShape& shape) {
  Rng rng(0);
  QFormer m = create(shape, 0.07, rng);
  restore_parameters(ckpt, m.parameters());
  return m;
}

Tensor contrastive_loss(const Tensor& image, const Tensor& text, const Tensor& temperature) {
  const std::size_t B = image.rows();
  if (B < 2) throw ContractViolation("contrastive loss needs a batch of at least 2");
  if (text.rows() != B || text.cols() != image.cols()) {
    throw ConfigError("contrastive loss: image " + shape_string(image.shape()) + " vs text " +
                      shape_string(text.shape()));
  }
  if (temperature.item() <= 0.0) throw ContractViolation("temperature must be positive");
  std::vector<std::size_t> targets(B);
  std::iota(targets.begin(), targets.end(), 0);
  const std::vector<double> weights(B, 1.0);
  const Tensor logits = ops::div_by_scalar(ops::matmul(image, ops::transpose(text)), temperature);
  const Tensor i2t = ops::cross_entropy(logits, targets, weights);
  const Tensor t2i = ops::cross_entropy(ops::transpose(logits), targets, weights);
  return ops::scale(ops::add(i2t, t2i), 0.5);
}

Tensor stack_grids(const std::vector<Tensor>& grids, std::span<const std::size_t> items) {
  if (items.empty()) throw ContractViolation("stack_grids: no items");
  const std::size_t P = grids.at(items[0]).rows(), d = grids.at(items[0]).cols();
  std::vector<double> data(items.size() * P * d);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto src = grids.at(items[i]).data();
    std::copy(src.begin(), src.end(), data.begin() + static_cast<std::ptrdiff_t>(i * P * d));
  }
  return Tensor({items.size() * P, d}, std::move(data));
}

Tensor text_features(const data::ReferenceEmbedder& embedder, const data::Corpus& corpus,
                     std::span<const std::size_t> items) {
  const std::size_t d = embedder.dim();
  std::vector<double> data;
  data.reserve(items.size() * d);
  for (auto i : items) {
    const auto v = embedder.embed_text(corpus.samples.at(i).caption);
    data.insert(data.end(), v.begin(), v.end());
  }
  return Tensor({items.size(), d}, std::move(data));
}

Tensor embed_items(const QFormer& model, const std::vector<Tensor>& grids,
                   std::span<const std::size_t> items, AttentionMode mode) {
  constexpr std::size_t kChunk = 64;
  std::vector<Tensor> parts;
  for (std::size_t s = 0; s < items.size(); s += kChunk) {
    const auto chunk = items.subspan(s, std::min(kChunk, items.size() - s));
    parts.push_back(model.forward(stack_grids(grids, chunk), chunk.size(), mode));
  }
  return parts.size() == 1 ? parts[0] : ops::concat_rows(parts);
}

namespace {

std::vector<std::vector<double>> similarity(const Tensor& a, const Tensor& b) {
  const Tensor s = ops::matmul(a, ops::transpose(b));
  std::vector<std::vector<double>> out(s.rows(), std::vector<double>(s.cols()));
  for (std::size_t i = 0; i < s.rows(); ++i) {
    for (std::size_t j = 0; j < s.cols(); ++j) out[i][j] = s.at(i, j);
  }
  return out;
}

}  // namespace

Recall image_to_text_recall(const Tensor& image, const Tensor& text, const data::Corpus& corpus,
                            std::span<const std::size_t> items) {
  return recall_at_k(similarity(image, text), [&](std::size_t q, std::size_t g) {
    return corpus.samples[items[q]].caption == corpus.samples[items[g]].caption;
  });
}

Recall text_to_image_recall(const Tensor& image, const Tensor& text, const data::Corpus& corpus,
                            std::span<const std::size_t> items) {
  return recall_at_k(similarity(text, image), [&](std::size_t q, std::size_t g) {
    return corpus.samples[items[q]].caption == corpus.samples[items[g]].caption;
  });
}

std::string stage1_metrics_line(const Stage1Epoch& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["loss"] = m.loss;
  j["r1"] = m.r1;
  j["r5"] = m.r5;
  j["temperature"] = m.temperature;
  return j.dump();
}

Stage1Result train_stage1(const data::Corpus& corpus, const data::ReferenceEmbedder& embedder,
                          const PatchEmbedder& patches, const RunConfig& config,
                          const StageOutput& output) {
  const auto train = corpus.indices(data::Split::train);
  const auto val = corpus.indices(data::Split::val);
  if (train.size() < 2) throw ContractViolation("stage 1 needs at least 2 training pairs");
  PrecisionScope precision(config.precision);

  std::vector<Tensor> grids;
  grids.reserve(corpus.samples.size());
  for (const auto& s : corpus.samples) grids.push_back(patches.encode(s.image));

  Rng rng(mix_seed(config.seed, kStage1Tag));
  Stage1Result result{QFormer::create(QFormerShape::from(config), config.temperature_init, rng),
                      {}};
  QFormer& model = result.model;
  const auto params = model.parameters();
  AdamW opt(optimizer_slots(params), adam_options(config));

  const std::size_t B = std::max<std::size_t>(2, config.stage1_batch);
  const std::size_t steps_per_epoch = (train.size() + B - 1) / B;
  const std::size_t total = steps_per_epoch * config.stage1_epochs;
  if (!output.dir.empty()) {
    std::filesystem::create_directories(output.dir);
    std::filesystem::remove(output.dir / "stage1_metrics.ndjson");
  }

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.stage1_epochs; ++epoch) {
    const auto order = epoch_order(train, config.seed, kStage1Tag, epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += B) {
      std::size_t n = std::min(B, order.size() - s);
      if (n < 2) continue;
      const std::span<const std::size_t> batch(order.data() + s, n);
      Tape tape(config.precision);
      TapeScope scope(tape);
      const Tensor emb = model.forward(stack_grids(grids, batch), n, config.attention_mode);
      const Tensor loss = contrastive_loss(model.project(emb, n),
                                           text_features(embedder, corpus, batch),
                                           model.temperature);
      if (!std::isfinite(loss.item())) {
        raise_nonfinite(output, "stage1", epoch, step, batch, loss.item());
      }
      opt.zero_grad();
      tape.backward(loss);
      opt.step(cosine_lr(step, total, config.stage1_lr, config.warmup_ratio));
      model.clamp_temperature();
      loss_sum += loss.item();
      ++batches;
      ++step;
    }
    Stage1Epoch m;
    m.epoch = epoch;
    m.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    m.temperature = model.temperature.item();
    if (val.size() >= 10) {
      const Tensor img = model.project(embed_items(model, grids, val, config.attention_mode),
                                       val.size());
      const auto r = image_to_text_recall(img, text_features(embedder, corpus, val), corpus, val);
      m.r1 = r.r1;
      m.r5 = r.r5;
    }
    result.metrics.push_back(m);
    if (!output.dir.empty()) {
      append_line(output.dir / "stage1_metrics.ndjson", stage1_metrics_line(m));
      Checkpoint ckpt = stage_checkpoint(config, "stage1", output.parent_digest);
      ckpt.metadata["epoch"] = std::to_string(epoch);
      model.store(ckpt);
      save_checkpoint(ckpt, output.dir / epoch_checkpoint_name("qformer", epoch));
    }
  }
  return result;
}

}  // namespace seed
