#ifndef SEED_QFORMER_HPP_
#define SEED_QFORMER_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "seed/checkpoint.hpp"
#include "seed/config.hpp"
#include "seed/nn.hpp"
#include "seed/retrieval.hpp"
#include "seed/stage_io.hpp"
#include "seed/toy_data.hpp"

namespace seed {

// Frozen stand-in for a pretrained vision encoder: each p x p RGB patch,
// centered at 0.5, goes through a fixed random projection and picks up a fixed
// position row. Output rows are in raster order (row * cols + col).
class PatchEmbedder {
 public:
  PatchEmbedder() = default;
  static PatchEmbedder create(std::uint64_t seed, std::size_t image_size,
                              std::size_t patch_size, std::size_t d_patch);

  // [P x d_patch]; ConfigError if the image does not tile into patches.
  Tensor encode(const data::ToyImage& image) const;

  std::size_t num_patches() const { return position_.rows(); }
  std::size_t dim() const { return weight_.cols(); }
  std::size_t patch_size() const { return patch_size_; }

  void store(Checkpoint& ckpt) const;
  static PatchEmbedder load(const Checkpoint& ckpt);
  nn::ParamList parameters() const;

 private:
  std::size_t patch_size_ = 0;
  Tensor weight_;    // [p*p*3 x d_patch]
  Tensor position_;  // [P x d_patch]
};

// Number of patches for an image side and patch side; ConfigError when the
// side is not a multiple of the patch.
std::size_t patch_count(std::size_t image_size, std::size_t patch_size);

struct QFormerShape {
  std::size_t num_queries = 8;
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t d_patch = 64;
  std::size_t d_ref = 32;

  static QFormerShape from(const RunConfig& config);
};

// Pre-norm: query self-attention, cross-attention to patches, feed-forward.
struct QFormerBlock {
  nn::LayerNorm ln_self;
  nn::Attention self_attn;
  nn::LayerNorm ln_cross;
  nn::Attention cross_attn;
  nn::LayerNorm ln_ffn;
  nn::FeedForward ffn;
};

struct QFormer {
  QFormerShape shape;
  Tensor queries;  // [Q x d]
  std::vector<QFormerBlock> blocks;
  nn::LayerNorm ln_out;
  nn::Linear projection;  // d -> d_ref, applied to the final query only
  Tensor temperature;     // [1]

  static constexpr double kMinTemperature = 0.01;
  static constexpr double kMaxTemperature = 1.0;

  static QFormer create(const QFormerShape& shape, double temperature_init, Rng& rng);

  // patches is [batch*P x d_patch]; returns causal embeddings [batch*Q x d].
  // Causal mode lets query i attend to queries 0..i; bilateral to all.
  Tensor forward(const Tensor& patches, std::size_t batch, AttentionMode mode) const;
  // Row Q-1 of each batch element, projected and L2-normalized: [batch x d_ref].
  Tensor project(const Tensor& embeds, std::size_t batch) const;

  void clamp_temperature();
  nn::ParamList parameters() const;
  void store(Checkpoint& ckpt) const;
  static QFormer load(const Checkpoint& ckpt, const QFormerShape& shape);
};

// Symmetric InfoNCE over the [B x B] similarity matrix divided by the
// temperature. Row i of image and text is the matched pair.
Tensor contrastive_loss(const Tensor& image, const Tensor& text, const Tensor& temperature);

// Stacks the given rows of per-image patch grids into [n*P x d_patch].
Tensor stack_grids(const std::vector<Tensor>& grids, std::span<const std::size_t> items);
Tensor text_features(const data::ReferenceEmbedder& embedder, const data::Corpus& corpus,
                     std::span<const std::size_t> items);

// Causal embeddings [n*Q x d] of the listed items, evaluated without a tape.
Tensor embed_items(const QFormer& model, const std::vector<Tensor>& grids,
                   std::span<const std::size_t> items, AttentionMode mode);

// Image-to-text recall over a gallery of the items' own captions; an item is
// relevant when its caption token sequence equals the query's.
Recall image_to_text_recall(const Tensor& image, const Tensor& text, const data::Corpus& corpus,
                            std::span<const std::size_t> items);
Recall text_to_image_recall(const Tensor& image, const Tensor& text, const data::Corpus& corpus,
                            std::span<const std::size_t> items);

struct Stage1Epoch {
  std::size_t epoch = 0;
  double loss = 0.0;
  double r1 = 0.0;
  double r5 = 0.0;
  double temperature = 0.0;
};

struct Stage1Result {
  QFormer model;
  std::vector<Stage1Epoch> metrics;
};

Stage1Result train_stage1(const data::Corpus& corpus, const data::ReferenceEmbedder& embedder,
                          const PatchEmbedder& patches, const RunConfig& config,
                          const StageOutput& output = {});

std::string stage1_metrics_line(const Stage1Epoch& m);

}  // namespace seed

#endif  // SEED_QFORMER_HPP_
