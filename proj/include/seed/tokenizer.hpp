#ifndef SEED_TOKENIZER_HPP_
#define SEED_TOKENIZER_HPP_

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "seed/checkpoint.hpp"
#include "seed/config.hpp"
#include "seed/nn.hpp"
#include "seed/qformer.hpp"
#include "seed/stage_io.hpp"
#include "seed/toy_data.hpp"

namespace seed {

using VisualCodes = std::vector<std::size_t>;

// VQ codebook with exponential-moving-average updates. An update runs in two
// phases: accumulate() adds this batch's assignment counts and vector sums
// (so the count total grows by exactly rows-assigned), then decay() scales
// both accumulators and moves every used code to sums / counts.
struct Codebook {
  Tensor codes;                  // [K x d]
  std::vector<double> ema_counts;  // [K]
  std::vector<double> ema_sums;    // [K x d]

  static Codebook create(std::size_t size, std::size_t dim, Rng& rng);
  std::size_t size() const { return codes.rows(); }
  std::size_t dim() const { return codes.cols(); }

  void accumulate(const Tensor& x, const VisualCodes& assignment);
  void decay(double rate);
  // Resets code k to `value` and clears both accumulators for it.
  void revive(std::size_t k, std::span<const double> value);

  void store(Checkpoint& ckpt) const;
  static Codebook load(const Checkpoint& ckpt);
};

// Nearest code per row: lowest squared Euclidean distance (or highest cosine),
// ties to the lowest index.
VisualCodes nearest_codes(const Tensor& x, const Tensor& codes,
                          CodebookDistance distance = CodebookDistance::euclidean);

struct Quantized {
  VisualCodes codes;
  Tensor values;  // selected code rows; gradients pass straight through to x
};

Quantized quantize(const Tensor& x, const Codebook& codebook,
                   CodebookDistance distance = CodebookDistance::euclidean);

// Bilateral Transformer decoder back to causal embeddings, plus the MLP that
// maps the quantized block to a single generation embedding.
struct Detokenizer {
  std::size_t num_queries = 0;
  GenInput gen_input = GenInput::flatten;
  Tensor positions;  // [Q x d]
  std::vector<nn::SelfBlock> blocks;
  nn::LayerNorm ln_out;
  nn::Linear out;
  nn::Linear gen_up;
  nn::Linear gen_down;

  static Detokenizer create(const RunConfig& config, Rng& rng);

  // quantized is [batch*Q x d]; returns [batch*Q x d].
  Tensor reconstruct(const Tensor& quantized, std::size_t batch) const;
  // Unit rows [batch x d_ref].
  Tensor generation_embed(const Tensor& quantized, std::size_t batch) const;

  nn::ParamList parameters() const;
  void store(Checkpoint& ckpt) const;
  static Detokenizer load(const Checkpoint& ckpt, const RunConfig& config);
};

// 1 - mean rowwise cosine similarity.
Tensor recon_loss(const Tensor& output, const Tensor& target);
// Mean squared error over coordinates.
Tensor gen_loss(const Tensor& generated, const Tensor& target);

// exp(entropy) of a usage histogram; 0 for an empty histogram.
double perplexity(std::span<const std::size_t> usage);

struct Stage2Epoch {
  std::size_t epoch = 0;
  double loss = 0.0;
  double recon = 0.0;
  double gen = 0.0;
  double commit = 0.0;
  double perplexity = 0.0;
  std::size_t revived = 0;
  double val_recon_cosine = 0.0;
  double val_reference_score = 0.0;
  bool collapse_warning = false;
};

std::string stage2_metrics_line(const Stage2Epoch& m);

struct Stage2Options {
  std::optional<Codebook> initial_codebook;
};

struct Stage2Result {
  Codebook codebook;
  Detokenizer detokenizer;
  QFormer qformer;  // differs from the input only when tune_qformer is set
  double initial_perplexity = 0.0;
  std::vector<Stage2Epoch> metrics;
};

Stage2Result train_stage2(const data::Corpus& corpus, const data::ReferenceEmbedder& embedder,
                          const PatchEmbedder& patches, const QFormer& qformer,
                          const RunConfig& config, const StageOutput& output = {},
                          const Stage2Options& options = {});

// Reference embeddings of a set of images, searched by cosine.
struct Gallery {
  std::vector<std::size_t> ids;
  std::vector<std::vector<double>> embeddings;

  static Gallery build(const data::ReferenceEmbedder& embedder, const data::Corpus& corpus,
                       std::span<const std::size_t> items);
};

struct Detokenized {
  std::vector<double> generation;
  std::size_t image_id = 0;
};

// Everything the tokenize and detokenize paths read, all frozen.
struct Pipeline {
  RunConfig config;
  data::ReferenceEmbedder embedder;
  PatchEmbedder patches;
  QFormer qformer;
  Codebook codebook;
  Detokenizer detokenizer;

  VisualCodes tokenize(const data::ToyImage& image) const;
  std::vector<VisualCodes> tokenize_all(const data::Corpus& corpus,
                                        std::span<const std::size_t> items) const;
  // Highest cosine with the generation embedding, ties to the lowest id.
  Detokenized detokenize(const VisualCodes& codes, const Gallery& gallery) const;
  // Quantized code rows for a code sequence, [Q x d].
  Tensor code_values(const VisualCodes& codes) const;
};

// One JSON object per line: {"sample": id, "codes": [...]}.
void write_code_stream(const std::filesystem::path& path, std::span<const std::size_t> items,
                       const std::vector<VisualCodes>& codes);

}  // namespace seed

#endif  // SEED_TOKENIZER_HPP_
