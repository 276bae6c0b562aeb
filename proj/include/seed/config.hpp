#ifndef SEED_CONFIG_HPP_
#define SEED_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <string>

#include "seed/tensor.hpp"

namespace seed {

enum class AttentionMode { causal, bilateral };
enum class CodebookUpdate { ema, loss };
enum class CodebookDistance { euclidean, cosine };
enum class GenInput { flatten, mean };

std::string to_string(AttentionMode mode);

// Every tunable of the pipeline. Stored on disk as `key = value` lines; see
// parse_config(). Defaults are the desk-scale recipe.
struct RunConfig {
  // data
  std::uint64_t seed = 1;
  std::uint64_t corpus_seed = 7;
  std::size_t corpus_size = 512;
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  double synonym_prob = 0.0;
  std::uint64_t embedder_seed = 1234;
  std::size_t d_patch = 64;
  std::size_t d_ref = 32;

  // causal Q-Former
  std::size_t num_queries = 8;
  std::size_t qformer_dim = 64;
  std::size_t qformer_layers = 2;
  std::size_t qformer_heads = 4;
  AttentionMode attention_mode = AttentionMode::causal;
  double temperature_init = 0.07;
  std::size_t stage1_epochs = 30;
  std::size_t stage1_batch = 32;
  double stage1_lr = 1e-3;

  // tokenizer
  std::size_t codebook_size = 256;
  std::size_t decoder_layers = 2;
  std::size_t decoder_heads = 4;
  std::size_t gen_hidden = 256;
  GenInput gen_input = GenInput::flatten;
  double beta = 0.25;
  double lambda_gen = 1.0;
  double ema_decay = 0.99;
  CodebookUpdate codebook_update = CodebookUpdate::ema;
  CodebookDistance codebook_distance = CodebookDistance::euclidean;
  std::size_t dead_code_threshold = 1;
  bool tune_qformer = false;
  bool strict = false;
  std::size_t stage2_epochs = 60;
  std::size_t stage2_batch = 32;
  double stage2_lr = 2e-3;

  // language model
  std::size_t lm_dim = 64;
  std::size_t lm_layers = 2;
  std::size_t lm_heads = 4;
  std::size_t max_len = 64;
  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  std::size_t instruct_lora_rank = 8;
  std::size_t n_docs = 1024;
  std::size_t images_per_doc_min = 1;
  std::size_t images_per_doc_max = 3;
  std::size_t lm_batch = 16;
  std::size_t text_warmup_epochs = 6;
  std::size_t lora_epochs = 10;
  std::size_t full_epochs = 4;
  std::size_t instruct_epochs = 10;
  double text_warmup_lr = 3e-3;
  double lr = 3e-4;
  double lora_lr = 3e-3;
  double instruct_lr = 3e-3;

  // optimizer (AdamW, cosine decay)
  double weight_decay = 0.05;
  double warmup_ratio = 0.03;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-6;

  // generation and evaluation
  double sample_temperature = 1.0;
  std::size_t top_k = 0;
  std::size_t max_new = 16;
  std::size_t n_generations = 500;

  Precision precision = Precision::f32;
};

// Parses `key = value` text. Blank lines and `#` comments are ignored.
// Unknown keys, duplicates, and malformed values raise ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// Canonical text form listing every key; parse_config(serialize(c)) == c.
std::string serialize_config(const RunConfig& config);
// SHA-256 of the canonical form, lowercase hex.
std::string config_digest(const RunConfig& config);

// Cross-field consistency (divisibility, ranges). Throws ConfigError.
void validate(const RunConfig& config);

}  // namespace seed

#endif  // SEED_CONFIG_HPP_
