#ifndef SEED_EVAL_HPP_
#define SEED_EVAL_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "seed/lm.hpp"
#include "seed/retrieval.hpp"
#include "seed/tokenizer.hpp"

namespace seed::eval {

enum class RetrievalSource { embedding, code };
std::string to_string(RetrievalSource s);

struct RetrievalReport {
  Recall image_to_text;
  Recall text_to_image;
  // Arithmetic mean of the six recalls.
  double r_mean() const;
};

// Images are scored by their final causal embedding, or by its reconstruction
// from the visual codes, in both cases through the contrastive projection.
// The gallery is the split itself; train and galleries under 20 items are
// rejected.
RetrievalReport eval_retrieval(const Pipeline& pipeline, const data::Corpus& corpus,
                               data::Split split, RetrievalSource source);

// Expected R@1 and its standard deviation when rankings are uniformly random.
struct ChanceLevel {
  double mean = 0.0;
  double sigma = 0.0;
};
ChanceLevel chance_r1(const data::Corpus& corpus, data::Split split);

struct ReconstructionReport {
  double reference_score = 0.0;  // mean cosine, generation embedding vs reference
  double upper_bound = 0.0;      // each reference embedding against itself
  std::size_t count = 0;
};
ReconstructionReport eval_reconstruction(const Pipeline& pipeline, const data::Corpus& corpus,
                                         data::Split split);

struct WellformednessReport {
  std::size_t successes = 0;
  std::size_t total = 0;
  std::size_t without_block = 0;
  std::map<std::size_t, std::size_t> block_lengths;  // length -> count
  double fraction() const;
};

// Generation g prompts with captions[g % size] and samples with an Rng seeded
// from (seed, g), so two models see identical prompt and seed pairs.
WellformednessReport eval_wellformedness(const lm::LanguageModel& model,
                                         const std::vector<data::Caption>& captions,
                                         lm::GenerationMode mode, std::size_t n,
                                         const RunConfig& config, std::uint64_t seed);

// Sequences "BOS BOI codes EOI caption" with the mask on the caption only.
std::vector<lm::MultimodalSequence> captioning_sequences(const data::Corpus& corpus,
                                                         data::Split split,
                                                         const lm::CodeTable& codes,
                                                         const lm::Vocabulary& vocab);

struct AblationEntry {
  std::string variant;
  std::string metric;
  double value = 0.0;
  std::uint64_t seed = 0;
  std::string config_digest;
};

struct TwoStageInputs {
  const data::Corpus* corpus = nullptr;
  const Pipeline* pipeline = nullptr;
  const lm::CodeTable* codes = nullptr;
  std::vector<lm::MultimodalSequence> held_out;  // packed val documents
  data::Split split = data::Split::val;
};

// Held-out lm_loss, caption next-token accuracy and the reference score of
// greedy text-to-image generations, for the LoRA-only and the merged model.
// Checkpoints with different config digests are a contract violation.
std::vector<AblationEntry> eval_two_stage(const Checkpoint& lora, const Checkpoint& full,
                                          const RunConfig& config, const TwoStageInputs& in);

// Mean cosine between the generation embedding of greedily generated image
// blocks (prompt "BOS caption") and the reference embedding of each image.
double generation_reference_score(const lm::LanguageModel& model, const Pipeline& pipeline,
                                  const data::Corpus& corpus, data::Split split);

// One JSON object per line.
std::string retrieval_ndjson(const RetrievalReport& r, RetrievalSource source,
                             const std::string& config_digest);
std::string reconstruction_ndjson(const ReconstructionReport& r, const std::string& label,
                                  const std::string& config_digest);
std::string wellformedness_ndjson(const WellformednessReport& r, const std::string& label,
                                  const std::string& config_digest);
std::string ablation_ndjson(const std::vector<AblationEntry>& entries);

// Plain-text tables for terminals and logs.
std::string retrieval_table(const std::vector<std::pair<std::string, RetrievalReport>>& rows);
std::string ablation_table(const std::vector<AblationEntry>& entries);
std::string wellformedness_table(
    const std::vector<std::pair<std::string, WellformednessReport>>& rows);

// Standalone SVG charts.
void write_recall_svg(const std::filesystem::path& path,
                      const std::vector<std::pair<std::string, RetrievalReport>>& rows);
void write_histogram_svg(const std::filesystem::path& path, const std::string& title,
                         const std::map<std::size_t, std::size_t>& counts);

}  // namespace seed::eval

#endif  // SEED_EVAL_HPP_
