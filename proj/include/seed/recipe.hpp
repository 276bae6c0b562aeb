#ifndef SEED_RECIPE_HPP_
#define SEED_RECIPE_HPP_

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "seed/config.hpp"
#include "seed/eval.hpp"
#include "seed/lm.hpp"
#include "seed/tokenizer.hpp"

namespace seed::recipe {

enum class LmStage { lora, full, instruct };
std::string to_string(LmStage s);
LmStage parse_lm_stage(const std::string& s);

// A run directory. Every subcommand owns exactly one subdirectory and reads
// the outputs of earlier ones from their fixed places.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path corpus_dir() const { return root / "corpus"; }
  std::filesystem::path config() const { return corpus_dir() / "config.txt"; }
  std::filesystem::path corpus_manifest() const { return corpus_dir() / "manifest.jsonl"; }
  std::filesystem::path frozen() const { return corpus_dir() / "frozen.ckpt"; }
  std::filesystem::path qformer_dir() const { return root / "qformer"; }
  std::filesystem::path qformer() const { return qformer_dir() / "qformer.ckpt"; }
  std::filesystem::path tokenizer_dir() const { return root / "tokenizer"; }
  std::filesystem::path tokenizer() const { return tokenizer_dir() / "tokenizer.ckpt"; }
  std::filesystem::path codes() const { return tokenizer_dir() / "codes.ndjson"; }
  std::filesystem::path lm_dir(LmStage s) const { return root / ("lm_" + to_string(s)); }
  std::filesystem::path lm(LmStage s) const {
    return lm_dir(s) / ("lm_" + to_string(s) + ".ckpt");
  }
  std::filesystem::path eval_dir(const std::string& name) const {
    return root / "eval" / name;
  }
};

// Exclusive ownership of an output directory, held through a `.lock` file
// created with O_EXCL. A second holder gets ConfigError.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct Manifest {
  std::string command;
  std::string config_digest;
  std::map<std::string, std::string> inputs;   // path -> sha256
  std::map<std::string, std::string> outputs;  // path -> sha256
  double wall_seconds = 0.0;
};

// Digests every listed file; wall time is measured by the caller.
void write_manifest(const std::filesystem::path& dir, const Manifest& m);
Manifest read_manifest(const std::filesystem::path& path);

// Reads a checkpoint that must exist and carry this config's digest.
Checkpoint load_for(const std::filesystem::path& path, const RunConfig& config);

// The run's resolved config. gen-corpus writes it; later steps must match.
void check_run_config(const RunLayout& layout, const RunConfig& config);

lm::CodeTable read_code_stream(const std::filesystem::path& path, std::size_t corpus_size);
Pipeline load_pipeline(const RunLayout& layout, const RunConfig& config);
lm::LanguageModel load_lm(const RunLayout& layout, LmStage stage, const RunConfig& config);

// Pretraining documents and instruction samples derived from the corpus.
struct LmData {
  std::vector<lm::MultimodalSequence> train_docs;
  std::vector<lm::MultimodalSequence> val_docs;
  std::vector<lm::MultimodalSequence> instruct_train;
  std::vector<lm::MultimodalSequence> instruct_val;
  std::vector<lm::MultimodalSequence> caption_train;  // captioning half of instruct_train
};
LmData lm_data(const data::Corpus& corpus, const lm::CodeTable& codes, const lm::Vocabulary& vocab,
               const RunConfig& config);

// One function per subcommand. Each locks its output directory, writes a
// manifest there and returns a short human-readable summary.
std::string gen_corpus(const RunLayout& layout, const RunConfig& config);
std::string train_qformer(const RunLayout& layout, const RunConfig& config);
std::string train_tokenizer(const RunLayout& layout, const RunConfig& config);
std::string train_lm(const RunLayout& layout, const RunConfig& config, LmStage stage);
std::string eval_retrieval(const RunLayout& layout, const RunConfig& config);
std::string eval_recon(const RunLayout& layout, const RunConfig& config);
// `compare` is an optional second run (for example the bilateral variant)
// whose instruction-tuned model is scored on the same prompts and seeds.
std::string eval_ablation(const RunLayout& layout, const RunConfig& config,
                          const std::optional<std::filesystem::path>& compare);

// Image file -> visual codes, written as one code-stream line to `out`.
std::string tokenize(const RunLayout& layout, const RunConfig& config,
                     const std::filesystem::path& image, const std::filesystem::path& out);
// Codes -> generation embedding -> nearest corpus image.
std::string detokenize(const RunLayout& layout, const RunConfig& config,
                       const VisualCodes& codes, const std::filesystem::path& out);
// Instruction-tuned model completing "describe" or "generate" prompts.
std::string generate(const RunLayout& layout, const RunConfig& config, const std::string& caption,
                     lm::GenerationMode mode, std::size_t count, std::uint64_t seed,
                     const std::filesystem::path& out);

// Walks qformer -> tokenizer -> lm stages and checks that each checkpoint's
// parent digest is the digest of the file it was trained from. Returns the
// list of broken links (empty when the chain is intact).
std::vector<std::string> check_lineage(const RunLayout& layout);

}  // namespace seed::recipe

#endif  // SEED_RECIPE_HPP_
