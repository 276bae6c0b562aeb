#ifndef SEED_LM_HPP_
#define SEED_LM_HPP_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "seed/checkpoint.hpp"
#include "seed/config.hpp"
#include "seed/nn.hpp"
#include "seed/stage_io.hpp"
#include "seed/tokenizer.hpp"
#include "seed/toy_data.hpp"

namespace seed::lm {

enum class Special : std::size_t { pad, bos, eos, boi, eoi, user, assistant };
inline constexpr std::size_t kNumSpecials = 7;

enum class TokenKind : std::uint8_t { text, visual, special };

// Ids: text [0, T), visual codes [T, T+K), then the specials in enum order.
// The text-only base model has K = 0.
struct Vocabulary {
  std::size_t text = 0;
  std::size_t codes = 0;

  std::size_t size() const { return text + codes + kNumSpecials; }
  std::size_t code_id(std::size_t code) const;
  std::size_t special_id(Special s) const { return text + codes + static_cast<std::size_t>(s); }
  TokenKind kind(std::size_t id) const;
  bool is_visual(std::size_t id) const { return id >= text && id < text + codes; }
  std::size_t code_of(std::size_t id) const;
  Special special_of(std::size_t id) const;
  std::string render(std::span<const std::size_t> ids) const;

  bool operator==(const Vocabulary&) const = default;
};

struct MultimodalSequence {
  std::vector<std::size_t> ids;
  std::vector<double> mask;  // 1 where ids[t] is a prediction target
  std::vector<TokenKind> tags;

  std::size_t size() const { return ids.size(); }
};

// Codes of every corpus sample, indexed by sample index.
using CodeTable = std::vector<VisualCodes>;

// BOS, then each segment in order: a caption's tokens, or BOI + Q visual ids
// + EOI for an image. Segments that would overflow max_len are dropped whole.
// Mask is 1 everywhere but the first position.
MultimodalSequence pack(const data::InterleavedDoc& doc, const data::Corpus& corpus,
                        const CodeTable& codes, const Vocabulary& vocab, std::size_t max_len);

struct UnpackedSegment {
  data::SegmentKind kind = data::SegmentKind::text;
  std::vector<std::size_t> values;  // caption ids or visual codes
  bool operator==(const UnpackedSegment&) const = default;
};

// Inverse of pack on well-formed sequences; specials other than image
// framing are skipped. Throws ContractViolation on a malformed image block.
std::vector<UnpackedSegment> unpack(const MultimodalSequence& seq, const Vocabulary& vocab);

// "USER <image> describe ASSISTANT <caption> EOS" and
// "USER <caption> generate ASSISTANT <image> EOS", with the mask on the
// answer and its EOS only.
MultimodalSequence caption_instruction(const data::Sample& sample, const VisualCodes& codes,
                                       const Vocabulary& vocab);
MultimodalSequence generation_instruction(const data::Sample& sample, const VisualCodes& codes,
                                          const Vocabulary& vocab);
// The generation instruction up to and including ASSISTANT.
std::vector<std::size_t> generation_prompt(const data::Caption& caption, const Vocabulary& vocab);
std::vector<std::size_t> caption_prompt(const VisualCodes& codes, const Vocabulary& vocab);

// Decoder-only Transformer with untied embedding and head.
struct LanguageModel {
  Vocabulary vocab;
  std::size_t max_len = 0;
  Tensor embed;      // [V x d]
  Tensor positions;  // [max_len x d]
  std::vector<nn::SelfBlock> blocks;
  nn::LayerNorm ln_out;
  nn::Linear head;  // d -> V

  static LanguageModel create(const RunConfig& config, const Vocabulary& vocab, Rng& rng);

  std::size_t dim() const { return embed.cols(); }
  // ids is batch sequences of equal length, flattened; returns [batch*len x V].
  Tensor logits(std::span<const std::size_t> ids, std::size_t batch) const;

  bool has_lora() const;
  void attach_lora(std::size_t rank, double alpha, Rng& rng);
  void merge_lora();

  nn::ParamList parameters() const;       // base weights
  nn::ParamList lora_parameters() const;  // adapters only
  void store(Checkpoint& ckpt) const;
  static LanguageModel load(const Checkpoint& ckpt, const RunConfig& config);
  LanguageModel clone() const;

 private:
  std::vector<nn::Linear*> adapted();
};

// Right-pads with PAD (mask 0) to the longest sequence.
struct Batch {
  std::vector<std::size_t> ids;
  std::vector<double> mask;
  std::size_t batch = 0;
  std::size_t len = 0;
};
Batch collate(std::span<const MultimodalSequence> seqs, const Vocabulary& vocab);

// Per-position targets and weights for the logits of a batch: position t
// predicts ids[t+1] with weight mask[t+1]; the last position carries 0.
struct Targets {
  std::vector<std::size_t> ids;
  std::vector<double> weights;
};
Targets shift_targets(const Batch& batch);

// Mask-weighted mean next-token negative log-likelihood over the batch.
Tensor lm_loss(const LanguageModel& model, std::span<const MultimodalSequence> seqs);
// Evaluates in chunks without a tape.
double mean_lm_loss(const LanguageModel& model, std::span<const MultimodalSequence> seqs);
// Fraction of masked targets whose argmax prediction is correct.
double next_token_accuracy(const LanguageModel& model, std::span<const MultimodalSequence> seqs);

struct LmEpoch {
  std::string stage;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_accuracy = 0.0;
};
std::string lm_metrics_line(const LmEpoch& m);

struct LmStageResult {
  LanguageModel model;
  std::vector<LmEpoch> metrics;
  std::size_t trainable = 0;
};

// Caption sequences ("BOS caption") of a split, for the text-only warmup.
std::vector<MultimodalSequence> caption_sequences(const data::Corpus& corpus, data::Split split,
                                                  const Vocabulary& vocab);
std::vector<MultimodalSequence> pack_all(std::span<const data::InterleavedDoc> docs,
                                         const data::Corpus& corpus, const CodeTable& codes,
                                         const Vocabulary& vocab, std::size_t max_len);

// Stand-in for a pretrained LLM: a text-only model trained on captions.
LmStageResult text_warmup(const data::Corpus& corpus, const RunConfig& config,
                          const StageOutput& output = {});

// Inserts K visual-code rows between text and specials in the embedding
// table and head. New rows are drawn from N(0, s^2) where s is the base
// table's empirical std (the head's for head columns).
LanguageModel expand_vocabulary(const LanguageModel& base, std::size_t codes, Rng& rng);

// Attaches adapters to every attention and feed-forward projection and
// trains them together with the visual-code embedding rows and the head.
LmStageResult train_lora(const LanguageModel& expanded,
                         std::span<const MultimodalSequence> train,
                         std::span<const MultimodalSequence> val, const RunConfig& config,
                         const StageOutput& output = {});

// Merges adapters, then trains everything but the token embedding table.
LmStageResult merge_and_finetune(const LanguageModel& adapted,
                                 std::span<const MultimodalSequence> train,
                                 std::span<const MultimodalSequence> val,
                                 const RunConfig& config, const StageOutput& output = {});

// Fresh adapters on the pretrained model, trained with the answer-only mask.
// Samples whose answer span is empty are skipped with a warning.
LmStageResult instruction_tune(const LanguageModel& pretrained,
                               std::span<const MultimodalSequence> train,
                               std::span<const MultimodalSequence> val, const RunConfig& config,
                               const StageOutput& output = {});

enum class GenerationMode { free, image_constrained };

struct Sampling {
  double temperature = 1.0;  // 0 is greedy
  std::size_t top_k = 0;     // 0 keeps the whole vocabulary
};

// Samples until EOS, max_new tokens, or the context is full. In constrained
// mode a BOI is followed by exactly Q visual ids and an EOI, an open block is
// always completed, and BOI is only allowed where the block still fits.
// Outside a block, visual ids, EOI, PAD and BOS are barred. Until
// one block is out, EOS is barred and BOI is forced once the remaining budget
// is one block or less, so output always holds an image whenever the context
// has room for one.
std::vector<std::size_t> generate(const LanguageModel& model, std::span<const std::size_t> prompt,
                                  GenerationMode mode, const Sampling& sampling,
                                  std::size_t max_new, std::size_t num_queries, Rng& rng);

// Lengths of every BOI-opened block (visual ids before the closing EOI or the
// first non-visual id); an unterminated block still counts.
struct BlockScan {
  std::vector<std::size_t> lengths;
  bool well_formed = false;  // some block of exactly Q visual ids closed by EOI
};
BlockScan scan_image_blocks(std::span<const std::size_t> ids, const Vocabulary& vocab,
                            std::size_t num_queries);

}  // namespace seed::lm

#endif  // SEED_LM_HPP_
