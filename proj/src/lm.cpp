#include "seed/lm.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iostream>
#include <numeric>

#include <json.hpp>

#include "seed/errors.hpp"

namespace seed::lm {
namespace {

constexpr std::uint64_t kWarmupTag = 0x5747e3;
constexpr std::uint64_t kLoraTag = 0x5747e4;
constexpr std::uint64_t kFullTag = 0x5747e5;
constexpr std::uint64_t kInstructTag = 0x5747e6;
constexpr std::size_t kEvalChunk = 64;

constexpr std::array<const char*, kNumSpecials> kSpecialNames = {
    "<pad>", "<bos>", "<eos>", "<boi>", "<eoi>", "USER:", "ASSISTANT:"};

struct Builder {
  const Vocabulary& vocab;
  MultimodalSequence seq;

  void special(Special s, double mask) { push(vocab.special_id(s), mask, TokenKind::special); }
  void text(const data::Caption& caption, double mask) {
    for (auto id : caption) {
      if (id >= vocab.text) throw ContractViolation("caption id outside the text vocabulary");
      push(id, mask, TokenKind::text);
    }
  }
  void image(const VisualCodes& codes, double mask) {
    special(Special::boi, mask);
    for (auto c : codes) push(vocab.code_id(c), mask, TokenKind::visual);
    special(Special::eoi, mask);
  }
  void word(std::string_view w, double mask) {
    push(data::TextVocab::id(w), mask, TokenKind::text);
  }
  void push(std::size_t id, double mask, TokenKind tag) {
    seq.ids.push_back(id);
    seq.mask.push_back(mask);
    seq.tags.push_back(tag);
  }
};

double empirical_std(std::span<const double> v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

// Copies rows of src into dst, sending the K new visual rows to fresh draws.
Tensor expand_rows(const Tensor& src, const Vocabulary& from, const Vocabulary& to, double std,
                   Rng& rng) {
  const std::size_t cols = src.cols();
  Tensor out = Tensor::zeros({to.size(), cols}, true);
  auto dst = out.mutable_data();
  const auto copy_row = [&](std::size_t s, std::size_t d) {
    std::copy_n(src.data().begin() + s * cols, cols, dst.begin() + d * cols);
  };
  for (std::size_t i = 0; i < from.text; ++i) copy_row(i, i);
  for (std::size_t i = 0; i < from.codes; ++i) copy_row(from.code_id(i), to.code_id(i));
  for (std::size_t s = 0; s < kNumSpecials; ++s) {
    copy_row(from.special_id(Special(s)), to.special_id(Special(s)));
  }
  const Tensor fresh = randn({to.codes - from.codes, cols}, std, rng);
  std::copy(fresh.data().begin(), fresh.data().end(),
            dst.begin() + to.code_id(from.codes) * cols);
  return out;
}

Tensor transpose_copy(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  Tensor t = Tensor::zeros({c, r});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) d[j * r + i] = x.at(i, j);
  }
  return t;
}

Tensor column_vector(const Tensor& bias) {
  return Tensor({bias.numel(), 1}, std::vector<double>(bias.data().begin(), bias.data().end()));
}

std::vector<MultimodalSequence> gather(std::span<const MultimodalSequence> seqs,
                                       std::span<const std::size_t> rows) {
  std::vector<MultimodalSequence> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(seqs[r]);
  return out;
}

void dup(Tensor& t) {
  if (t.defined()) t = t.clone();
}

void dup(nn::Linear& l) {
  dup(l.weight);
  dup(l.bias);
  dup(l.lora_a);
  dup(l.lora_b);
}

void dup(nn::LayerNorm& n) {
  dup(n.gain);
  dup(n.bias);
}

struct StagePlan {
  std::string stage;
  std::uint64_t tag = 0;
  std::size_t epochs = 0;
  double lr = 0.0;
  bool track_accuracy = false;
};

// Shared loop: every stage differs only in its trainable slots and data.
std::vector<LmEpoch> run_stage(LanguageModel& model, std::vector<ParamSlot> slots,
                               std::span<const MultimodalSequence> train,
                               std::span<const MultimodalSequence> val, const RunConfig& config,
                               const StagePlan& plan, const StageOutput& output) {
  if (train.empty()) throw ContractViolation(plan.stage + ": no training sequences");
  PrecisionScope precision(config.precision);
  AdamW opt(std::move(slots), adam_options(config));
  const std::size_t B = std::max<std::size_t>(1, config.lm_batch);
  const std::size_t total = ((train.size() + B - 1) / B) * plan.epochs;
  const std::string metrics_file = plan.stage + "_metrics.ndjson";
  if (!output.dir.empty()) {
    std::filesystem::create_directories(output.dir);
    std::filesystem::remove(output.dir / metrics_file);
  }
  std::vector<std::size_t> items(train.size());
  std::iota(items.begin(), items.end(), 0);

  std::vector<LmEpoch> metrics;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= plan.epochs; ++epoch) {
    const auto order = epoch_order(items, config.seed, plan.tag, epoch);
    LmEpoch m{plan.stage, epoch};
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += B) {
      const std::span<const std::size_t> rows(order.data() + s, std::min(B, order.size() - s));
      const auto batch = gather(train, rows);
      Tape tape(config.precision);
      TapeScope scope(tape);
      const Tensor loss = lm_loss(model, batch);
      if (!std::isfinite(loss.item())) {
        raise_nonfinite(output, plan.stage, epoch, step, rows, loss.item());
      }
      opt.zero_grad();
      tape.backward(loss);
      opt.step(cosine_lr(step, total, plan.lr, config.warmup_ratio));
      m.train_loss += loss.item();
      ++batches;
      ++step;
    }
    m.train_loss /= static_cast<double>(std::max<std::size_t>(batches, 1));
    if (!val.empty()) m.val_loss = mean_lm_loss(model, val);
    if (plan.track_accuracy) m.train_accuracy = next_token_accuracy(model, train);
    metrics.push_back(m);
    if (!output.dir.empty()) {
      append_line(output.dir / metrics_file, lm_metrics_line(m));
      Checkpoint ckpt = stage_checkpoint(config, plan.stage, output.parent_digest);
      ckpt.metadata["epoch"] = std::to_string(epoch);
      model.store(ckpt);
      save_checkpoint(ckpt, output.dir / epoch_checkpoint_name(plan.stage, epoch));
    }
  }
  return metrics;
}

void freeze_all(const LanguageModel& model) {
  nn::set_requires_grad(model.parameters(), false);
  nn::set_requires_grad(model.lora_parameters(), false);
}

ParamSlot& slot_named(std::vector<ParamSlot>& slots, const std::string& name) {
  for (auto& s : slots) {
    if (s.name == name) return s;
  }
  throw ContractViolation("no optimizer slot " + name);
}

}  // namespace

std::size_t Vocabulary::code_id(std::size_t code) const {
  if (code >= codes) {
    throw ContractViolation("visual code " + std::to_string(code) + " outside codebook of " +
                            std::to_string(codes));
  }
  return text + code;
}

TokenKind Vocabulary::kind(std::size_t id) const {
  if (id >= size()) throw ContractViolation("token id " + std::to_string(id) + " out of range");
  if (id < text) return TokenKind::text;
  if (id < text + codes) return TokenKind::visual;
  return TokenKind::special;
}

std::size_t Vocabulary::code_of(std::size_t id) const {
  if (!is_visual(id)) throw ContractViolation("id " + std::to_string(id) + " is not visual");
  return id - text;
}

Special Vocabulary::special_of(std::size_t id) const {
  if (kind(id) != TokenKind::special) {
    throw ContractViolation("id " + std::to_string(id) + " is not special");
  }
  return Special(id - text - codes);
}

std::string Vocabulary::render(std::span<const std::size_t> ids) const {
  std::string out;
  for (auto id : ids) {
    if (!out.empty()) out += ' ';
    switch (kind(id)) {
      case TokenKind::text: out += data::TextVocab::word(id); break;
      case TokenKind::visual: out += "<v" + std::to_string(code_of(id)) + ">"; break;
      case TokenKind::special:
        out += kSpecialNames[static_cast<std::size_t>(special_of(id))];
        break;
    }
  }
  return out;
}

MultimodalSequence pack(const data::InterleavedDoc& doc, const data::Corpus& corpus,
                        const CodeTable& codes, const Vocabulary& vocab, std::size_t max_len) {
  Builder b{vocab, {}};
  b.special(Special::bos, 0.0);
  for (const auto& seg : doc.segments) {
    const auto& sample = corpus.samples.at(seg.sample);
    Builder part{vocab, {}};
    if (seg.kind == data::SegmentKind::text) {
      part.text(sample.caption, 1.0);
    } else {
      const auto& c = codes.at(seg.sample);
      if (c.empty()) throw ContractViolation("no visual codes for sample " + std::to_string(seg.sample));
      part.image(c, 1.0);
      if (part.seq.size() + 1 > max_len) {
        throw ConfigError("image block of " + std::to_string(part.seq.size()) +
                          " ids does not fit max_len " + std::to_string(max_len));
      }
    }
    if (b.seq.size() + part.seq.size() > max_len) break;
    for (std::size_t i = 0; i < part.seq.size(); ++i) {
      b.push(part.seq.ids[i], part.seq.mask[i], part.seq.tags[i]);
    }
  }
  return std::move(b.seq);
}

std::vector<UnpackedSegment> unpack(const MultimodalSequence& seq, const Vocabulary& vocab) {
  std::vector<UnpackedSegment> out;
  bool in_text = false;
  for (std::size_t t = 0; t < seq.ids.size(); ++t) {
    const std::size_t id = seq.ids[t];
    switch (vocab.kind(id)) {
      case TokenKind::text:
        if (!in_text) out.push_back({data::SegmentKind::text, {}});
        out.back().values.push_back(id);
        in_text = true;
        break;
      case TokenKind::visual:
        throw ContractViolation("visual id outside an image block at position " +
                                std::to_string(t));
      case TokenKind::special: {
        in_text = false;
        if (vocab.special_of(id) != Special::boi) break;
        UnpackedSegment img{data::SegmentKind::image, {}};
        ++t;
        while (t < seq.ids.size() && vocab.is_visual(seq.ids[t])) {
          img.values.push_back(vocab.code_of(seq.ids[t]));
          ++t;
        }
        if (t == seq.ids.size() || seq.ids[t] != vocab.special_id(Special::eoi)) {
          throw ContractViolation("image block opened at position " +
                                  std::to_string(t - img.values.size() - 1) + " is not closed");
        }
        out.push_back(std::move(img));
        break;
      }
    }
  }
  return out;
}

MultimodalSequence caption_instruction(const data::Sample& sample, const VisualCodes& codes,
                                       const Vocabulary& vocab) {
  Builder b{vocab, {}};
  b.special(Special::bos, 0.0);
  b.special(Special::user, 0.0);
  b.image(codes, 0.0);
  b.word("describe", 0.0);
  b.special(Special::assistant, 0.0);
  b.text(sample.caption, 1.0);
  if (!sample.caption.empty()) b.special(Special::eos, 1.0);
  return std::move(b.seq);
}

MultimodalSequence generation_instruction(const data::Sample& sample, const VisualCodes& codes,
                                          const Vocabulary& vocab) {
  Builder b{vocab, {}};
  b.special(Special::bos, 0.0);
  b.special(Special::user, 0.0);
  b.text(sample.caption, 0.0);
  b.word("generate", 0.0);
  b.special(Special::assistant, 0.0);
  if (!codes.empty()) {
    b.image(codes, 1.0);
    b.special(Special::eos, 1.0);
  }
  return std::move(b.seq);
}

std::vector<std::size_t> generation_prompt(const data::Caption& caption, const Vocabulary& vocab) {
  data::Sample s;
  s.caption = caption;
  auto seq = generation_instruction(s, {}, vocab);
  return seq.ids;
}

std::vector<std::size_t> caption_prompt(const VisualCodes& codes, const Vocabulary& vocab) {
  data::Sample s;
  auto seq = caption_instruction(s, codes, vocab);
  return seq.ids;
}

LanguageModel LanguageModel::create(const RunConfig& config, const Vocabulary& vocab, Rng& rng) {
  const std::size_t d = config.lm_dim;
  LanguageModel m;
  m.vocab = vocab;
  m.max_len = config.max_len;
  m.embed = randn({vocab.size(), d}, 0.5, rng, true);
  m.positions = randn({config.max_len, d}, 0.5, rng, true);
  for (std::size_t l = 0; l < config.lm_layers; ++l) {
    m.blocks.push_back(nn::SelfBlock::create(d, config.lm_heads, 4 * d, rng));
  }
  m.ln_out = nn::LayerNorm::create(d);
  m.head.weight = randn({d, vocab.size()}, 0.02, rng, true);
  m.head.bias = Tensor::zeros({vocab.size()}, true);
  return m;
}

Tensor LanguageModel::logits(std::span<const std::size_t> ids, std::size_t batch) const {
  if (batch == 0 || ids.size() % batch != 0) {
    throw ContractViolation("logits: " + std::to_string(ids.size()) + " ids for batch " +
                            std::to_string(batch));
  }
  const std::size_t len = ids.size() / batch;
  if (len == 0 || len > max_len) {
    throw ContractViolation("logits: sequence length " + std::to_string(len) +
                            " outside [1, " + std::to_string(max_len) + "]");
  }
  std::vector<std::size_t> pos(ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % len;
  Tensor x = ops::add(ops::embedding(embed, ids), ops::embedding(positions, pos));
  const auto mask = ops::causal_mask(len);
  for (const auto& b : blocks) x = b(x, mask, batch, len);
  return head(ln_out(x));
}

std::vector<nn::Linear*> LanguageModel::adapted() {
  std::vector<nn::Linear*> out;
  for (auto& b : blocks) {
    for (auto* l : b.linears()) out.push_back(l);
  }
  return out;
}

bool LanguageModel::has_lora() const { return !blocks.empty() && blocks[0].attn.q.has_lora(); }

void LanguageModel::attach_lora(std::size_t rank, double alpha, Rng& rng) {
  if (has_lora()) throw ContractViolation("adapters already attached");
  if (rank == 0 || rank >= dim()) {
    throw ConfigError("lora rank " + std::to_string(rank) + " must be in [1, " +
                      std::to_string(dim()) + ")");
  }
  for (auto* l : adapted()) l->attach_lora(rank, alpha, rng);
}

void LanguageModel::merge_lora() {
  for (auto* l : adapted()) l->merge_lora();
}

nn::ParamList LanguageModel::parameters() const {
  nn::ParamList p;
  p.push_back({"lm.embed", embed});
  p.push_back({"lm.positions", positions});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].collect("lm.block" + std::to_string(l), p);
  }
  ln_out.collect("lm.ln_out", p);
  head.collect("lm.head", p);
  return p;
}

nn::ParamList LanguageModel::lora_parameters() const {
  nn::ParamList p;
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string prefix = "lm.block" + std::to_string(l);
    const auto& b = blocks[l];
    b.attn.q.collect_lora(prefix + ".attn.q", p);
    b.attn.k.collect_lora(prefix + ".attn.k", p);
    b.attn.v.collect_lora(prefix + ".attn.v", p);
    b.attn.o.collect_lora(prefix + ".attn.o", p);
    b.ffn.up.collect_lora(prefix + ".ffn.up", p);
    b.ffn.down.collect_lora(prefix + ".ffn.down", p);
  }
  return p;
}

void LanguageModel::store(Checkpoint& ckpt) const {
  ckpt.metadata["lm.text_vocab"] = std::to_string(vocab.text);
  ckpt.metadata["lm.visual_codes"] = std::to_string(vocab.codes);
  store_parameters(ckpt, parameters());
  if (has_lora()) {
    ckpt.metadata["lm.lora_scale"] = nlohmann::json(blocks[0].attn.q.lora_scale).dump();
    store_parameters(ckpt, lora_parameters());
  }
}

LanguageModel LanguageModel::load(const Checkpoint& ckpt, const RunConfig& config) {
  Vocabulary vocab;
  try {
    vocab.text = std::stoul(ckpt.meta("lm.text_vocab"));
    vocab.codes = std::stoul(ckpt.meta("lm.visual_codes"));
  } catch (const std::logic_error&) {
    throw LoadError("checkpoint lacks language-model vocabulary metadata");
  }
  Rng rng(0);
  LanguageModel m = create(config, vocab, rng);
  restore_parameters(ckpt, m.parameters());
  if (ckpt.has("lm.block0.attn.q.lora_a")) {
    const std::size_t rank = ckpt.get("lm.block0.attn.q.lora_a").cols();
    m.attach_lora(rank, 1.0, rng);
    const double scale = nlohmann::json::parse(ckpt.meta("lm.lora_scale")).get<double>();
    for (auto* l : m.adapted()) l->lora_scale = scale;
    restore_parameters(ckpt, m.lora_parameters());
  }
  return m;
}

LanguageModel LanguageModel::clone() const {
  LanguageModel m = *this;
  dup(m.embed);
  dup(m.positions);
  for (auto& b : m.blocks) {
    dup(b.ln1);
    dup(b.ln2);
    for (auto* l : b.linears()) dup(*l);
  }
  dup(m.ln_out);
  dup(m.head);
  return m;
}

Batch collate(std::span<const MultimodalSequence> seqs, const Vocabulary& vocab) {
  Batch b;
  b.batch = seqs.size();
  for (const auto& s : seqs) b.len = std::max(b.len, s.size());
  b.ids.assign(b.batch * b.len, vocab.special_id(Special::pad));
  b.mask.assign(b.batch * b.len, 0.0);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    std::copy(seqs[i].ids.begin(), seqs[i].ids.end(), b.ids.begin() + i * b.len);
    std::copy(seqs[i].mask.begin(), seqs[i].mask.end(), b.mask.begin() + i * b.len);
  }
  return b;
}

Targets shift_targets(const Batch& batch) {
  Targets t;
  t.ids.assign(batch.ids.size(), 0);
  t.weights.assign(batch.ids.size(), 0.0);
  for (std::size_t i = 0; i < batch.batch; ++i) {
    for (std::size_t p = 0; p + 1 < batch.len; ++p) {
      t.ids[i * batch.len + p] = batch.ids[i * batch.len + p + 1];
      t.weights[i * batch.len + p] = batch.mask[i * batch.len + p + 1];
    }
  }
  return t;
}

Tensor lm_loss(const LanguageModel& model, std::span<const MultimodalSequence> seqs) {
  const Batch b = collate(seqs, model.vocab);
  if (b.len < 2) throw ContractViolation("lm_loss needs sequences of length >= 2");
  const Targets t = shift_targets(b);
  return ops::cross_entropy(model.logits(b.ids, b.batch), t.ids, t.weights);
}

double mean_lm_loss(const LanguageModel& model, std::span<const MultimodalSequence> seqs) {
  double total = 0.0, weight = 0.0;
  for (std::size_t s = 0; s < seqs.size(); s += kEvalChunk) {
    const auto chunk = seqs.subspan(s, std::min(kEvalChunk, seqs.size() - s));
    const Batch b = collate(chunk, model.vocab);
    const Targets t = shift_targets(b);
    const double w = std::accumulate(t.weights.begin(), t.weights.end(), 0.0);
    if (w == 0.0) continue;
    total += ops::cross_entropy(model.logits(b.ids, b.batch), t.ids, t.weights).item() * w;
    weight += w;
  }
  if (weight == 0.0) throw ContractViolation("mean_lm_loss: no masked targets");
  return total / weight;
}

double next_token_accuracy(const LanguageModel& model, std::span<const MultimodalSequence> seqs) {
  std::size_t hits = 0, count = 0;
  const std::size_t V = model.vocab.size();
  for (std::size_t s = 0; s < seqs.size(); s += kEvalChunk) {
    const auto chunk = seqs.subspan(s, std::min(kEvalChunk, seqs.size() - s));
    const Batch b = collate(chunk, model.vocab);
    const Targets t = shift_targets(b);
    const Tensor logits = model.logits(b.ids, b.batch);
    for (std::size_t r = 0; r < t.ids.size(); ++r) {
      if (t.weights[r] == 0.0) continue;
      const auto row = logits.data().subspan(r * V, V);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      hits += best == t.ids[r];
      ++count;
    }
  }
  return count ? static_cast<double>(hits) / static_cast<double>(count) : 0.0;
}

std::string lm_metrics_line(const LmEpoch& m) {
  nlohmann::ordered_json j;
  j["stage"] = m.stage;
  j["epoch"] = m.epoch;
  j["train_loss"] = m.train_loss;
  j["val_loss"] = m.val_loss;
  j["train_accuracy"] = m.train_accuracy;
  return j.dump();
}

std::vector<MultimodalSequence> caption_sequences(const data::Corpus& corpus, data::Split split,
                                                  const Vocabulary& vocab) {
  std::vector<MultimodalSequence> out;
  for (auto i : corpus.indices(split)) {
    Builder b{vocab, {}};
    b.special(Special::bos, 0.0);
    b.text(corpus.samples[i].caption, 1.0);
    out.push_back(std::move(b.seq));
  }
  return out;
}

std::vector<MultimodalSequence> pack_all(std::span<const data::InterleavedDoc> docs,
                                         const data::Corpus& corpus, const CodeTable& codes,
                                         const Vocabulary& vocab, std::size_t max_len) {
  std::vector<MultimodalSequence> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(pack(d, corpus, codes, vocab, max_len));
  return out;
}

LmStageResult text_warmup(const data::Corpus& corpus, const RunConfig& config,
                          const StageOutput& output) {
  const Vocabulary vocab{data::TextVocab::size(), 0};
  Rng rng(mix_seed(config.seed, kWarmupTag));
  LmStageResult r{LanguageModel::create(config, vocab, rng), {}, 0};
  const auto train = caption_sequences(corpus, data::Split::train, vocab);
  const auto val = caption_sequences(corpus, data::Split::val, vocab);
  auto slots = optimizer_slots(r.model.parameters());
  r.trainable = AdamW(slots).trainable_count();
  r.metrics = run_stage(r.model, std::move(slots), train, val, config,
                        {"lm_warmup", kWarmupTag, config.text_warmup_epochs, config.text_warmup_lr},
                        output);
  return r;
}

LanguageModel expand_vocabulary(const LanguageModel& base, std::size_t codes, Rng& rng) {
  if (codes < base.vocab.codes) throw ContractViolation("expand_vocabulary cannot shrink");
  LanguageModel m = base.clone();
  const Vocabulary to{base.vocab.text, codes};
  m.vocab = to;
  m.embed = expand_rows(base.embed, base.vocab, to, empirical_std(base.embed.data()), rng);
  // Head columns are expanded as rows of the transpose.
  const Tensor head_t = expand_rows(transpose_copy(base.head.weight), base.vocab, to,
                                    empirical_std(base.head.weight.data()), rng);
  m.head.weight = transpose_copy(head_t);
  m.head.weight.set_requires_grad(true);
  Rng zero(0);
  const Tensor bias = expand_rows(column_vector(base.head.bias), base.vocab, to, 0.0, zero);
  m.head.bias = Tensor({to.size()}, std::vector<double>(bias.data().begin(), bias.data().end()),
                       true);
  return m;
}

LmStageResult train_lora(const LanguageModel& expanded,
                         std::span<const MultimodalSequence> train,
                         std::span<const MultimodalSequence> val, const RunConfig& config,
                         const StageOutput& output) {
  Rng rng(mix_seed(config.seed, kLoraTag));
  LmStageResult r{expanded.clone(), {}, 0};
  r.model.attach_lora(config.lora_rank, config.lora_alpha, rng);
  freeze_all(r.model);

  nn::ParamList params = r.model.lora_parameters();
  params.push_back({"lm.embed", r.model.embed});
  r.model.head.collect("lm.head", params);
  nn::set_requires_grad(params, true);
  auto slots = optimizer_slots(params);
  auto& embed = slot_named(slots, "lm.embed");
  embed.row_begin = r.model.vocab.code_id(0);
  embed.row_end = embed.row_begin + r.model.vocab.codes;
  r.trainable = AdamW(slots).trainable_count();
  r.metrics = run_stage(r.model, std::move(slots), train, val, config,
                        {"lm_lora", kLoraTag, config.lora_epochs, config.lora_lr}, output);
  return r;
}

LmStageResult merge_and_finetune(const LanguageModel& adapted,
                                 std::span<const MultimodalSequence> train,
                                 std::span<const MultimodalSequence> val,
                                 const RunConfig& config, const StageOutput& output) {
  if (!adapted.has_lora()) throw ContractViolation("merge_and_finetune needs adapters");
  LmStageResult r{adapted.clone(), {}, 0};
  r.model.merge_lora();
  freeze_all(r.model);
  nn::ParamList params;
  for (const auto& p : r.model.parameters()) {
    if (p.name != "lm.embed") params.push_back(p);
  }
  nn::set_requires_grad(params, true);
  auto slots = optimizer_slots(params);
  r.trainable = AdamW(slots).trainable_count();
  r.metrics = run_stage(r.model, std::move(slots), train, val, config,
                        {"lm_full", kFullTag, config.full_epochs, config.lr}, output);
  return r;
}

LmStageResult instruction_tune(const LanguageModel& pretrained,
                               std::span<const MultimodalSequence> train,
                               std::span<const MultimodalSequence> val, const RunConfig& config,
                               const StageOutput& output) {
  const auto usable = [](std::span<const MultimodalSequence> seqs, const char* what) {
    std::vector<MultimodalSequence> kept;
    std::size_t skipped = 0;
    for (const auto& s : seqs) {
      if (std::accumulate(s.mask.begin(), s.mask.end(), 0.0) > 0.0) {
        kept.push_back(s);
      } else {
        ++skipped;
      }
    }
    if (skipped) {
      std::cerr << "warning: skipped " << skipped << " " << what
                << " instruction samples with an empty answer\n";
    }
    return kept;
  };
  const auto kept_train = usable(train, "training");
  const auto kept_val = usable(val, "validation");

  Rng rng(mix_seed(config.seed, kInstructTag));
  LmStageResult r{pretrained.clone(), {}, 0};
  r.model.attach_lora(config.instruct_lora_rank, config.lora_alpha, rng);
  freeze_all(r.model);
  const auto params = r.model.lora_parameters();
  nn::set_requires_grad(params, true);
  auto slots = optimizer_slots(params);
  r.trainable = AdamW(slots).trainable_count();
  r.metrics = run_stage(r.model, std::move(slots), kept_train, kept_val, config,
                        {"lm_instruct", kInstructTag, config.instruct_epochs, config.instruct_lr,
                         true},
                        output);
  return r;
}

namespace {

double unit_uniform(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t pick_token(std::span<const double> logits, const std::vector<std::uint8_t>& allowed,
                       const Sampling& sampling, Rng& rng) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (allowed[i]) cand.push_back(i);
  }
  if (cand.empty()) throw ContractViolation("generate: no admissible token");
  std::stable_sort(cand.begin(), cand.end(),
                   [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  if (sampling.temperature <= 0.0) return cand.front();
  if (sampling.top_k > 0 && sampling.top_k < cand.size()) cand.resize(sampling.top_k);
  std::vector<double> p(cand.size());
  double total = 0.0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    p[i] = std::exp((logits[cand[i]] - logits[cand.front()]) / sampling.temperature);
    total += p[i];
  }
  double u = unit_uniform(rng) * total;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    u -= p[i];
    if (u < 0.0) return cand[i];
  }
  return cand.front();
}

}  // namespace

std::vector<std::size_t> generate(const LanguageModel& model, std::span<const std::size_t> prompt,
                                  GenerationMode mode, const Sampling& sampling,
                                  std::size_t max_new, std::size_t num_queries, Rng& rng) {
  if (prompt.empty()) throw ContractViolation("generate: empty prompt");
  const Vocabulary& v = model.vocab;
  const std::size_t V = v.size(), boi = v.special_id(Special::boi),
                    eoi = v.special_id(Special::eoi), eos = v.special_id(Special::eos),
                    pad = v.special_id(Special::pad), bos = v.special_id(Special::bos);
  const bool constrained = mode == GenerationMode::image_constrained;
  std::vector<std::size_t> ids(prompt.begin(), prompt.end());
  // Visual ids emitted inside the currently open block; kClosed outside one.
  constexpr std::size_t kClosed = static_cast<std::size_t>(-1);
  std::size_t open = kClosed;
  const auto advance = [&](std::size_t id) {
    if (id == boi) {
      open = 0;
    } else if (open != kClosed && v.is_visual(id)) {
      ++open;
    } else {
      open = kClosed;
    }
  };
  for (auto id : prompt) advance(id);
  std::vector<std::size_t> out;
  std::vector<std::uint8_t> allowed(V);
  bool emitted_block = false;
  const std::size_t block_len = num_queries + 2;
  while (ids.size() < model.max_len) {
    const bool in_block = constrained && open != kClosed;
    if (!in_block && out.size() >= max_new) break;
    const std::size_t room = std::min(max_new - std::min(max_new, out.size()),
                                      model.max_len - ids.size());
    const bool fits = ids.size() + block_len <= model.max_len;
    const bool owe_block = constrained && !in_block && !emitted_block && fits;
    std::size_t next;
    if (in_block && open == num_queries) {
      next = eoi;
    } else if (owe_block && room <= block_len) {
      next = boi;
    } else {
      const Tensor logits = model.logits(ids, 1);
      const auto last = logits.data().subspan((ids.size() - 1) * V, V);
      for (std::size_t i = 0; i < V; ++i) {
        if (in_block) {
          allowed[i] = v.is_visual(i);
        } else if (constrained) {
          allowed[i] = !v.is_visual(i) && i != eoi && i != pad && i != bos &&
                       !(i == boi && !fits) && !(i == eos && owe_block);
        } else {
          allowed[i] = 1;
        }
      }
      next = pick_token(last, allowed, sampling, rng);
    }
    if (open == num_queries && next == eoi) emitted_block = true;
    ids.push_back(next);
    out.push_back(next);
    advance(next);
    if (next == eos) break;
  }
  return out;
}

BlockScan scan_image_blocks(std::span<const std::size_t> ids, const Vocabulary& vocab,
                            std::size_t num_queries) {
  BlockScan scan;
  const std::size_t boi = vocab.special_id(Special::boi), eoi = vocab.special_id(Special::eoi);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] != boi) continue;
    std::size_t n = 0;
    while (t + 1 < ids.size() && vocab.is_visual(ids[t + 1])) {
      ++n;
      ++t;
    }
    scan.lengths.push_back(n);
    if (t + 1 < ids.size() && ids[t + 1] == eoi && n == num_queries) scan.well_formed = true;
  }
  return scan;
}

}  // namespace seed::lm
