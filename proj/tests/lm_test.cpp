#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "seed/digest.hpp"
#include "seed/errors.hpp"
#include "seed/fd_check.hpp"
#include "seed/lm.hpp"

namespace seed::lm {
namespace {

constexpr std::size_t kQ = 4;
constexpr std::size_t kCodes = 12;

std::string digest_of(const nn::ParamList& params, const std::string& skip = {}) {
  std::string bytes;
  for (const auto& p : params) {
    if (!skip.empty() && p.name == skip) continue;
    const auto d = p.tensor.data();
    bytes.append(p.name);
    bytes.append(reinterpret_cast<const char*>(d.data()), d.size_bytes());
  }
  return sha256_hex(bytes);
}

RunConfig small_config() {
  RunConfig c;
  c.corpus_size = 96;
  c.num_queries = kQ;
  c.codebook_size = kCodes;
  c.lm_dim = 16;
  c.lm_heads = 2;
  c.lm_layers = 2;
  c.max_len = 32;
  c.lora_rank = 2;
  c.instruct_lora_rank = 2;
  c.lm_batch = 8;
  c.text_warmup_epochs = 1;
  c.lora_epochs = 1;
  c.full_epochs = 1;
  c.instruct_epochs = 1;
  return c;
}

Vocabulary small_vocab() { return {data::TextVocab::size(), kCodes}; }

struct Data {
  data::Corpus corpus;
  CodeTable codes;
};

const Data& toy() {
  static const Data d = [] {
    Data d;
    d.corpus = data::make_corpus(7, 96);
    Rng rng(3);
    std::uniform_int_distribution<std::size_t> code(0, kCodes - 1);
    for (std::size_t i = 0; i < d.corpus.samples.size(); ++i) {
      VisualCodes c(kQ);
      for (auto& x : c) x = code(rng);
      d.codes.push_back(c);
    }
    return d;
  }();
  return d;
}

std::vector<std::size_t> random_ids(std::size_t n, const Vocabulary& v, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, v.size() - 1);
  std::vector<std::size_t> ids(n);
  for (auto& id : ids) id = pick(rng);
  return ids;
}

LanguageModel random_model(std::uint64_t seed, bool lora = false) {
  Rng rng(seed);
  LanguageModel m = LanguageModel::create(small_config(), small_vocab(), rng);
  if (lora) {
    m.attach_lora(2, 4.0, rng);
    for (const auto& p : m.lora_parameters()) {
      if (!p.name.ends_with(".lora_b")) continue;
      const Tensor r = randn(p.tensor.shape(), 0.3, rng);
      std::copy(r.data().begin(), r.data().end(), p.tensor.mutable_data().begin());
    }
  }
  return m;
}

TEST(Vocabulary, RangesAndBijection) {
  const Vocabulary v = small_vocab();
  EXPECT_EQ(v.size(), 32u + kCodes + kNumSpecials);
  for (std::size_t k = 0; k < kCodes; ++k) {
    EXPECT_EQ(v.code_of(v.code_id(k)), k);
    EXPECT_EQ(v.kind(v.code_id(k)), TokenKind::visual);
  }
  EXPECT_EQ(v.kind(31), TokenKind::text);
  EXPECT_EQ(v.special_id(Special::pad), 32u + kCodes);
  for (std::size_t s = 0; s < kNumSpecials; ++s) {
    EXPECT_EQ(v.special_of(v.special_id(Special(s))), Special(s));
  }
  EXPECT_THROW(v.code_id(kCodes), ContractViolation);
  EXPECT_THROW(v.kind(v.size()), ContractViolation);
}

TEST(Pack, ShapeArithmetic) {
  data::Corpus corpus;
  data::Sample s;
  s.caption = {0, 3, 6, 2, 1};
  corpus.samples.push_back(s);
  const CodeTable codes{VisualCodes(8, 1)};
  const Vocabulary v{32, 16};
  data::InterleavedDoc doc;
  doc.segments = {{data::SegmentKind::image, 0}, {data::SegmentKind::text, 0}};
  const auto seq = pack(doc, corpus, codes, v, 64);
  ASSERT_EQ(seq.size(), 16u);
  EXPECT_EQ(seq.ids[0], v.special_id(Special::bos));
  EXPECT_EQ(seq.ids[1], v.special_id(Special::boi));
  EXPECT_EQ(seq.ids[10], v.special_id(Special::eoi));
  EXPECT_EQ(seq.mask[0], 0.0);
  for (std::size_t t = 1; t < seq.size(); ++t) EXPECT_EQ(seq.mask[t], 1.0);
  EXPECT_EQ(seq.tags[5], TokenKind::visual);
  EXPECT_EQ(seq.tags[12], TokenKind::text);
  // With Q = 32 an image block is 34 ids.
  const CodeTable wide{VisualCodes(32, 0)};
  data::InterleavedDoc image_only;
  image_only.segments = {{data::SegmentKind::image, 0}};
  EXPECT_EQ(pack(image_only, corpus, wide, Vocabulary{32, 8192}, 64).size(), 1u + 34u);
}

TEST(Pack, OversizedImageBlockIsAnError) {
  const auto& d = toy();
  data::InterleavedDoc doc;
  doc.segments = {{data::SegmentKind::image, 0}};
  EXPECT_THROW(pack(doc, d.corpus, d.codes, small_vocab(), kQ + 2), ConfigError);
  EXPECT_NO_THROW(pack(doc, d.corpus, d.codes, small_vocab(), kQ + 3));
}

TEST(Pack, TruncationKeepsWholeSegments) {
  const auto& d = toy();
  const Vocabulary v = small_vocab();
  const auto docs = data::make_interleaved_docs(d.corpus, 11, 1000, 1, 4);
  Rng rng(12);
  std::uniform_int_distribution<std::size_t> len(kQ + 3, 48);
  for (const auto& doc : docs) {
    const std::size_t max_len = len(rng);
    const auto full = pack(doc, d.corpus, d.codes, v, 1000);
    const auto cut = pack(doc, d.corpus, d.codes, v, max_len);
    ASSERT_LE(cut.size(), max_len);
    ASSERT_TRUE(std::equal(cut.ids.begin(), cut.ids.end(), full.ids.begin()));
    // The cut lands on a segment boundary and the next segment would not fit.
    std::size_t end = 1;
    bool on_boundary = cut.size() == end;
    for (const auto& seg : doc.segments) {
      const std::size_t len = seg.kind == data::SegmentKind::image
                                  ? kQ + 2
                                  : d.corpus.samples[seg.sample].caption.size();
      if (end == cut.size() && end < full.size()) ASSERT_GT(end + len, max_len);
      end += len;
      on_boundary = on_boundary || end == cut.size();
    }
    ASSERT_TRUE(on_boundary);
    ASSERT_NO_THROW(unpack(cut, v));
    for (const auto& seg : unpack(cut, v)) {
      if (seg.kind == data::SegmentKind::image) ASSERT_EQ(seg.values.size(), kQ);
    }
  }
}

TEST(Pack, UnpackInvertsPack) {
  const auto& d = toy();
  const Vocabulary v = small_vocab();
  for (const auto& doc : data::make_interleaved_docs(d.corpus, 5, 200, 1, 3)) {
    // Adjacent captions share no delimiter, so they come back as one run.
    std::vector<UnpackedSegment> expected;
    for (const auto& seg : doc.segments) {
      if (seg.kind == data::SegmentKind::image) {
        expected.push_back({seg.kind, d.codes[seg.sample]});
        continue;
      }
      const auto& cap = d.corpus.samples[seg.sample].caption;
      if (!expected.empty() && expected.back().kind == data::SegmentKind::text) {
        expected.back().values.insert(expected.back().values.end(), cap.begin(), cap.end());
      } else {
        expected.push_back({seg.kind, cap});
      }
    }
    ASSERT_EQ(unpack(pack(doc, d.corpus, d.codes, v, 1000), v), expected);
  }
}

TEST(Pack, UnpackRejectsBrokenBlocks) {
  const Vocabulary v = small_vocab();
  MultimodalSequence seq;
  seq.ids = {v.special_id(Special::boi), v.code_id(1), 3};
  EXPECT_THROW(unpack(seq, v), ContractViolation);
  seq.ids = {3, v.code_id(1)};
  EXPECT_THROW(unpack(seq, v), ContractViolation);
}

TEST(Instruction, MaskCoversAnswerOnly) {
  const auto& d = toy();
  const Vocabulary v = small_vocab();
  const auto& s = d.corpus.samples[0];
  const auto cap = caption_instruction(s, d.codes[0], v);
  // BOS USER BOI q*Q EOI describe ASSISTANT caption EOS
  const std::size_t answer = 2 + kQ + 2 + 2;
  for (std::size_t t = 0; t < cap.size(); ++t) EXPECT_EQ(cap.mask[t], t >= answer ? 1.0 : 0.0);
  EXPECT_EQ(cap.ids.back(), v.special_id(Special::eos));
  const auto gen = generation_instruction(s, d.codes[0], v);
  const std::size_t gen_answer = 2 + s.caption.size() + 2;
  EXPECT_EQ(gen.ids[gen_answer], v.special_id(Special::boi));
  for (std::size_t t = 0; t < gen.size(); ++t) EXPECT_EQ(gen.mask[t], t >= gen_answer ? 1.0 : 0.0);
  const auto prompt = generation_prompt(s.caption, v);
  EXPECT_TRUE(std::equal(prompt.begin(), prompt.end(), gen.ids.begin()));
  EXPECT_EQ(prompt.size(), gen_answer);
}

TEST(Instruction, NonAnswerLogitsGetExactlyZeroGradient) {
  PrecisionScope f64(Precision::f64);
  const auto& d = toy();
  const Vocabulary v = small_vocab();
  const std::vector<MultimodalSequence> seqs{caption_instruction(d.corpus.samples[1], d.codes[1], v),
                                             generation_instruction(d.corpus.samples[2], d.codes[2], v)};
  const LanguageModel m = random_model(4);
  const Batch b = collate(seqs, v);
  const Targets t = shift_targets(b);
  Tensor logits = m.logits(b.ids, b.batch).detach();
  logits.set_requires_grad(true);
  Tape tape(Precision::f64);
  {
    TapeScope scope(tape);
    tape.backward(ops::cross_entropy(logits, t.ids, t.weights));
  }
  const std::size_t V = v.size();
  std::size_t zero_rows = 0;
  for (std::size_t r = 0; r < t.ids.size(); ++r) {
    double mass = 0.0;
    for (std::size_t j = 0; j < V; ++j) mass += std::abs(logits.grad()[r * V + j]);
    if (t.weights[r] == 0.0) {
      ASSERT_EQ(mass, 0.0) << "row " << r;
      ++zero_rows;
    } else {
      ASSERT_GT(mass, 0.0);
    }
  }
  EXPECT_GT(zero_rows, 10u);
}

TEST(LmLoss, UntrainedIsNearUniform) {
  const auto& d = toy();
  const Vocabulary v = small_vocab();
  const auto seqs = pack_all(data::make_interleaved_docs(d.corpus, 3, 32, 1, 2), d.corpus,
                             d.codes, v, 32);
  const LanguageModel m = random_model(5);
  EXPECT_NEAR(mean_lm_loss(m, seqs), std::log(static_cast<double>(v.size())), 0.1);
}

TEST(LmLoss, DecomposesOverSequencesAndPositions) {
  PrecisionScope f64(Precision::f64);
  const auto& d = toy();
  const Vocabulary v = small_vocab();
  const auto seqs = pack_all(data::make_interleaved_docs(d.corpus, 4, 6, 1, 2), d.corpus,
                             d.codes, v, 32);
  const LanguageModel m = random_model(6);
  const double batch_loss = lm_loss(m, seqs).item();

  double weighted = 0.0, weights = 0.0, direct = 0.0;
  for (const auto& s : seqs) {
    const double w = std::accumulate(s.mask.begin() + 1, s.mask.end(), 0.0);
    weighted += w * lm_loss(m, std::span(&s, 1)).item();
    weights += w;
    const Tensor logits = m.logits(s.ids, 1);
    const std::size_t V = v.size();
    for (std::size_t t = 0; t + 1 < s.size(); ++t) {
      if (s.mask[t + 1] == 0.0) continue;
      long double mx = -1e300, z = 0;
      for (std::size_t j = 0; j < V; ++j) mx = std::max<long double>(mx, logits.at(t, j));
      for (std::size_t j = 0; j < V; ++j) z += std::exp(logits.at(t, j) - mx);
      direct += static_cast<double>(mx + std::log(z) - logits.at(t, s.ids[t + 1]));
    }
  }
  EXPECT_NEAR(batch_loss, weighted / weights, 1e-10);
  EXPECT_NEAR(batch_loss, direct / weights, 1e-10);
  EXPECT_NEAR(mean_lm_loss(m, seqs), batch_loss, 1e-10);
}

TEST(LmLoss, AllMaskedIsAContractViolation) {
  MultimodalSequence s;
  const Vocabulary v = small_vocab();
  s.ids = {v.special_id(Special::bos), 3, 4};
  s.mask = {0, 0, 0};
  s.tags.assign(3, TokenKind::text);
  EXPECT_THROW(lm_loss(random_model(7), std::span(&s, 1)), ContractViolation);
}

TEST(LmCausality, SuffixChangesLeavePrefixLogitsBitIdentical) {
  const LanguageModel m = random_model(8, true);
  const Vocabulary v = m.vocab;
  Rng rng(9);
  std::uniform_int_distribution<std::size_t> len(2, 32);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = len(rng);
    const auto ids = random_ids(n, v, rng);
    const std::size_t t = std::uniform_int_distribution<std::size_t>(1, n - 1)(rng);
    auto changed = ids;
    const auto fresh = random_ids(n - t, v, rng);
    std::copy(fresh.begin(), fresh.end(), changed.begin() + t);
    const Tensor a = m.logits(ids, 1), b = m.logits(changed, 1);
    ASSERT_EQ(std::memcmp(a.data().data(), b.data().data(), t * v.size() * sizeof(double)), 0)
        << "trial " << trial;
  }
}

TEST(LmGradients, MatchFiniteDifferences) {
  PrecisionScope f64(Precision::f64);
  const auto& d = toy();
  const Vocabulary v = small_vocab();
  const LanguageModel m = random_model(10, true);
  nn::ParamList sampled = m.lora_parameters();
  m.head.collect("lm.head", sampled);
  sampled.push_back({"lm.embed", m.embed});
  const auto pre = pack_all(data::make_interleaved_docs(d.corpus, 6, 3, 1, 2), d.corpus,
                            d.codes, v, 32);
  const auto r = fd_check([&] { return lm_loss(m, pre); }, sampled, 1e-5, 3, 6);
  EXPECT_LT(r.max_relative_error, 1e-3) << r.worst_param << "[" << r.worst_index << "]";

  const std::vector<MultimodalSequence> inst{
      caption_instruction(d.corpus.samples[3], d.codes[3], v),
      generation_instruction(d.corpus.samples[4], d.codes[4], v)};
  const auto ri = fd_check([&] { return lm_loss(m, inst); }, sampled, 1e-5, 4, 6);
  EXPECT_LT(ri.max_relative_error, 1e-3) << ri.worst_param << "[" << ri.worst_index << "]";
}

TEST(Lora, RankMustBeBelowModelWidth) {
  Rng rng(1);
  LanguageModel m = LanguageModel::create(small_config(), small_vocab(), rng);
  EXPECT_THROW(m.attach_lora(16, 1.0, rng), ConfigError);
  EXPECT_THROW(m.attach_lora(0, 1.0, rng), ConfigError);
  EXPECT_NO_THROW(m.attach_lora(15, 1.0, rng));
}

TEST(Lora, MergePreservesLogits) {
  const LanguageModel adapted = random_model(11, true);
  LanguageModel merged = adapted.clone();
  merged.merge_lora();
  EXPECT_FALSE(merged.has_lora());
  EXPECT_TRUE(merged.lora_parameters().empty());
  Rng rng(12);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto ids = random_ids(1 + trial % 32, adapted.vocab, rng);
    const Tensor a = adapted.logits(ids, 1), b = merged.logits(ids, 1);
    for (std::size_t i = 0; i < a.numel(); ++i) {
      worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    }
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(Vocabulary, ExpansionKeepsOldRowsAndScalesNewOnes) {
  RunConfig c = small_config();
  Rng rng(13);
  const LanguageModel base = LanguageModel::create(c, {data::TextVocab::size(), 0}, rng);
  const LanguageModel big = expand_vocabulary(base, 200, rng);
  EXPECT_EQ(big.embed.rows(), base.embed.rows() + 200);
  const std::vector<std::size_t> text_ids{base.vocab.special_id(Special::bos), 0, 3, 6, 1};
  std::vector<std::size_t> mapped = text_ids;
  mapped[0] = big.vocab.special_id(Special::bos);
  const Tensor a = base.logits(text_ids, 1), b = big.logits(mapped, 1);
  for (std::size_t t = 0; t < text_ids.size(); ++t) {
    for (std::size_t j = 0; j < base.vocab.text; ++j) ASSERT_EQ(a.at(t, j), b.at(t, j));
    for (std::size_t s = 0; s < kNumSpecials; ++s) {
      ASSERT_EQ(a.at(t, base.vocab.special_id(Special(s))), b.at(t, big.vocab.special_id(Special(s))));
    }
  }
  double ss = 0.0;
  const std::size_t d = big.dim();
  for (std::size_t i = big.vocab.code_id(0) * d; i < (big.vocab.code_id(0) + 200) * d; ++i) {
    ss += big.embed.data()[i] * big.embed.data()[i];
  }
  EXPECT_NEAR(std::sqrt(ss / (200.0 * d)), 0.5, 0.05);
}

struct Trained {
  RunConfig config = small_config();
  LanguageModel expanded;
  std::vector<MultimodalSequence> train, val, inst_train, inst_val;
  LmStageResult lora, full;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained t;
    const auto& d = toy();
    const auto warm = text_warmup(d.corpus, t.config);
    Rng rng(14);
    t.expanded = expand_vocabulary(warm.model, kCodes, rng);
    const Vocabulary v = t.expanded.vocab;
    t.train = pack_all(data::make_interleaved_docs(d.corpus, 1, 64, 1, 2), d.corpus, d.codes, v, 32);
    t.val = pack_all(data::make_interleaved_docs(d.corpus, 2, 16, 1, 2, data::Split::val),
                     d.corpus, d.codes, v, 32);
    for (auto i : d.corpus.indices(data::Split::train)) {
      t.inst_train.push_back(caption_instruction(d.corpus.samples[i], d.codes[i], v));
    }
    for (auto i : d.corpus.indices(data::Split::val)) {
      t.inst_val.push_back(caption_instruction(d.corpus.samples[i], d.codes[i], v));
    }
    t.lora = train_lora(t.expanded, t.train, t.val, t.config);
    t.full = merge_and_finetune(t.lora.model, t.train, t.val, t.config);
    return t;
  }();
  return t;
}

TEST(Lora, OnlyAdaptersNewRowsAndHeadMove) {
  const auto& t = trained();
  const std::size_t d = 16, r = 2, V = t.expanded.vocab.size();
  const std::size_t per_block = 4 * (d * r + r * d) + (d * r + r * 4 * d) + (4 * d * r + r * d);
  EXPECT_EQ(t.lora.trainable, 2 * per_block + kCodes * d + d * V + V);

  nn::ParamList before, after;
  for (const auto& p : t.expanded.parameters()) {
    if (!p.name.starts_with("lm.head") && p.name != "lm.embed") before.push_back(p);
  }
  for (const auto& p : t.lora.model.parameters()) {
    if (!p.name.starts_with("lm.head") && p.name != "lm.embed") after.push_back(p);
  }
  EXPECT_EQ(digest_of(before), digest_of(after));
  const auto old_embed = t.expanded.embed.data(), new_embed = t.lora.model.embed.data();
  const std::size_t lo = t.expanded.vocab.code_id(0) * d, hi = lo + kCodes * d;
  for (std::size_t i = 0; i < old_embed.size(); ++i) {
    if (i < lo || i >= hi) ASSERT_EQ(old_embed[i], new_embed[i]);
  }
  EXPECT_FALSE(std::equal(old_embed.begin() + lo, old_embed.begin() + hi, new_embed.begin() + lo));
  EXPECT_TRUE(t.lora.model.has_lora());
}

TEST(FullFinetune, EmbeddingTableStaysFrozen) {
  const auto& t = trained();
  const auto a = t.lora.model.embed.data(), b = t.full.model.embed.data();
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  EXPECT_FALSE(t.full.model.has_lora());
  EXPECT_NE(digest_of(t.lora.model.parameters(), "lm.embed"),
            digest_of(t.full.model.parameters(), "lm.embed"));
}

TEST(Instruction, EmptyAnswersAreSkipped) {
  const auto& t = trained();
  auto seqs = t.inst_train;
  MultimodalSequence empty = seqs.front();
  std::fill(empty.mask.begin(), empty.mask.end(), 0.0);
  seqs.push_back(empty);
  testing::internal::CaptureStderr();
  const auto r = instruction_tune(t.full.model, seqs, t.inst_val, t.config);
  const std::string err = testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("skipped 1"), std::string::npos) << err;
  EXPECT_TRUE(r.model.has_lora());
  EXPECT_EQ(r.trainable, nn::count(r.model.lora_parameters()));
  EXPECT_EQ(digest_of(r.model.parameters()), digest_of(t.full.model.parameters()));
}

TEST(Generate, ConstrainedBlocksAreAlwaysWellFormed) {
  // Plain, EOS-loving, EOI-loving and code-averse models.
  std::vector<LanguageModel> models;
  for (int k = 0; k < 4; ++k) models.push_back(random_model(15 + k));
  const Vocabulary& v = models[0].vocab;
  models[1].head.bias.mutable_data()[v.special_id(Special::eos)] += 10.0;
  models[2].head.bias.mutable_data()[v.special_id(Special::eoi)] += 10.0;
  for (std::size_t k = 0; k < kCodes; ++k) models[3].head.bias.mutable_data()[v.code_id(k)] -= 10.0;
  Rng rng(16);
  std::size_t blocks = 0;
  for (int trial = 0; trial < 300; ++trial) {
    auto prompt = random_ids(1 + trial % 20, v, rng);
    for (auto& id : prompt) {
      if (id == v.special_id(Special::boi) || id == v.special_id(Special::eoi)) id = 0;
    }
    if (trial % 3 == 0) prompt.push_back(v.special_id(Special::boi));
    const LanguageModel& m = models[trial % 4];
    const std::size_t budget = 1 + trial % 24;
    const auto out = generate(m, prompt, GenerationMode::image_constrained, {1.5, 0}, budget, kQ, rng);
    std::vector<std::size_t> all = prompt;
    all.insert(all.end(), out.begin(), out.end());
    ASSERT_LE(all.size(), m.max_len);
    const auto scan = scan_image_blocks(all, v, kQ);
    for (auto len : scan.lengths) ASSERT_EQ(len, kQ) << v.render(all);
    ASSERT_TRUE(scan.well_formed) << v.render(all);
    bool inside = prompt.back() == v.special_id(Special::boi);
    for (auto id : out) {
      ASSERT_NE(id, v.special_id(Special::pad)) << v.render(all);
      ASSERT_NE(id, v.special_id(Special::bos)) << v.render(all);
      if (!inside) ASSERT_FALSE(v.is_visual(id)) << v.render(all);
      if (id == v.special_id(Special::boi)) inside = true;
      if (id == v.special_id(Special::eoi)) inside = false;
    }
    blocks += scan.lengths.size();
  }
  EXPECT_GE(blocks, 300u);
}

TEST(Generate, TinyTemperatureIsGreedy) {
  const LanguageModel m = random_model(17);
  Rng rng(18);
  for (int trial = 0; trial < 20; ++trial) {
    const auto prompt = random_ids(3, m.vocab, rng);
    Rng a(trial), b(trial + 100);
    const auto greedy = generate(m, prompt, GenerationMode::free, {0.0, 0}, 10, kQ, a);
    const auto cold = generate(m, prompt, GenerationMode::free, {1e-6, 0}, 10, kQ, b);
    EXPECT_EQ(greedy, cold);
    auto ids = prompt;
    for (auto next : greedy) {
      const Tensor logits = m.logits(ids, 1);
      const auto row = logits.data().subspan((ids.size() - 1) * m.vocab.size(), m.vocab.size());
      ASSERT_EQ(next, static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
      ids.push_back(next);
    }
  }
}

TEST(Generate, StopsAtEosAndBudget) {
  LanguageModel m = random_model(19);
  const std::size_t eos = m.vocab.special_id(Special::eos);
  Rng rng(20);
  const std::vector<std::size_t> prompt{m.vocab.special_id(Special::bos)};
  EXPECT_EQ(generate(m, prompt, GenerationMode::free, {1.0, 0}, 5, kQ, rng).size(), 5u);
  m.head.bias.mutable_data()[eos] = 100.0;
  const auto out = generate(m, prompt, GenerationMode::free, {1.0, 3}, 5, kQ, rng);
  EXPECT_EQ(out, std::vector<std::size_t>{eos});
}

TEST(Generate, SameSeedSameOutput) {
  const LanguageModel m = random_model(21);
  const std::vector<std::size_t> prompt{m.vocab.special_id(Special::bos), 3};
  Rng a(5), b(5);
  EXPECT_EQ(generate(m, prompt, GenerationMode::free, {1.0, 5}, 12, kQ, a),
            generate(m, prompt, GenerationMode::free, {1.0, 5}, 12, kQ, b));
}

TEST(BlockScan, CountsFramedBlocks) {
  const Vocabulary v = small_vocab();
  const std::size_t boi = v.special_id(Special::boi), eoi = v.special_id(Special::eoi);
  const std::size_t c = v.code_id(2);
  auto scan = scan_image_blocks(std::vector<std::size_t>{boi, c, c, c, c, eoi}, v, 4);
  EXPECT_TRUE(scan.well_formed);
  EXPECT_EQ(scan.lengths, std::vector<std::size_t>{4});
  scan = scan_image_blocks(std::vector<std::size_t>{boi, c, c, c, eoi, boi, c}, v, 4);
  EXPECT_FALSE(scan.well_formed);
  EXPECT_EQ(scan.lengths, (std::vector<std::size_t>{3, 1}));
  scan = scan_image_blocks(std::vector<std::size_t>{boi, c, c, c, c, 5}, v, 4);
  EXPECT_FALSE(scan.well_formed);
}

TEST(LmCheckpoint, RoundTripIsBitExact) {
  for (bool lora : {false, true}) {
    const LanguageModel m = random_model(22, lora);
    Checkpoint ckpt;
    m.store(ckpt);
    const std::string bytes = serialize_checkpoint(ckpt);
    const LanguageModel back = LanguageModel::load(deserialize_checkpoint(bytes), small_config());
    Checkpoint again;
    back.store(again);
    EXPECT_EQ(serialize_checkpoint(again), bytes);
    EXPECT_EQ(back.vocab, m.vocab);
    EXPECT_EQ(back.has_lora(), lora);
  }
}

}  // namespace
}  // namespace seed::lm
