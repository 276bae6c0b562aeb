#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "seed/errors.hpp"
#include "seed/eval.hpp"

namespace seed::eval {
namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.num_queries = 4;
  c.qformer_dim = 16;
  c.qformer_heads = 2;
  c.qformer_layers = 1;
  c.d_patch = 16;
  c.d_ref = 8;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  c.gen_hidden = 32;
  c.codebook_size = 16;
  c.lm_dim = 16;
  c.lm_heads = 2;
  c.lm_layers = 1;
  c.max_len = 32;
  return c;
}

struct World {
  RunConfig config = tiny_config();
  data::Corpus corpus;
  Pipeline pipeline;
  lm::CodeTable codes;
};

const World& world() {
  static const World w = [] {
    World w;
    const RunConfig& c = w.config;
    w.corpus = data::make_corpus(c.corpus_seed, c.corpus_size);
    Rng rng(1);
    w.pipeline = Pipeline{c,
                          data::ReferenceEmbedder::create(c.embedder_seed, c.d_ref),
                          PatchEmbedder::create(c.embedder_seed, c.image_size, c.patch_size, c.d_patch),
                          QFormer::create(QFormerShape::from(c), c.temperature_init, rng),
                          Codebook::create(c.codebook_size, c.qformer_dim, rng),
                          Detokenizer::create(c, rng)};
    std::vector<std::size_t> all(w.corpus.samples.size());
    std::iota(all.begin(), all.end(), 0);
    w.codes = w.pipeline.tokenize_all(w.corpus, all);
    return w;
  }();
  return w;
}

TEST(Retrieval, RecallsAreMonotoneAndPure) {
  const auto& w = world();
  for (auto source : {RetrievalSource::embedding, RetrievalSource::code}) {
    const auto a = eval_retrieval(w.pipeline, w.corpus, data::Split::test, source);
    for (const Recall& r : {a.image_to_text, a.text_to_image}) {
      EXPECT_LE(0.0, r.r1);
      EXPECT_LE(r.r1, r.r5);
      EXPECT_LE(r.r5, r.r10);
      EXPECT_LE(r.r10, 1.0);
    }
    const auto b = eval_retrieval(w.pipeline, w.corpus, data::Split::test, source);
    EXPECT_EQ(retrieval_ndjson(a, source, "d"), retrieval_ndjson(b, source, "d"));
  }
}

TEST(Retrieval, RMeanIsTheMeanOfSixRecalls) {
  const RetrievalReport r{{0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}};
  EXPECT_DOUBLE_EQ(r.r_mean(), 2.1 / 6.0);
}

TEST(Retrieval, UntrainedModelIsAtChance) {
  const auto& w = world();
  const auto chance = chance_r1(w.corpus, data::Split::test);
  const auto r = eval_retrieval(w.pipeline, w.corpus, data::Split::test, RetrievalSource::embedding);
  EXPECT_LT(std::abs(r.image_to_text.r1 - chance.mean), 3 * chance.sigma + 1e-12);
  EXPECT_LT(std::abs(r.text_to_image.r1 - chance.mean), 3 * chance.sigma + 1e-12);
}

TEST(Retrieval, TrainSplitAndSmallGalleriesAreRejected) {
  const auto& w = world();
  EXPECT_THROW(eval_retrieval(w.pipeline, w.corpus, data::Split::train, RetrievalSource::code),
               ContractViolation);
  const auto small = data::make_corpus(7, 60);
  EXPECT_THROW(eval_retrieval(w.pipeline, small, data::Split::test, RetrievalSource::embedding),
               ContractViolation);
  EXPECT_THROW(eval_reconstruction(w.pipeline, w.corpus, data::Split::train), ContractViolation);
}

TEST(Reconstruction, UpperBoundIsOne) {
  const auto& w = world();
  const auto r = eval_reconstruction(w.pipeline, w.corpus, data::Split::val);
  EXPECT_NEAR(r.upper_bound, 1.0, 1e-12);
  EXPECT_EQ(r.count, w.corpus.indices(data::Split::val).size());
  EXPECT_LT(r.reference_score, r.upper_bound);
  const auto again = eval_reconstruction(w.pipeline, w.corpus, data::Split::val);
  EXPECT_EQ(r.reference_score, again.reference_score);
}

lm::LanguageModel tiny_lm(std::uint64_t seed) {
  Rng rng(seed);
  const auto& c = world().config;
  return lm::LanguageModel::create(c, {data::TextVocab::size(), c.codebook_size}, rng);
}

std::vector<data::Caption> test_captions() {
  std::vector<data::Caption> out;
  for (auto i : world().corpus.indices(data::Split::test)) out.push_back(world().corpus.samples[i].caption);
  return out;
}

TEST(Wellformedness, ConstrainedIsAlwaysWellFormed) {
  const auto m = tiny_lm(2);
  const auto r = eval_wellformedness(m, test_captions(), lm::GenerationMode::image_constrained,
                                     100, world().config, 9);
  EXPECT_EQ(r.fraction(), 1.0);
  EXPECT_EQ(r.without_block, 0u);
}

TEST(Wellformedness, FreeModeIsReproducible) {
  const auto m = tiny_lm(3);
  const auto a = eval_wellformedness(m, test_captions(), lm::GenerationMode::free, 100,
                                     world().config, 9);
  const auto b = eval_wellformedness(m, test_captions(), lm::GenerationMode::free, 100,
                                     world().config, 9);
  EXPECT_EQ(wellformedness_ndjson(a, "x", "d"), wellformedness_ndjson(b, "x", "d"));
  EXPECT_LT(a.fraction(), 1.0);
  EXPECT_THROW(eval_wellformedness(m, test_captions(), lm::GenerationMode::free, 99,
                                   world().config, 9),
               ContractViolation);
}

Checkpoint lm_checkpoint(const lm::LanguageModel& m, const RunConfig& c) {
  Checkpoint ckpt = stage_checkpoint(c, "lm_lora", "");
  m.store(ckpt);
  return ckpt;
}

TEST(TwoStage, IdenticalCheckpointsGiveIdenticalReports) {
  const auto& w = world();
  const auto ckpt = lm_checkpoint(tiny_lm(4), w.config);
  TwoStageInputs in{&w.corpus, &w.pipeline, &w.codes, {}, data::Split::val};
  in.held_out = captioning_sequences(w.corpus, data::Split::val, w.codes, tiny_lm(4).vocab);
  const auto entries = eval_two_stage(ckpt, ckpt, w.config, in);
  ASSERT_EQ(entries.size(), 6u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(entries[i].metric, entries[i + 3].metric);
    EXPECT_EQ(entries[i].value, entries[i + 3].value);
    EXPECT_EQ(entries[i].config_digest, config_digest(w.config));
  }
  for (const auto& line : {ablation_ndjson(entries)}) {
    std::istringstream lines(line);
    std::string l;
    while (std::getline(lines, l)) EXPECT_EQ(nlohmann::json::parse(l)["config_digest"], config_digest(w.config));
  }
}

TEST(TwoStage, LineageMismatchIsRejected) {
  const auto& w = world();
  RunConfig other = w.config;
  other.seed = 99;
  TwoStageInputs in{&w.corpus, &w.pipeline, &w.codes, {}, data::Split::val};
  in.held_out = captioning_sequences(w.corpus, data::Split::val, w.codes, tiny_lm(4).vocab);
  EXPECT_THROW(eval_two_stage(lm_checkpoint(tiny_lm(4), w.config),
                              lm_checkpoint(tiny_lm(4), other), w.config, in),
               ContractViolation);
}

TEST(Captioning, MaskCoversCaptionOnly) {
  const auto& w = world();
  const lm::Vocabulary v{data::TextVocab::size(), w.config.codebook_size};
  const auto seqs = captioning_sequences(w.corpus, data::Split::val, w.codes, v);
  ASSERT_FALSE(seqs.empty());
  const auto& s = seqs.front();
  EXPECT_EQ(s.size(), 1 + w.config.num_queries + 2 + 6);
  for (std::size_t t = 0; t < s.size(); ++t) EXPECT_EQ(s.mask[t], t >= 1 + w.config.num_queries + 2 ? 1.0 : 0.0);
}

TEST(Output, TablesAndCharts) {
  const RetrievalReport r{{0.5, 0.75, 1.0}, {0.25, 0.5, 0.75}};
  const auto table = retrieval_table({{"embedding", r}});
  EXPECT_NE(table.find("R@mean"), std::string::npos);
  EXPECT_NE(table.find("0.6250"), std::string::npos);
  const auto dir = std::filesystem::temp_directory_path() / "seed_eval_test";
  write_recall_svg(dir / "recall.svg", {{"embedding", r}, {"code", r}});
  WellformednessReport wf;
  wf.block_lengths = {{8, 3}, {7, 1}};
  write_histogram_svg(dir / "blocks.svg", "block lengths", wf.block_lengths);
  for (const char* name : {"recall.svg", "blocks.svg"}) {
    std::ifstream in(dir / name);
    std::string first;
    std::getline(in, first);
    EXPECT_TRUE(first.starts_with("<svg")) << name;
  }
  std::filesystem::remove_all(dir);
  const auto line = nlohmann::json::parse(reconstruction_ndjson({0.9, 1.0, 5}, "causal", "d"));
  EXPECT_EQ(line["reference_score"], 0.9);
}

}  // namespace
}  // namespace seed::eval
