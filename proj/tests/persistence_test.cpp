#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "seed/checkpoint.hpp"
#include "seed/config.hpp"
#include "seed/digest.hpp"
#include "seed/errors.hpp"
#include "seed/recipe.hpp"

namespace seed {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("seed_persistence_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

TEST(Config, SerializeParseRoundTrip) {
  RunConfig c;
  c.attention_mode = AttentionMode::bilateral;
  c.codebook_update = CodebookUpdate::loss;
  c.lora_alpha = 6.5;
  c.stage2_lr = 1.25e-3;
  c.tune_qformer = true;
  c.precision = Precision::f64;
  const std::string text = serialize_config(c);
  EXPECT_EQ(serialize_config(parse_config(text)), text);
  EXPECT_EQ(config_digest(parse_config(text)), config_digest(c));
  EXPECT_NE(config_digest(c), config_digest(RunConfig{}));
}

TEST(Config, CommentsAndDefaults) {
  const RunConfig c = parse_config("# recipe\n\nnum_queries = 4   # shorter blocks\nseed=9\n");
  EXPECT_EQ(c.num_queries, 4u);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.codebook_size, RunConfig{}.codebook_size);
}

TEST(Config, RejectsUnknownDuplicateAndMalformed) {
  EXPECT_THROW(parse_config("no_such_key = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = lots\n"), ConfigError);
  EXPECT_THROW(parse_config("attention_mode = sideways\n"), ConfigError);
  EXPECT_THROW(parse_config("just words\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/seed.cfg"), ConfigError);
}

TEST(Config, ValidateCatchesInconsistentShapes) {
  RunConfig c;
  c.qformer_heads = 5;
  EXPECT_THROW(validate(c), ConfigError);
  c = RunConfig{};
  c.max_len = c.num_queries + 2;
  EXPECT_THROW(validate(c), ConfigError);
  EXPECT_NO_THROW(validate(RunConfig{}));
}

Checkpoint sample_checkpoint() {
  Checkpoint ckpt;
  ckpt.metadata[meta_keys::kStage] = "test";
  ckpt.metadata[meta_keys::kSeed] = "3";
  ckpt.add("b", Tensor::matrix(2, 3, {1, -2, 3.5, 0.1, 1e-8, -7}));
  ckpt.add("a", Tensor::matrix(1, 1, {42}));
  return ckpt;
}

TEST(CheckpointContainer, SaveLoadSaveIsByteIdentical) {
  const auto dir = scratch("ckpt");
  save_checkpoint(sample_checkpoint(), dir / "x.ckpt");
  save_checkpoint(load_checkpoint(dir / "x.ckpt"), dir / "y.ckpt");
  EXPECT_EQ(slurp(dir / "x.ckpt"), slurp(dir / "y.ckpt"));
  const auto back = load_checkpoint(dir / "y.ckpt");
  EXPECT_EQ(back.meta(meta_keys::kStage), "test");
  EXPECT_EQ(back.get("b").at(1, 0), static_cast<double>(0.1f));
  fs::remove_all(dir);
}

TEST(CheckpointContainer, RejectsBadVersionLengthAndTruncation) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  std::string bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_THROW(deserialize_checkpoint(bad_version), LoadError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 2)), LoadError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), LoadError);
  EXPECT_THROW(deserialize_checkpoint("NOTACKPT"), LoadError);
  // Entry "a" is last: its count field sits right before the final 4 payload bytes.
  std::string bad_count = bytes;
  bad_count[bytes.size() - 4 - 8] = 2;
  EXPECT_THROW(deserialize_checkpoint(bad_count), LoadError);
}

TEST(CheckpointContainer, MissingFileNamesThePath) {
  try {
    load_checkpoint("/nonexistent/dir/model.ckpt");
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/model.ckpt"), std::string::npos);
  }
}

TEST(DirLock, SecondHolderIsRejectedUntilRelease) {
  const auto dir = scratch("lock");
  {
    recipe::DirLock a(dir / "out");
    EXPECT_TRUE(fs::exists(dir / "out" / ".lock"));
    EXPECT_THROW(recipe::DirLock b(dir / "out"), ConfigError);
    EXPECT_NO_THROW(recipe::DirLock c(dir / "other"));
  }
  EXPECT_FALSE(fs::exists(dir / "out" / ".lock"));
  EXPECT_NO_THROW(recipe::DirLock again(dir / "out"));
  fs::remove_all(dir);
}

TEST(Manifest, RoundTrip) {
  const auto dir = scratch("manifest");
  recipe::Manifest m;
  m.command = "train-qformer";
  m.config_digest = config_digest(RunConfig{});
  m.inputs["in.ckpt"] = sha256_hex("in");
  m.outputs["out.ckpt"] = sha256_hex("out");
  m.wall_seconds = 1.5;
  recipe::write_manifest(dir, m);
  const auto back = recipe::read_manifest(dir / "manifest.json");
  EXPECT_EQ(back.command, m.command);
  EXPECT_EQ(back.config_digest, m.config_digest);
  EXPECT_EQ(back.inputs, m.inputs);
  EXPECT_EQ(back.outputs, m.outputs);
  EXPECT_EQ(back.wall_seconds, 1.5);
  fs::remove_all(dir);
}

TEST(Recipe, LoadForChecksPathAndConfig) {
  const auto dir = scratch("load_for");
  RunConfig c;
  try {
    recipe::load_for(dir / "missing.ckpt", c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.ckpt"), std::string::npos);
  }
  save_checkpoint(stage_checkpoint(c, "x", ""), dir / "a.ckpt");
  EXPECT_NO_THROW(recipe::load_for(dir / "a.ckpt", c));
  RunConfig other = c;
  other.seed = 2;
  EXPECT_THROW(recipe::load_for(dir / "a.ckpt", other), ConfigError);
  fs::remove_all(dir);
}

TEST(Recipe, CodeStreamValidation) {
  const auto dir = scratch("codes");
  const std::vector<std::size_t> items{0, 1};
  write_code_stream(dir / "c.ndjson", items, {{1, 2}, {3, 4}});
  const auto table = recipe::read_code_stream(dir / "c.ndjson", 2);
  EXPECT_EQ(table[1], (VisualCodes{3, 4}));
  EXPECT_THROW(recipe::read_code_stream(dir / "c.ndjson", 3), LoadError);
  write(dir / "bad.ndjson", "{\"sample\": 0}\n");
  EXPECT_THROW(recipe::read_code_stream(dir / "bad.ndjson", 1), LoadError);
  fs::remove_all(dir);
}

TEST(Recipe, StageNames) {
  for (auto s : {recipe::LmStage::lora, recipe::LmStage::full, recipe::LmStage::instruct}) {
    EXPECT_EQ(recipe::parse_lm_stage(recipe::to_string(s)), s);
  }
  EXPECT_THROW(recipe::parse_lm_stage("pretrain"), ConfigError);
}

// A whole recipe at the smallest sizes that still exercise every step.
RunConfig micro_config() {
  RunConfig c;
  c.corpus_size = 240;
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
  c.stage1_epochs = 2;
  c.stage2_epochs = 2;
  c.lm_dim = 16;
  c.lm_heads = 2;
  c.lm_layers = 1;
  c.max_len = 32;
  c.lora_rank = 2;
  c.instruct_lora_rank = 2;
  c.n_docs = 32;
  c.text_warmup_epochs = 1;
  c.lora_epochs = 1;
  c.full_epochs = 1;
  c.instruct_epochs = 1;
  c.n_generations = 100;
  return c;
}

void run_recipe(const recipe::RunLayout& run, const RunConfig& c) {
  recipe::gen_corpus(run, c);
  recipe::train_qformer(run, c);
  recipe::train_tokenizer(run, c);
  for (auto s : {recipe::LmStage::lora, recipe::LmStage::full, recipe::LmStage::instruct}) {
    recipe::train_lm(run, c, s);
  }
  recipe::eval_retrieval(run, c);
  recipe::eval_recon(run, c);
  recipe::eval_ablation(run, c, std::nullopt);
}

std::map<std::string, std::string> metric_files(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.path().extension() == ".ndjson") {
      out[fs::relative(e.path(), root).string()] = sha256_file(e.path());
    }
  }
  return out;
}

struct MicroRuns {
  fs::path dir;
  recipe::RunLayout a, b;
};

const MicroRuns& micro_runs() {
  static const MicroRuns runs = [] {
    MicroRuns r;
    r.dir = scratch("recipe");
    r.a = {r.dir / "a"};
    r.b = {r.dir / "b"};
    run_recipe(r.a, micro_config());
    run_recipe(r.b, micro_config());
    return r;
  }();
  return runs;
}

TEST(Recipe, EndToEndIsReproducible) {
  const auto& r = micro_runs();
  const auto a = metric_files(r.a.root), b = metric_files(r.b.root);
  EXPECT_GE(a.size(), 10u);
  EXPECT_EQ(a, b);
  EXPECT_EQ(sha256_file(r.a.lm(recipe::LmStage::instruct)),
            sha256_file(r.b.lm(recipe::LmStage::instruct)));
}

TEST(Recipe, EveryStepWritesAManifest) {
  const auto& r = micro_runs();
  const std::vector<fs::path> dirs{r.a.corpus_dir(),
                                   r.a.qformer_dir(),
                                   r.a.tokenizer_dir(),
                                   r.a.lm_dir(recipe::LmStage::lora),
                                   r.a.lm_dir(recipe::LmStage::full),
                                   r.a.lm_dir(recipe::LmStage::instruct),
                                   r.a.eval_dir("retrieval"),
                                   r.a.eval_dir("recon"),
                                   r.a.eval_dir("ablation")};
  for (const auto& d : dirs) {
    const auto m = recipe::read_manifest(d / "manifest.json");
    EXPECT_EQ(m.config_digest, config_digest(micro_config())) << d;
    EXPECT_FALSE(m.outputs.empty()) << d;
    for (const auto& [path, digest] : m.outputs) EXPECT_EQ(sha256_file(path), digest) << path;
    for (const auto& [path, digest] : m.inputs) EXPECT_EQ(sha256_file(path), digest) << path;
    EXPECT_FALSE(fs::exists(d / ".lock"));
  }
}

TEST(Recipe, LineageIsIntactAndTamperingIsCaught) {
  const auto& r = micro_runs();
  EXPECT_TRUE(recipe::check_lineage(r.a).empty());
  const auto copy = recipe::RunLayout{r.dir / "tampered"};
  fs::remove_all(copy.root);
  fs::copy(r.a.root, copy.root, fs::copy_options::recursive);
  // Nudge one tokenizer parameter after the LM was trained from it.
  Checkpoint tok = load_checkpoint(copy.tokenizer());
  Tensor t = tok.entries.front().tensor;
  t.mutable_data()[0] += 1.0;
  save_checkpoint(tok, copy.tokenizer());
  const auto broken = recipe::check_lineage(copy);
  ASSERT_FALSE(broken.empty());
  EXPECT_NE(broken.front().find("lm_lora"), std::string::npos);
}

TEST(Recipe, ConfigMustMatchTheRun) {
  const auto& r = micro_runs();
  RunConfig other = micro_config();
  other.lora_epochs = 2;
  EXPECT_THROW(recipe::train_lm(r.a, other, recipe::LmStage::lora), ConfigError);
}

TEST(Recipe, LockedOutputDirectoryIsRefused) {
  const auto& r = micro_runs();
  const auto copy = recipe::RunLayout{r.dir / "locked"};
  fs::remove_all(copy.root);
  fs::copy(r.a.root, copy.root, fs::copy_options::recursive);
  recipe::DirLock held(copy.eval_dir("recon"));
  EXPECT_THROW(recipe::eval_recon(copy, micro_config()), ConfigError);
}

TEST(Recipe, TokenizeDetokenizeGenerate) {
  const auto& r = micro_runs();
  const RunConfig c = micro_config();
  const auto out = r.dir / "tools";
  fs::remove_all(out);
  const auto image = r.a.corpus_dir() / "images";
  const auto first = fs::directory_iterator(image)->path();
  recipe::tokenize(r.a, c, first, out / "tok");
  const auto codes = recipe::read_code_stream(r.a.codes(), c.corpus_size);
  const std::string line = slurp(out / "tok" / "codes.ndjson");
  EXPECT_NE(line.find("\"codes\""), std::string::npos);
  const std::string d = recipe::detokenize(r.a, c, codes[0], out / "detok");
  EXPECT_NE(d.find("nearest image"), std::string::npos);
  const std::string g = recipe::generate(r.a, c, "a red circle on the top",
                                         lm::GenerationMode::image_constrained, 3, 5,
                                         out / "gen");
  EXPECT_EQ(std::count(g.begin(), g.end(), '\n'), 3);
  EXPECT_NE(g.find("<boi>"), std::string::npos);
  EXPECT_THROW(recipe::generate(r.a, c, "a mauve blob", lm::GenerationMode::free, 1, 5,
                                out / "gen2"),
               ConfigError);
  EXPECT_THROW(recipe::tokenize(r.a, c, "/nonexistent.raw", out / "tok2"), ConfigError);
}

#ifdef SEED_CLI_PATH
struct Outcome {
  int code = 0;
  std::string output;
};

Outcome run_cli(const std::string& args) {
  const std::string cmd = std::string(SEED_CLI_PATH) + " " + args + " 2>&1";
  Outcome o;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe)) o.output += buf;
  const int status = ::pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli");
  write(dir / "ok.cfg", "seed = 1\n");
  write(dir / "bad.cfg", "seed = 1\nwarp_factor = 9\n");
  write(dir / "raw", "");

  const auto missing = run_cli("tokenize -c " + (dir / "ok.cfg").string() + " -r " +
                               (dir / "run").string() + " --image " + (dir / "raw").string() +
                               " -o " + (dir / "out").string());
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.output.find((dir / "run" / "corpus" / "frozen.ckpt").string()),
            std::string::npos)
      << missing.output;

  const auto bad = run_cli("gen-corpus -c " + (dir / "bad.cfg").string() + " -r " +
                           (dir / "run").string());
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.output.find("warp_factor"), std::string::npos);

  EXPECT_EQ(run_cli("train-lm -c " + (dir / "ok.cfg").string() + " -r x --stage warmup").code, 2);
  EXPECT_EQ(run_cli("no-such-command").code, 2);

  const auto verify = run_cli("verify -o " + (dir / "verify").string());
  EXPECT_EQ(verify.code, 0) << verify.output;
  EXPECT_TRUE(fs::exists(dir / "verify" / "manifest.json"));
  fs::remove_all(dir);
}
#endif

}  // namespace
}  // namespace seed
