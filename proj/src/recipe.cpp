#include "seed/recipe.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "seed/digest.hpp"
#include "seed/errors.hpp"
#include "seed/qformer.hpp"
#include "seed/stage_io.hpp"

namespace seed::recipe {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kExpandTag = 0x5747e7;
constexpr std::uint64_t kUntrainedTag = 0x5747e8;

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void require_file(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("missing input: " + path.string());
}

std::vector<std::size_t> all_items(const data::Corpus& corpus) {
  std::vector<std::size_t> items(corpus.samples.size());
  std::iota(items.begin(), items.end(), 0);
  return items;
}

data::Corpus load_corpus(const RunLayout& layout) {
  require_file(layout.corpus_manifest());
  return data::read_corpus(layout.corpus_dir());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

// Files a step produced: everything under its directory but the lock and
// the manifest itself.
std::vector<fs::path> produced_files(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    if (name == ".lock" || name == "manifest.json") continue;
    files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

void finish(const fs::path& dir, const std::string& command, const RunConfig& config,
            const std::vector<fs::path>& inputs, const Stopwatch& clock) {
  Manifest m;
  m.command = command;
  m.config_digest = config_digest(config);
  for (const auto& p : inputs) m.inputs[p.string()] = sha256_file(p);
  for (const auto& p : produced_files(dir)) m.outputs[p.string()] = sha256_file(p);
  m.wall_seconds = clock.seconds();
  write_manifest(dir, m);
}

Checkpoint final_checkpoint(const RunConfig& config, const std::string& stage,
                            const fs::path& parent) {
  return stage_checkpoint(config, stage, sha256_file(parent));
}

std::string format(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<data::Caption> split_captions(const data::Corpus& corpus, data::Split split) {
  std::vector<data::Caption> out;
  for (auto i : corpus.indices(split)) out.push_back(corpus.samples[i].caption);
  return out;
}

data::Caption parse_words(const std::string& text) {
  std::istringstream in(text);
  data::Caption caption;
  std::string word;
  while (in >> word) caption.push_back(data::TextVocab::id(word));
  if (caption.empty()) throw ConfigError("empty caption");
  return caption;
}

}  // namespace

std::string to_string(LmStage s) {
  switch (s) {
    case LmStage::lora: return "lora";
    case LmStage::full: return "full";
    case LmStage::instruct: return "instruct";
  }
  return "?";
}

LmStage parse_lm_stage(const std::string& s) {
  if (s == "lora") return LmStage::lora;
  if (s == "full") return LmStage::full;
  if (s == "instruct") return LmStage::instruct;
  throw ConfigError("unknown lm stage '" + s + "' (expected lora, full or instruct)");
}

DirLock::DirLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw ConfigError("output directory is locked by another process: " + path_.string());
    }
    throw ConfigError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

DirLock::~DirLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

void write_manifest(const fs::path& dir, const Manifest& m) {
  Json j;
  j["command"] = m.command;
  j["config_digest"] = m.config_digest;
  j["inputs"] = Json::object();
  for (const auto& [k, v] : m.inputs) j["inputs"][k] = v;
  j["outputs"] = Json::object();
  for (const auto& [k, v] : m.outputs) j["outputs"][k] = v;
  j["wall_seconds"] = m.wall_seconds;
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

Manifest read_manifest(const fs::path& path) {
  require_file(path);
  std::ifstream in(path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("bad manifest " + path.string() + ": " + e.what());
  }
  Manifest m;
  m.command = j.at("command");
  m.config_digest = j.at("config_digest");
  for (const auto& [k, v] : j.at("inputs").items()) m.inputs[k] = v;
  for (const auto& [k, v] : j.at("outputs").items()) m.outputs[k] = v;
  m.wall_seconds = j.at("wall_seconds");
  return m;
}

Checkpoint load_for(const fs::path& path, const RunConfig& config) {
  require_file(path);
  Checkpoint ckpt = load_checkpoint(path);
  const std::string want = config_digest(config);
  const std::string got = ckpt.meta(meta_keys::kConfigDigest);
  if (got != want) {
    throw ConfigError(path.string() + " was written under config " + got.substr(0, 12) +
                      ", current config is " + want.substr(0, 12));
  }
  return ckpt;
}

void check_run_config(const RunLayout& layout, const RunConfig& config) {
  require_file(layout.config());
  const RunConfig stored = load_config(layout.config());
  if (config_digest(stored) != config_digest(config)) {
    throw ConfigError("config differs from the one this run was started with (" +
                      layout.config().string() + ")");
  }
}

lm::CodeTable read_code_stream(const fs::path& path, std::size_t corpus_size) {
  require_file(path);
  std::ifstream in(path);
  lm::CodeTable table(corpus_size);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const std::size_t sample = j.at("sample");
      if (sample >= corpus_size) throw LoadError("sample out of range in " + path.string());
      table[sample] = j.at("codes").get<VisualCodes>();
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("bad code stream " + path.string() + ": " + e.what());
    }
    ++lines;
  }
  if (lines != corpus_size) {
    throw LoadError(path.string() + " has " + std::to_string(lines) + " records, expected " +
                    std::to_string(corpus_size));
  }
  return table;
}

Pipeline load_pipeline(const RunLayout& layout, const RunConfig& config) {
  const Checkpoint frozen = load_for(layout.frozen(), config);
  const Checkpoint tok = load_for(layout.tokenizer(), config);
  return Pipeline{config,
                  data::ReferenceEmbedder::load(frozen),
                  PatchEmbedder::load(frozen),
                  QFormer::load(tok, QFormerShape::from(config)),
                  Codebook::load(tok),
                  Detokenizer::load(tok, config)};
}

lm::LanguageModel load_lm(const RunLayout& layout, LmStage stage, const RunConfig& config) {
  return lm::LanguageModel::load(load_for(layout.lm(stage), config), config);
}

LmData lm_data(const data::Corpus& corpus, const lm::CodeTable& codes, const lm::Vocabulary& vocab,
               const RunConfig& config) {
  LmData d;
  const auto docs = data::make_interleaved_docs(corpus, config.seed, config.n_docs,
                                                config.images_per_doc_min,
                                                config.images_per_doc_max);
  const auto val_docs = data::make_interleaved_docs(
      corpus, config.seed + 1, std::max<std::size_t>(1, config.n_docs / 8),
      config.images_per_doc_min, config.images_per_doc_max, data::Split::val);
  d.train_docs = lm::pack_all(docs, corpus, codes, vocab, config.max_len);
  d.val_docs = lm::pack_all(val_docs, corpus, codes, vocab, config.max_len);
  for (auto i : corpus.indices(data::Split::train)) {
    const auto& s = corpus.samples[i];
    d.caption_train.push_back(lm::caption_instruction(s, codes[i], vocab));
    d.instruct_train.push_back(d.caption_train.back());
    d.instruct_train.push_back(lm::generation_instruction(s, codes[i], vocab));
  }
  for (auto i : corpus.indices(data::Split::val)) {
    const auto& s = corpus.samples[i];
    d.instruct_val.push_back(lm::caption_instruction(s, codes[i], vocab));
    d.instruct_val.push_back(lm::generation_instruction(s, codes[i], vocab));
  }
  return d;
}

std::string gen_corpus(const RunLayout& layout, const RunConfig& config) {
  Stopwatch clock;
  validate(config);
  DirLock lock(layout.corpus_dir());
  const auto corpus = data::make_corpus(config.corpus_seed, config.corpus_size,
                                        {config.image_size, config.synonym_prob});
  data::write_corpus(corpus, layout.corpus_dir());
  write_text(layout.config(), serialize_config(config));
  Checkpoint frozen = stage_checkpoint(config, "frozen", "");
  data::ReferenceEmbedder::create(config.embedder_seed, config.d_ref).store(frozen);
  PatchEmbedder::create(config.embedder_seed, config.image_size, config.patch_size,
                        config.d_patch)
      .store(frozen);
  save_checkpoint(frozen, layout.frozen());
  finish(layout.corpus_dir(), "gen-corpus", config, {}, clock);
  std::ostringstream s;
  s << "corpus: " << corpus.samples.size() << " samples (train "
    << corpus.indices(data::Split::train).size() << ", val "
    << corpus.indices(data::Split::val).size() << ", test "
    << corpus.indices(data::Split::test).size() << ") in " << layout.corpus_dir().string();
  return s.str();
}

std::string train_qformer(const RunLayout& layout, const RunConfig& config) {
  Stopwatch clock;
  check_run_config(layout, config);
  const Checkpoint frozen = load_for(layout.frozen(), config);
  const auto corpus = load_corpus(layout);
  DirLock lock(layout.qformer_dir());
  const auto embedder = data::ReferenceEmbedder::load(frozen);
  const auto patches = PatchEmbedder::load(frozen);
  const std::string parent = sha256_file(layout.frozen());
  const auto result = train_stage1(corpus, embedder, patches, config,
                                   {layout.qformer_dir(), parent});
  Checkpoint ckpt = final_checkpoint(config, "stage1", layout.frozen());
  result.model.store(ckpt);
  save_checkpoint(ckpt, layout.qformer());
  finish(layout.qformer_dir(), "train-qformer", config,
         {layout.config(), layout.frozen(), layout.corpus_manifest()}, clock);
  const auto& m = result.metrics.back();
  return "stage 1: " + std::to_string(m.epoch) + " epochs, loss " + format("%.4f", m.loss) +
         ", val R@1 " + format("%.3f", m.r1) + ", temperature " +
         format("%.4f", m.temperature);
}

std::string train_tokenizer(const RunLayout& layout, const RunConfig& config) {
  Stopwatch clock;
  check_run_config(layout, config);
  const Checkpoint frozen = load_for(layout.frozen(), config);
  const Checkpoint stage1 = load_for(layout.qformer(), config);
  const auto corpus = load_corpus(layout);
  DirLock lock(layout.tokenizer_dir());
  const auto embedder = data::ReferenceEmbedder::load(frozen);
  const auto patches = PatchEmbedder::load(frozen);
  const auto qformer = QFormer::load(stage1, QFormerShape::from(config));
  const auto result = train_stage2(corpus, embedder, patches, qformer, config,
                                   {layout.tokenizer_dir(), sha256_file(layout.qformer())});
  Checkpoint ckpt = final_checkpoint(config, "stage2", layout.qformer());
  result.codebook.store(ckpt);
  result.detokenizer.store(ckpt);
  result.qformer.store(ckpt);
  save_checkpoint(ckpt, layout.tokenizer());

  const Pipeline pipeline{config, embedder, patches, result.qformer, result.codebook,
                          result.detokenizer};
  const auto items = all_items(corpus);
  write_code_stream(layout.codes(), items, pipeline.tokenize_all(corpus, items));
  finish(layout.tokenizer_dir(), "train-tokenizer", config,
         {layout.config(), layout.frozen(), layout.qformer(),
          layout.corpus_manifest()},
         clock);
  const auto& m = result.metrics.back();
  return "stage 2: " + std::to_string(m.epoch) + " epochs, val reference score " +
         format("%.4f", m.val_reference_score) + ", perplexity " + format("%.1f", m.perplexity);
}

std::string train_lm(const RunLayout& layout, const RunConfig& config, LmStage stage) {
  Stopwatch clock;
  check_run_config(layout, config);
  const auto corpus = load_corpus(layout);
  require_file(layout.tokenizer());
  const auto codes = read_code_stream(layout.codes(), corpus.samples.size());
  const fs::path dir = layout.lm_dir(stage);
  std::vector<fs::path> inputs{layout.config(), layout.codes(),
                               layout.corpus_manifest()};
  lm::LmStageResult result;
  std::string extra;

  if (stage == LmStage::lora) {
    load_for(layout.tokenizer(), config);
    DirLock lock(dir);
    const std::string parent = sha256_file(layout.tokenizer());
    const auto warm = lm::text_warmup(corpus, config, {dir, parent});
    Rng rng(mix_seed(config.seed, kExpandTag));
    const auto expanded = lm::expand_vocabulary(warm.model, config.codebook_size, rng);
    const auto d = lm_data(corpus, codes, expanded.vocab, config);
    result = lm::train_lora(expanded, d.train_docs, d.val_docs, config, {dir, parent});
    inputs.push_back(layout.tokenizer());
    Checkpoint ckpt = final_checkpoint(config, "lm_lora", layout.tokenizer());
    result.model.store(ckpt);
    save_checkpoint(ckpt, layout.lm(stage));
    finish(dir, "train-lm --stage lora", config, inputs, clock);
  } else {
    const LmStage from = stage == LmStage::full ? LmStage::lora : LmStage::full;
    const auto base = load_lm(layout, from, config);
    DirLock lock(dir);
    const std::string parent = sha256_file(layout.lm(from));
    const auto d = lm_data(corpus, codes, base.vocab, config);
    if (stage == LmStage::full) {
      result = lm::merge_and_finetune(base, d.train_docs, d.val_docs, config, {dir, parent});
    } else {
      result = lm::instruction_tune(base, d.instruct_train, d.instruct_val, config, {dir, parent});
      const double acc = lm::next_token_accuracy(result.model, d.caption_train);
      Json j;
      j["metric"] = "caption_instruction_accuracy";
      j["split"] = "train";
      j["value"] = acc;
      j["config_digest"] = config_digest(config);
      write_text(dir / "instruct_eval.ndjson", j.dump() + "\n");
      extra = ", train caption accuracy " + format("%.4f", acc);
    }
    inputs.push_back(layout.lm(from));
    Checkpoint ckpt = final_checkpoint(config, "lm_" + to_string(stage), layout.lm(from));
    result.model.store(ckpt);
    save_checkpoint(ckpt, layout.lm(stage));
    finish(dir, "train-lm --stage " + to_string(stage), config, inputs, clock);
  }
  const auto& m = result.metrics.back();
  return "lm " + to_string(stage) + ": " + std::to_string(m.epoch) + " epochs, train loss " +
         format("%.4f", m.train_loss) + ", val loss " + format("%.4f", m.val_loss) +
         ", trainable " + std::to_string(result.trainable) + extra;
}

std::string eval_retrieval(const RunLayout& layout, const RunConfig& config) {
  Stopwatch clock;
  check_run_config(layout, config);
  const auto corpus = load_corpus(layout);
  const Pipeline pipeline = load_pipeline(layout, config);
  const fs::path dir = layout.eval_dir("retrieval");
  DirLock lock(dir);
  const std::string digest = config_digest(config);
  std::vector<std::pair<std::string, eval::RetrievalReport>> rows;
  std::string lines;
  for (auto source : {eval::RetrievalSource::embedding, eval::RetrievalSource::code}) {
    const auto r = eval::eval_retrieval(pipeline, corpus, data::Split::test, source);
    rows.emplace_back(eval::to_string(source), r);
    lines += eval::retrieval_ndjson(r, source, digest);
  }
  const auto chance = eval::chance_r1(corpus, data::Split::test);
  Json j;
  j["metric"] = "chance_r1";
  j["mean"] = chance.mean;
  j["sigma"] = chance.sigma;
  j["gallery"] = corpus.indices(data::Split::test).size();
  j["config_digest"] = digest;
  lines += j.dump() + "\n";
  write_text(dir / "retrieval.ndjson", lines);
  const std::string table = eval::retrieval_table(rows) + "chance R@1 " +
                            format("%.4f", chance.mean) + " (sigma " +
                            format("%.4f", chance.sigma) + ")\n";
  write_text(dir / "summary.txt", table);
  eval::write_recall_svg(dir / "recall.svg", rows);
  finish(dir, "eval-retrieval", config,
         {layout.config(), layout.frozen(), layout.tokenizer(),
          layout.corpus_manifest()},
         clock);
  return table;
}

std::string eval_recon(const RunLayout& layout, const RunConfig& config) {
  Stopwatch clock;
  check_run_config(layout, config);
  const auto corpus = load_corpus(layout);
  const Pipeline trained = load_pipeline(layout, config);
  const fs::path dir = layout.eval_dir("recon");
  DirLock lock(dir);
  Pipeline untrained = trained;
  Rng rng(mix_seed(config.seed, kUntrainedTag));
  untrained.codebook = Codebook::create(config.codebook_size, config.qformer_dim, rng);
  untrained.detokenizer = Detokenizer::create(config, rng);
  const std::string digest = config_digest(config);
  const auto a = eval::eval_reconstruction(trained, corpus, data::Split::val);
  const auto b = eval::eval_reconstruction(untrained, corpus, data::Split::val);
  write_text(dir / "recon.ndjson", eval::reconstruction_ndjson(a, "trained", digest) +
                                       eval::reconstruction_ndjson(b, "untrained", digest));
  std::ostringstream s;
  s << "reference score (val, n=" << a.count << ")\n"
    << "  trained    " << format("%.4f", a.reference_score) << "\n"
    << "  untrained  " << format("%.4f", b.reference_score) << "\n"
    << "  upper bound " << format("%.4f", a.upper_bound) << "\n";
  write_text(dir / "summary.txt", s.str());
  finish(dir, "eval-recon", config,
         {layout.config(), layout.frozen(), layout.tokenizer(),
          layout.corpus_manifest()},
         clock);
  return s.str();
}

std::string eval_ablation(const RunLayout& layout, const RunConfig& config,
                          const std::optional<fs::path>& compare) {
  Stopwatch clock;
  check_run_config(layout, config);
  const auto corpus = load_corpus(layout);
  const Pipeline pipeline = load_pipeline(layout, config);
  const auto codes = read_code_stream(layout.codes(), corpus.samples.size());
  const Checkpoint lora = load_for(layout.lm(LmStage::lora), config);
  const Checkpoint full = load_for(layout.lm(LmStage::full), config);
  const auto instruct = load_lm(layout, LmStage::instruct, config);
  const fs::path dir = layout.eval_dir("ablation");
  DirLock lock(dir);
  const std::string digest = config_digest(config);
  std::vector<fs::path> inputs{layout.config(), layout.frozen(), layout.tokenizer(),
                               layout.codes(), layout.lm(LmStage::lora),
                               layout.lm(LmStage::full), layout.lm(LmStage::instruct)};

  eval::TwoStageInputs in{&corpus, &pipeline, &codes, {}, data::Split::val};
  in.held_out = lm_data(corpus, codes, instruct.vocab, config).val_docs;
  const auto entries = eval::eval_two_stage(lora, full, config, in);
  write_text(dir / "two_stage.ndjson", eval::ablation_ndjson(entries));

  const auto captions = split_captions(corpus, data::Split::test);
  std::vector<std::pair<std::string, eval::WellformednessReport>> rows;
  std::string lines;
  const auto score = [&](const lm::LanguageModel& model, const RunConfig& c,
                         const std::string& variant) {
    for (auto mode : {lm::GenerationMode::free, lm::GenerationMode::image_constrained}) {
      const std::string label =
          variant + (mode == lm::GenerationMode::free ? "/free" : "/constrained");
      const auto r = eval::eval_wellformedness(model, captions, mode, config.n_generations, c,
                                               config.seed);
      rows.emplace_back(label, r);
      lines += eval::wellformedness_ndjson(r, label, config_digest(c));
      if (mode == lm::GenerationMode::free) {
        eval::write_histogram_svg(dir / ("blocks_" + variant + ".svg"),
                                  "visual ids per block, " + variant + " free mode",
                                  r.block_lengths);
      }
    }
  };
  score(instruct, config, to_string(config.attention_mode));
  if (compare) {
    const RunLayout other{*compare};
    require_file(other.config());
    const RunConfig oc = load_config(other.config());
    const auto other_corpus = load_corpus(other);
    if (split_captions(other_corpus, data::Split::test) != captions) {
      throw ContractViolation("compared runs must share the test captions");
    }
    const auto other_model = load_lm(other, LmStage::instruct, oc);
    if (oc.attention_mode == config.attention_mode) {
      throw ContractViolation("compared run uses the same attention mode");
    }
    score(other_model, oc, to_string(oc.attention_mode));
    inputs.push_back(other.lm(LmStage::instruct));
  }
  write_text(dir / "wellformedness.ndjson", lines);
  const std::string summary =
      eval::ablation_table(entries) + "\n" + eval::wellformedness_table(rows);
  write_text(dir / "summary.txt", summary);
  finish(dir, "eval-ablation", config, inputs, clock);
  return summary;
}

std::string tokenize(const RunLayout& layout, const RunConfig& config, const fs::path& image,
                     const fs::path& out) {
  Stopwatch clock;
  require_file(image);
  const Pipeline pipeline = load_pipeline(layout, config);
  const auto raster = data::read_raster(image);
  DirLock lock(out);
  const VisualCodes codes = pipeline.tokenize(raster);
  Json j;
  j["image"] = image.string();
  j["codes"] = codes;
  write_text(out / "codes.ndjson", j.dump() + "\n");
  finish(out, "tokenize", config, {image, layout.frozen(), layout.tokenizer()}, clock);
  return j.dump();
}

std::string detokenize(const RunLayout& layout, const RunConfig& config, const VisualCodes& codes,
                       const fs::path& out) {
  Stopwatch clock;
  const Pipeline pipeline = load_pipeline(layout, config);
  const auto corpus = load_corpus(layout);
  DirLock lock(out);
  const auto items = all_items(corpus);
  const auto gallery = Gallery::build(pipeline.embedder, corpus, items);
  const auto d = pipeline.detokenize(codes, gallery);
  Json j;
  j["codes"] = codes;
  j["image_id"] = d.image_id;
  j["caption"] = data::caption_text(corpus.samples[d.image_id].caption);
  j["generation"] = d.generation;
  write_text(out / "detokenized.json", j.dump() + "\n");
  finish(out, "detokenize", config, {layout.frozen(), layout.tokenizer()}, clock);
  return "nearest image " + std::to_string(d.image_id) + ": " + j["caption"].get<std::string>();
}

std::string generate(const RunLayout& layout, const RunConfig& config, const std::string& caption,
                     lm::GenerationMode mode, std::size_t count, std::uint64_t seed,
                     const fs::path& out) {
  Stopwatch clock;
  const auto model = load_lm(layout, LmStage::instruct, config);
  const Pipeline pipeline = load_pipeline(layout, config);
  const auto corpus = load_corpus(layout);
  const data::Caption words = parse_words(caption);
  DirLock lock(out);
  const auto gallery = Gallery::build(pipeline.embedder, corpus, all_items(corpus));
  const auto prompt = lm::generation_prompt(words, model.vocab);
  const lm::Sampling sampling{config.sample_temperature, config.top_k};
  std::string lines, summary;
  for (std::size_t g = 0; g < count; ++g) {
    Rng rng(mix_seed(seed, g));
    const auto ids =
        lm::generate(model, prompt, mode, sampling, config.max_new, config.num_queries, rng);
    const auto scan = lm::scan_image_blocks(ids, model.vocab, config.num_queries);
    Json j;
    j["index"] = g;
    j["text"] = model.vocab.render(ids);
    j["well_formed"] = scan.well_formed;
    std::string nearest;
    if (scan.well_formed) {
      // First block of exactly Q visual ids closed by EOI.
      VisualCodes block;
      bool open = false;
      for (std::size_t t = 0; t < ids.size(); ++t) {
        const auto kind = model.vocab.kind(ids[t]);
        if (kind == lm::TokenKind::visual) {
          if (open) block.push_back(model.vocab.code_of(ids[t]));
          continue;
        }
        if (kind != lm::TokenKind::special) {
          open = false;
          continue;
        }
        const auto sp = model.vocab.special_of(ids[t]);
        if (sp == lm::Special::eoi && open && block.size() == config.num_queries) break;
        open = sp == lm::Special::boi;
        block.clear();
      }
      const auto d = pipeline.detokenize(block, gallery);
      j["image_id"] = d.image_id;
      nearest = data::caption_text(corpus.samples[d.image_id].caption);
      j["nearest_caption"] = nearest;
    }
    lines += j.dump() + "\n";
    summary += j["text"].get<std::string>();
    if (!nearest.empty()) summary += "  => " + nearest;
    summary += "\n";
  }
  write_text(out / "generations.ndjson", lines);
  finish(out, "generate", config, {layout.lm(LmStage::instruct), layout.tokenizer()}, clock);
  return summary;
}

std::vector<std::string> check_lineage(const RunLayout& layout) {
  std::vector<std::string> broken;
  const auto link = [&](const fs::path& child, const fs::path& parent) {
    if (!fs::exists(child)) return;
    if (!fs::exists(parent)) {
      broken.push_back(child.string() + ": parent " + parent.string() + " is missing");
      return;
    }
    const std::string want = sha256_file(parent);
    std::vector<fs::path> files{child};
    for (const auto& e : fs::directory_iterator(child.parent_path())) {
      if (e.path().extension() == ".ckpt" && e.path() != child &&
          e.path().filename().string().find("_epoch") != std::string::npos) {
        files.push_back(e.path());
      }
    }
    for (const auto& f : files) {
      const Checkpoint ckpt = load_checkpoint(f);
      if (ckpt.meta(meta_keys::kParentDigest) != want) {
        broken.push_back(f.string() + ": parent digest does not match " + parent.string());
      }
    }
  };
  link(layout.qformer(), layout.frozen());
  link(layout.tokenizer(), layout.qformer());
  link(layout.lm(LmStage::lora), layout.tokenizer());
  link(layout.lm(LmStage::full), layout.lm(LmStage::lora));
  link(layout.lm(LmStage::instruct), layout.lm(LmStage::full));
  return broken;
}

}  // namespace seed::recipe
