#include "seed/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <variant>
#include <vector>

#include "seed/digest.hpp"
#include "seed/errors.hpp"

namespace seed {

namespace {

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename T>
Field unsigned_field(std::string key, T RunConfig::*member) {
  return {key,
          [key, member](RunConfig& c, const std::string& v) {
            c.*member = parse_number<T>(key, v);
          },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

Field double_field(std::string key, double RunConfig::*member) {
  return {key,
          [key, member](RunConfig& c, const std::string& v) {
            c.*member = parse_number<double>(key, v);
          },
          [member](const RunConfig& c) { return format_double(c.*member); }};
}

Field bool_field(std::string key, bool RunConfig::*member) {
  return {key,
          [key, member](RunConfig& c, const std::string& v) {
            if (v == "true" || v == "1") {
              c.*member = true;
            } else if (v == "false" || v == "0") {
              c.*member = false;
            } else {
              throw ConfigError("config key '" + key + "': expected true/false, got '" +
                                v + "'");
            }
          },
          [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

template <typename E>
Field enum_field(std::string key, E RunConfig::*member,
                 std::vector<std::pair<std::string, E>> names) {
  return {key,
          [key, member, names](RunConfig& c, const std::string& v) {
            for (const auto& [n, e] : names) {
              if (n == v) {
                c.*member = e;
                return;
              }
            }
            throw ConfigError("config key '" + key + "': unknown value '" + v + "'");
          },
          [member, names](const RunConfig& c) {
            for (const auto& [n, e] : names) {
              if (e == c.*member) return n;
            }
            return std::string("?");
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> kFields = {
      unsigned_field("seed", &RunConfig::seed),
      unsigned_field("corpus_seed", &RunConfig::corpus_seed),
      unsigned_field("corpus_size", &RunConfig::corpus_size),
      unsigned_field("image_size", &RunConfig::image_size),
      unsigned_field("patch_size", &RunConfig::patch_size),
      double_field("synonym_prob", &RunConfig::synonym_prob),
      unsigned_field("embedder_seed", &RunConfig::embedder_seed),
      unsigned_field("d_patch", &RunConfig::d_patch),
      unsigned_field("d_ref", &RunConfig::d_ref),
      unsigned_field("num_queries", &RunConfig::num_queries),
      unsigned_field("qformer_dim", &RunConfig::qformer_dim),
      unsigned_field("qformer_layers", &RunConfig::qformer_layers),
      unsigned_field("qformer_heads", &RunConfig::qformer_heads),
      enum_field("attention_mode", &RunConfig::attention_mode,
                 {{"causal", AttentionMode::causal}, {"bilateral", AttentionMode::bilateral}}),
      double_field("temperature_init", &RunConfig::temperature_init),
      unsigned_field("stage1_epochs", &RunConfig::stage1_epochs),
      unsigned_field("stage1_batch", &RunConfig::stage1_batch),
      double_field("stage1_lr", &RunConfig::stage1_lr),
      unsigned_field("codebook_size", &RunConfig::codebook_size),
      unsigned_field("decoder_layers", &RunConfig::decoder_layers),
      unsigned_field("decoder_heads", &RunConfig::decoder_heads),
      unsigned_field("gen_hidden", &RunConfig::gen_hidden),
      enum_field("gen_input", &RunConfig::gen_input,
                 {{"flatten", GenInput::flatten}, {"mean", GenInput::mean}}),
      double_field("beta", &RunConfig::beta),
      double_field("lambda_gen", &RunConfig::lambda_gen),
      double_field("ema_decay", &RunConfig::ema_decay),
      enum_field("codebook_update", &RunConfig::codebook_update,
                 {{"ema", CodebookUpdate::ema}, {"loss", CodebookUpdate::loss}}),
      enum_field("codebook_distance", &RunConfig::codebook_distance,
                 {{"euclidean", CodebookDistance::euclidean},
                  {"cosine", CodebookDistance::cosine}}),
      unsigned_field("dead_code_threshold", &RunConfig::dead_code_threshold),
      bool_field("tune_qformer", &RunConfig::tune_qformer),
      bool_field("strict", &RunConfig::strict),
      unsigned_field("stage2_epochs", &RunConfig::stage2_epochs),
      unsigned_field("stage2_batch", &RunConfig::stage2_batch),
      double_field("stage2_lr", &RunConfig::stage2_lr),
      unsigned_field("lm_dim", &RunConfig::lm_dim),
      unsigned_field("lm_layers", &RunConfig::lm_layers),
      unsigned_field("lm_heads", &RunConfig::lm_heads),
      unsigned_field("max_len", &RunConfig::max_len),
      unsigned_field("lora_rank", &RunConfig::lora_rank),
      double_field("lora_alpha", &RunConfig::lora_alpha),
      unsigned_field("instruct_lora_rank", &RunConfig::instruct_lora_rank),
      unsigned_field("n_docs", &RunConfig::n_docs),
      unsigned_field("images_per_doc_min", &RunConfig::images_per_doc_min),
      unsigned_field("images_per_doc_max", &RunConfig::images_per_doc_max),
      unsigned_field("lm_batch", &RunConfig::lm_batch),
      unsigned_field("text_warmup_epochs", &RunConfig::text_warmup_epochs),
      unsigned_field("lora_epochs", &RunConfig::lora_epochs),
      unsigned_field("full_epochs", &RunConfig::full_epochs),
      unsigned_field("instruct_epochs", &RunConfig::instruct_epochs),
      double_field("text_warmup_lr", &RunConfig::text_warmup_lr),
      double_field("lr", &RunConfig::lr),
      double_field("lora_lr", &RunConfig::lora_lr),
      double_field("instruct_lr", &RunConfig::instruct_lr),
      double_field("weight_decay", &RunConfig::weight_decay),
      double_field("warmup_ratio", &RunConfig::warmup_ratio),
      double_field("adam_beta1", &RunConfig::adam_beta1),
      double_field("adam_beta2", &RunConfig::adam_beta2),
      double_field("adam_eps", &RunConfig::adam_eps),
      double_field("sample_temperature", &RunConfig::sample_temperature),
      unsigned_field("top_k", &RunConfig::top_k),
      unsigned_field("max_new", &RunConfig::max_new),
      unsigned_field("n_generations", &RunConfig::n_generations),
      enum_field("precision", &RunConfig::precision,
                 {{"f32", Precision::f32}, {"f64", Precision::f64}}),
  };
  return kFields;
}

}  // namespace

std::string to_string(AttentionMode mode) {
  return mode == AttentionMode::causal ? "causal" : "bilateral";
}

RunConfig parse_config(const std::string& text) {
  RunConfig config;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const Field* field = nullptr;
    for (const auto& f : fields()) {
      if (f.key == key) field = &f;
    }
    if (!field) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");
    field->set(config, value);
  }
  validate(config);
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

std::string config_digest(const RunConfig& config) {
  return sha256_hex(serialize_config(config));
}

void validate(const RunConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  require(c.corpus_size >= 1, "corpus_size must be >= 1");
  require(c.patch_size >= 1 && c.image_size % c.patch_size == 0,
          "image_size must be divisible by patch_size");
  require(c.image_size % 16 == 0, "image_size must be a multiple of 16");
  require(c.synonym_prob >= 0.0 && c.synonym_prob <= 1.0, "synonym_prob in [0,1]");
  require(c.num_queries >= 1, "num_queries >= 1");
  require(c.qformer_heads >= 1 && c.qformer_dim % c.qformer_heads == 0,
          "qformer_dim divisible by qformer_heads");
  require(c.decoder_heads >= 1 && c.qformer_dim % c.decoder_heads == 0,
          "qformer_dim divisible by decoder_heads");
  require(c.lm_heads >= 1 && c.lm_dim % c.lm_heads == 0, "lm_dim divisible by lm_heads");
  require(c.codebook_size >= 2, "codebook_size >= 2");
  require(c.temperature_init > 0.0, "temperature_init > 0");
  require(c.ema_decay > 0.0 && c.ema_decay < 1.0, "ema_decay in (0,1)");
  require(c.stage1_batch >= 2, "stage1_batch >= 2");
  require(c.stage2_batch >= 1 && c.lm_batch >= 1, "batch sizes >= 1");
  require(c.images_per_doc_min >= 1 && c.images_per_doc_min <= c.images_per_doc_max,
          "1 <= images_per_doc_min <= images_per_doc_max");
  require(c.max_len >= c.num_queries + 3, "max_len must fit BOS plus one image block");
  require(c.sample_temperature >= 0.0, "sample_temperature >= 0");
  require(c.warmup_ratio >= 0.0 && c.warmup_ratio < 1.0, "warmup_ratio in [0,1)");
}

}  // namespace seed
