#include "seed/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "seed/errors.hpp"
#include "seed/qformer.hpp"

namespace seed::eval {
namespace {

constexpr std::size_t kMinGallery = 20;

std::vector<std::size_t> eval_items(const data::Corpus& corpus, data::Split split,
                                    std::size_t min_items) {
  if (split == data::Split::train) {
    throw ContractViolation("evaluation galleries must come from the val or test split");
  }
  const auto items = corpus.indices(split);
  if (items.size() < min_items) {
    throw ContractViolation("evaluation gallery of " + std::to_string(items.size()) +
                            " items is smaller than " + std::to_string(min_items));
  }
  return items;
}

Tensor stack(const std::vector<Tensor>& parts) { return ops::concat_rows(parts); }

std::string fmt(double v, const char* spec = "%.4f") {
  char buf[32];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

nlohmann::ordered_json recall_json(const Recall& r) {
  nlohmann::ordered_json j;
  j["r1"] = r.r1;
  j["r5"] = r.r5;
  j["r10"] = r.r10;
  return j;
}

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string to_string(RetrievalSource s) {
  return s == RetrievalSource::embedding ? "embedding" : "code";
}

double RetrievalReport::r_mean() const {
  return (image_to_text.r1 + image_to_text.r5 + image_to_text.r10 + text_to_image.r1 +
          text_to_image.r5 + text_to_image.r10) /
         6.0;
}

RetrievalReport eval_retrieval(const Pipeline& pipeline, const data::Corpus& corpus,
                               data::Split split, RetrievalSource source) {
  const auto items = eval_items(corpus, split, kMinGallery);
  PrecisionScope precision(pipeline.config.precision);
  const std::size_t n = items.size();
  Tensor image;
  if (source == RetrievalSource::embedding) {
    std::vector<Tensor> grids(corpus.samples.size());
    for (auto i : items) grids[i] = pipeline.patches.encode(corpus.samples[i].image);
    image = pipeline.qformer.project(
        embed_items(pipeline.qformer, grids, items, pipeline.config.attention_mode), n);
  } else {
    std::vector<Tensor> values;
    for (const auto& codes : pipeline.tokenize_all(corpus, items)) {
      values.push_back(pipeline.code_values(codes));
    }
    image = pipeline.qformer.project(pipeline.detokenizer.reconstruct(stack(values), n), n);
  }
  const Tensor text = text_features(pipeline.embedder, corpus, items);
  return {image_to_text_recall(image, text, corpus, items),
          text_to_image_recall(image, text, corpus, items)};
}

ChanceLevel chance_r1(const data::Corpus& corpus, data::Split split) {
  const auto items = corpus.indices(split);
  const double G = static_cast<double>(items.size());
  double mean = 0.0, var = 0.0;
  for (auto q : items) {
    double relevant = 0.0;
    for (auto g : items) relevant += corpus.samples[q].caption == corpus.samples[g].caption;
    const double p = relevant / G;
    mean += p;
    var += p * (1.0 - p);
  }
  return {mean / G, std::sqrt(var) / G};
}

ReconstructionReport eval_reconstruction(const Pipeline& pipeline, const data::Corpus& corpus,
                                         data::Split split) {
  const auto items = eval_items(corpus, split, 1);
  PrecisionScope precision(pipeline.config.precision);
  ReconstructionReport r;
  const auto codes = pipeline.tokenize_all(corpus, items);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto ref = pipeline.embedder.embed_image(corpus.samples[items[i]].image);
    const Tensor gen = pipeline.detokenizer.generation_embed(pipeline.code_values(codes[i]), 1);
    r.reference_score += data::cosine(std::vector<double>(gen.data().begin(), gen.data().end()), ref);
    r.upper_bound += data::cosine(ref, ref);
  }
  r.count = items.size();
  r.reference_score /= static_cast<double>(r.count);
  r.upper_bound /= static_cast<double>(r.count);
  return r;
}

double WellformednessReport::fraction() const {
  return total ? static_cast<double>(successes) / static_cast<double>(total) : 0.0;
}

WellformednessReport eval_wellformedness(const lm::LanguageModel& model,
                                         const std::vector<data::Caption>& captions,
                                         lm::GenerationMode mode, std::size_t n,
                                         const RunConfig& config, std::uint64_t seed) {
  if (n < 100) throw ContractViolation("well-formedness needs at least 100 generations");
  if (captions.empty()) throw ContractViolation("well-formedness needs prompts");
  PrecisionScope precision(config.precision);
  WellformednessReport r;
  r.total = n;
  const lm::Sampling sampling{config.sample_temperature, config.top_k};
  for (std::size_t g = 0; g < n; ++g) {
    const auto prompt = lm::generation_prompt(captions[g % captions.size()], model.vocab);
    Rng rng(mix_seed(seed, g));
    const auto out = lm::generate(model, prompt, mode, sampling, config.max_new,
                                  config.num_queries, rng);
    const auto scan = lm::scan_image_blocks(out, model.vocab, config.num_queries);
    r.successes += scan.well_formed;
    if (scan.lengths.empty()) ++r.without_block;
    for (auto len : scan.lengths) ++r.block_lengths[len];
  }
  return r;
}

std::vector<lm::MultimodalSequence> captioning_sequences(const data::Corpus& corpus,
                                                         data::Split split,
                                                         const lm::CodeTable& codes,
                                                         const lm::Vocabulary& vocab) {
  std::vector<lm::MultimodalSequence> out;
  for (auto i : corpus.indices(split)) {
    data::InterleavedDoc doc;
    doc.segments = {{data::SegmentKind::image, i}, {data::SegmentKind::text, i}};
    auto seq = lm::pack(doc, corpus, codes, vocab, 1 + codes.at(i).size() + 2 +
                                                       corpus.samples[i].caption.size());
    for (std::size_t t = 0; t < seq.size(); ++t) {
      seq.mask[t] = seq.tags[t] == lm::TokenKind::text ? 1.0 : 0.0;
    }
    out.push_back(std::move(seq));
  }
  return out;
}

double generation_reference_score(const lm::LanguageModel& model, const Pipeline& pipeline,
                                  const data::Corpus& corpus, data::Split split) {
  const auto items = eval_items(corpus, split, 1);
  const std::size_t Q = pipeline.config.num_queries;
  PrecisionScope precision(pipeline.config.precision);
  const lm::Vocabulary& v = model.vocab;
  double total = 0.0;
  for (auto i : items) {
    std::vector<std::size_t> prompt{v.special_id(lm::Special::bos)};
    const auto& caption = corpus.samples[i].caption;
    prompt.insert(prompt.end(), caption.begin(), caption.end());
    Rng unused(0);
    const auto out = lm::generate(model, prompt, lm::GenerationMode::image_constrained,
                                  {0.0, 0}, Q + 2, Q, unused);
    VisualCodes codes;
    for (auto id : out) {
      if (v.is_visual(id)) codes.push_back(v.code_of(id));
    }
    if (codes.size() != Q) continue;  // no room for a block; scores 0
    const Tensor gen = pipeline.detokenizer.generation_embed(pipeline.code_values(codes), 1);
    total += data::cosine(std::vector<double>(gen.data().begin(), gen.data().end()),
                          pipeline.embedder.embed_image(corpus.samples[i].image));
  }
  return total / static_cast<double>(items.size());
}

std::vector<AblationEntry> eval_two_stage(const Checkpoint& lora, const Checkpoint& full,
                                          const RunConfig& config, const TwoStageInputs& in) {
  const std::string digest = lora.meta(meta_keys::kConfigDigest);
  if (digest != full.meta(meta_keys::kConfigDigest)) {
    throw ContractViolation("two-stage comparison across lineages: config digest " + digest +
                            " vs " + full.meta(meta_keys::kConfigDigest));
  }
  if (!in.corpus || !in.pipeline || !in.codes || in.held_out.empty()) {
    throw ContractViolation("eval_two_stage: missing inputs");
  }
  PrecisionScope precision(config.precision);
  std::vector<AblationEntry> out;
  for (const auto* ckpt : {&lora, &full}) {
    const std::string variant = ckpt == &lora ? "lora" : "lora+full";
    const lm::LanguageModel model = lm::LanguageModel::load(*ckpt, config);
    const auto caps = captioning_sequences(*in.corpus, in.split, *in.codes, model.vocab);
    out.push_back({variant, "held_out_lm_loss", lm::mean_lm_loss(model, in.held_out),
                   config.seed, digest});
    out.push_back({variant, "caption_next_token_accuracy", lm::next_token_accuracy(model, caps),
                   config.seed, digest});
    out.push_back({variant, "generation_reference_score",
                   generation_reference_score(model, *in.pipeline, *in.corpus, in.split),
                   config.seed, digest});
  }
  return out;
}

std::string retrieval_ndjson(const RetrievalReport& r, RetrievalSource source,
                             const std::string& config_digest) {
  nlohmann::ordered_json j;
  j["report"] = "retrieval";
  j["source"] = to_string(source);
  j["image_to_text"] = recall_json(r.image_to_text);
  j["text_to_image"] = recall_json(r.text_to_image);
  j["r_mean"] = r.r_mean();
  j["config_digest"] = config_digest;
  return j.dump() + "\n";
}

std::string reconstruction_ndjson(const ReconstructionReport& r, const std::string& label,
                                  const std::string& config_digest) {
  nlohmann::ordered_json j;
  j["report"] = "reconstruction";
  j["variant"] = label;
  j["reference_score"] = r.reference_score;
  j["reference_score_upper_bound"] = r.upper_bound;
  j["count"] = r.count;
  j["config_digest"] = config_digest;
  return j.dump() + "\n";
}

std::string wellformedness_ndjson(const WellformednessReport& r, const std::string& label,
                                  const std::string& config_digest) {
  nlohmann::ordered_json j;
  j["report"] = "wellformedness";
  j["variant"] = label;
  j["successes"] = r.successes;
  j["total"] = r.total;
  j["fraction"] = r.fraction();
  j["without_block"] = r.without_block;
  nlohmann::ordered_json hist = nlohmann::ordered_json::object();
  for (auto [len, count] : r.block_lengths) hist[std::to_string(len)] = count;
  j["block_lengths"] = hist;
  j["config_digest"] = config_digest;
  return j.dump() + "\n";
}

std::string ablation_ndjson(const std::vector<AblationEntry>& entries) {
  std::string out;
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["report"] = "ablation";
    j["variant"] = e.variant;
    j["metric"] = e.metric;
    j["value"] = e.value;
    j["seed"] = e.seed;
    j["config_digest"] = e.config_digest;
    out += j.dump() + "\n";
  }
  return out;
}

std::string retrieval_table(const std::vector<std::pair<std::string, RetrievalReport>>& rows) {
  std::string out = pad("source", 12) + "i2t R@1  i2t R@5  i2t R@10 t2i R@1  t2i R@5  t2i R@10 R@mean\n";
  for (const auto& [label, r] : rows) {
    out += pad(label, 12);
    for (double v : {r.image_to_text.r1, r.image_to_text.r5, r.image_to_text.r10,
                     r.text_to_image.r1, r.text_to_image.r5, r.text_to_image.r10, r.r_mean()}) {
      out += pad(fmt(v), 9);
    }
    out += "\n";
  }
  return out;
}

std::string ablation_table(const std::vector<AblationEntry>& entries) {
  std::string out = pad("variant", 12) + pad("metric", 30) + "value\n";
  for (const auto& e : entries) out += pad(e.variant, 12) + pad(e.metric, 30) + fmt(e.value) + "\n";
  return out;
}

std::string wellformedness_table(
    const std::vector<std::pair<std::string, WellformednessReport>>& rows) {
  std::string out = pad("variant", 24) + pad("well-formed", 14) + "fraction  block lengths\n";
  for (const auto& [label, r] : rows) {
    std::string hist;
    for (auto [len, count] : r.block_lengths) {
      hist += (hist.empty() ? "" : " ") + std::to_string(len) + ":" + std::to_string(count);
    }
    out += pad(label, 24) +
           pad(std::to_string(r.successes) + "/" + std::to_string(r.total), 14) +
           pad(fmt(r.fraction()), 10) + hist + "\n";
  }
  return out;
}

void write_recall_svg(const std::filesystem::path& path,
                      const std::vector<std::pair<std::string, RetrievalReport>>& rows) {
  const int w = 640, h = 320, left = 50, bottom = 280, top = 30;
  const std::array<const char*, 6> names = {"i2t@1", "i2t@5", "i2t@10", "t2i@1", "t2i@5", "t2i@10"};
  const std::array<const char*, 4> colors = {"#4c72b0", "#dd8452", "#55a868", "#c44e52"};
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
                    "\" height=\"" + std::to_string(h) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + std::to_string(left) + "\" y=\"18\" font-size=\"14\">Recall@K</text>\n";
  const double group = (w - left - 20) / 6.0;
  const double bar = group * 0.8 / static_cast<double>(std::max<std::size_t>(rows.size(), 1));
  for (std::size_t k = 0; k < 6; ++k) {
    const double x0 = left + group * static_cast<double>(k);
    svg += "<text x=\"" + fmt(x0 + 4, "%.1f") + "\" y=\"" + std::to_string(bottom + 16) +
           "\" font-size=\"11\">" + names[k] + "</text>\n";
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto& rep = rows[r].second;
      const double v = std::array{rep.image_to_text.r1, rep.image_to_text.r5, rep.image_to_text.r10,
                                  rep.text_to_image.r1, rep.text_to_image.r5,
                                  rep.text_to_image.r10}[k];
      const double bh = v * (bottom - top);
      svg += "<rect x=\"" + fmt(x0 + bar * static_cast<double>(r), "%.1f") + "\" y=\"" +
             fmt(bottom - bh, "%.1f") + "\" width=\"" + fmt(bar - 1, "%.1f") + "\" height=\"" +
             fmt(bh, "%.1f") + "\" fill=\"" + colors[r % colors.size()] + "\"/>\n";
    }
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    svg += "<text x=\"" + std::to_string(w - 150) + "\" y=\"" + std::to_string(20 + 14 * r) +
           "\" font-size=\"11\" fill=\"" + colors[r % colors.size()] + "\">" +
           svg_escape(rows[r].first) + "</text>\n";
  }
  svg += "<line x1=\"" + std::to_string(left) + "\" y1=\"" + std::to_string(bottom) + "\" x2=\"" +
         std::to_string(w - 20) + "\" y2=\"" + std::to_string(bottom) + "\" stroke=\"black\"/>\n";
  svg += "</svg>\n";
  write_text(path, svg);
}

void write_histogram_svg(const std::filesystem::path& path, const std::string& title,
                         const std::map<std::size_t, std::size_t>& counts) {
  const int w = 640, h = 320, left = 50, bottom = 280, top = 30;
  std::size_t max_len = 0, max_count = 1;
  for (auto [len, count] : counts) {
    max_len = std::max(max_len, len);
    max_count = std::max(max_count, count);
  }
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
                    "\" height=\"" + std::to_string(h) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + std::to_string(left) + "\" y=\"18\" font-size=\"14\">" +
         svg_escape(title) + "</text>\n";
  const double bw = (w - left - 20) / static_cast<double>(max_len + 1);
  for (std::size_t len = 0; len <= max_len; ++len) {
    const auto it = counts.find(len);
    const double c = it == counts.end() ? 0.0 : static_cast<double>(it->second);
    const double bh = c / static_cast<double>(max_count) * (bottom - top);
    const double x = left + bw * static_cast<double>(len);
    svg += "<rect x=\"" + fmt(x, "%.1f") + "\" y=\"" + fmt(bottom - bh, "%.1f") +
           "\" width=\"" + fmt(bw - 2, "%.1f") + "\" height=\"" + fmt(bh, "%.1f") +
           "\" fill=\"#4c72b0\"/>\n";
    svg += "<text x=\"" + fmt(x + 2, "%.1f") + "\" y=\"" + std::to_string(bottom + 14) +
           "\" font-size=\"10\">" + std::to_string(len) + "</text>\n";
  }
  svg += "</svg>\n";
  write_text(path, svg);
}

}  // namespace seed::eval
