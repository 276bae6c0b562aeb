#include "seed/toy_data.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "seed/errors.hpp"
#include "seed/random.hpp"

namespace seed::data {

namespace {

constexpr std::array<std::string_view, 32> kWords = {
    "a",       "the",     "on",     "red",    "green",    "blue",     "circle", "square",
    "triangle", "left",   "right",  "top",    "bottom",   "crimson",  "emerald", "azure",
    "disk",    "box",     "wedge",  "describe", "generate", "image",  "this",   "an",
    "of",      "picture", "draw",   "show",   "me",       "what",     "is",     "it"};

// synonym id -> canonical id
constexpr std::array<std::pair<std::size_t, std::size_t>, 6> kSynonyms = {
    {{13, 3}, {14, 4}, {15, 5}, {16, 6}, {17, 7}, {18, 8}}};

constexpr std::array<std::string_view, 3> kShapeNames = {"circle", "square", "triangle"};
constexpr std::array<std::string_view, 3> kColorNames = {"red", "green", "blue"};
constexpr std::array<std::string_view, 4> kPositionNames = {"left", "right", "top", "bottom"};

constexpr std::array<std::array<double, 3>, 3> kColorRgb = {
    {{0.90, 0.15, 0.10}, {0.10, 0.80, 0.15}, {0.15, 0.20, 0.95}}};

std::size_t synonym_of(std::size_t canonical_id) {
  for (auto [syn, can] : kSynonyms) {
    if (can == canonical_id) return syn;
  }
  return canonical_id;
}

template <std::size_t N>
std::size_t find_name(const std::array<std::string_view, N>& names, std::string_view v,
                      const char* what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == v) return i;
  }
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(v) + "'");
}

void put_u32(std::ostream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    const int c = in.get();
    if (c == EOF) throw LoadError("raster truncated");
    v |= static_cast<std::uint32_t>(c & 0xff) << (8 * i);
  }
  return v;
}

std::vector<double> normalized(std::vector<double> v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double n = std::max(std::sqrt(ss), 1e-12);
  for (double& x : v) x /= n;
  return v;
}

}  // namespace

std::size_t Attributes::class_id() const {
  return (static_cast<std::size_t>(shape) * 3 + static_cast<std::size_t>(color)) * 4 +
         static_cast<std::size_t>(position);
}

Attributes Attributes::from_class(std::size_t id) {
  if (id >= kNumClasses) throw ContractViolation("class id out of range");
  return {static_cast<ShapeKind>(id / 12), static_cast<Color>((id / 4) % 3),
          static_cast<Position>(id % 4)};
}

std::string_view name(ShapeKind s) { return kShapeNames[static_cast<std::size_t>(s)]; }
std::string_view name(Color c) { return kColorNames[static_cast<std::size_t>(c)]; }
std::string_view name(Position p) { return kPositionNames[static_cast<std::size_t>(p)]; }

std::string_view name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Attributes parse_attributes(std::string_view shape, std::string_view color,
                            std::string_view position) {
  return {static_cast<ShapeKind>(find_name(kShapeNames, shape, "shape")),
          static_cast<Color>(find_name(kColorNames, color, "color")),
          static_cast<Position>(find_name(kPositionNames, position, "position"))};
}

ToyImage render(const Attributes& attrs, std::uint64_t corpus_seed,
                std::uint64_t jitter_seed, std::size_t size) {
  Rng rng(mix_seed(corpus_seed, jitter_seed));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double s = static_cast<double>(size);
  double cx = s / 2, cy = s / 2;
  switch (attrs.position) {
    case Position::left: cx = s / 4; break;
    case Position::right: cx = 3 * s / 4; break;
    case Position::top: cy = s / 4; break;
    case Position::bottom: cy = 3 * s / 4; break;
  }
  cx += u(rng) * s / 16;
  cy += u(rng) * s / 16;
  const double r = s * (0.2 + 0.01 * u(rng));
  std::array<double, 3> rgb = kColorRgb[static_cast<std::size_t>(attrs.color)];
  const double gain = 1.0 + 0.05 * u(rng);
  for (auto& c : rgb) c = std::clamp(c * gain, 0.0, 1.0);

  ToyImage img;
  img.width = size;
  img.height = size;
  img.label = attrs;
  img.pixels.resize(size * size * 3);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double dy = static_cast<double>(y) + 0.5 - cy;
      bool inside = false;
      switch (attrs.shape) {
        case ShapeKind::circle: inside = dx * dx + dy * dy <= r * r; break;
        case ShapeKind::square: inside = std::abs(dx) <= r && std::abs(dy) <= r; break;
        case ShapeKind::triangle: inside = dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2; break;
      }
      for (std::size_t c = 0; c < 3; ++c) {
        const double noise = 0.08 + 0.04 * u(rng);
        img.pixels[(y * size + x) * 3 + c] = static_cast<float>(inside ? rgb[c] : noise);
      }
    }
  }
  return img;
}

std::size_t TextVocab::size() { return kWords.size(); }

std::string_view TextVocab::word(std::size_t id) {
  if (id >= kWords.size()) throw ContractViolation("text id out of range");
  return kWords[id];
}

std::size_t TextVocab::id(std::string_view word) {
  for (std::size_t i = 0; i < kWords.size(); ++i) {
    if (kWords[i] == word) return i;
  }
  throw ConfigError("word '" + std::string(word) + "' not in vocabulary");
}

std::size_t TextVocab::canonical(std::size_t id) {
  for (auto [syn, can] : kSynonyms) {
    if (syn == id) return can;
  }
  return id;
}

Caption canonical_caption(const Attributes& attrs) {
  return {TextVocab::id("a"), TextVocab::id(name(attrs.color)), TextVocab::id(name(attrs.shape)),
          TextVocab::id("on"), TextVocab::id("the"), TextVocab::id(name(attrs.position))};
}

Caption sample_caption(const Attributes& attrs, double synonym_prob, std::uint64_t seed) {
  Caption c = canonical_caption(attrs);
  if (synonym_prob <= 0.0) return c;
  Rng rng(seed);
  std::bernoulli_distribution swap(synonym_prob);
  if (swap(rng)) c[1] = synonym_of(c[1]);
  if (swap(rng)) c[2] = synonym_of(c[2]);
  return c;
}

std::optional<Attributes> parse_caption(const Caption& caption) {
  if (caption.size() != 6) return std::nullopt;
  std::array<std::size_t, 6> ids{};
  for (std::size_t i = 0; i < 6; ++i) {
    if (caption[i] >= TextVocab::size()) return std::nullopt;
    ids[i] = TextVocab::canonical(caption[i]);
  }
  if (ids[0] != TextVocab::id("a") || ids[3] != TextVocab::id("on") ||
      ids[4] != TextVocab::id("the")) {
    return std::nullopt;
  }
  try {
    return parse_attributes(TextVocab::word(ids[2]), TextVocab::word(ids[1]),
                            TextVocab::word(ids[5]));
  } catch (const ConfigError&) {
    return std::nullopt;
  }
}

std::string caption_text(const Caption& caption) {
  std::string out;
  for (auto id : caption) {
    if (!out.empty()) out += ' ';
    out += TextVocab::word(id);
  }
  return out;
}

Split split_of(std::uint64_t seed, std::size_t index) {
  const auto bucket = mix_seed(seed ^ 0x5eed5011ULL, index) % 10;
  if (bucket < 8) return Split::train;
  return bucket == 8 ? Split::val : Split::test;
}

std::vector<std::size_t> Corpus::indices(Split split) const {
  std::vector<std::size_t> out;
  for (const auto& s : samples) {
    if (s.split == split) out.push_back(s.index);
  }
  return out;
}

Corpus make_corpus(std::uint64_t seed, std::size_t n, const CorpusOptions& options) {
  if (n == 0) throw ContractViolation("make_corpus: n must be >= 1");
  Corpus corpus;
  corpus.seed = seed;
  corpus.samples.reserve(n);
  std::array<std::size_t, kNumClasses> perm{};
  for (std::size_t i = 0; i < n; ++i) {
    if (i % kNumClasses == 0) {
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng(mix_seed(seed, 0xb10c0000ULL + i / kNumClasses));
      std::shuffle(perm.begin(), perm.end(), rng);
    }
    const auto attrs = Attributes::from_class(perm[i % kNumClasses]);
    Sample s;
    s.index = i;
    s.split = split_of(seed, i);
    s.image = render(attrs, seed, i, options.image_size);
    s.caption = sample_caption(attrs, options.synonym_prob, mix_seed(seed, 0xca9ULL + i));
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

void write_raster(const ToyImage& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write raster " + path.string());
  put_u32(out, static_cast<std::uint32_t>(image.width));
  put_u32(out, static_cast<std::uint32_t>(image.height));
  for (float v : image.pixels) put_u32(out, std::bit_cast<std::uint32_t>(v));
}

ToyImage read_raster(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("missing raster " + path.string());
  ToyImage img;
  img.width = get_u32(in);
  img.height = get_u32(in);
  if (img.width == 0 || img.height == 0 || img.width > 4096 || img.height > 4096) {
    throw LoadError("raster " + path.string() + " has invalid dimensions");
  }
  img.pixels.resize(img.width * img.height * 3);
  for (auto& v : img.pixels) v = std::bit_cast<float>(get_u32(in));
  return img;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::trunc);
  if (!manifest) throw ConfigError("cannot write corpus manifest in " + dir.string());
  for (const auto& s : corpus.samples) {
    nlohmann::ordered_json rec;
    rec["index"] = s.index;
    rec["split"] = name(s.split);
    rec["shape"] = name(s.image.label.shape);
    rec["color"] = name(s.image.label.color);
    rec["position"] = name(s.image.label.position);
    rec["caption"] = s.caption;
    manifest << rec.dump() << '\n';
    char file[32];
    std::snprintf(file, sizeof(file), "%06zu.raw", s.index);
    write_raster(s.image, dir / "images" / file);
  }
  std::ofstream meta(dir / "corpus.json", std::ios::trunc);
  meta << nlohmann::ordered_json{{"seed", corpus.seed}, {"size", corpus.samples.size()}}.dump()
       << '\n';
}

Corpus read_corpus(const std::filesystem::path& dir) {
  std::ifstream meta(dir / "corpus.json");
  if (!meta) throw LoadError("missing corpus metadata: " + (dir / "corpus.json").string());
  Corpus corpus;
  try {
    corpus.seed = nlohmann::json::parse(meta).at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("bad corpus metadata: " + std::string(e.what()));
  }
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw LoadError("missing corpus manifest in " + dir.string());
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    Sample s;
    try {
      const auto rec = nlohmann::json::parse(line);
      s.index = rec.at("index").get<std::size_t>();
      const auto split = rec.at("split").get<std::string>();
      s.split = split == "train" ? Split::train : split == "val" ? Split::val : Split::test;
      const auto attrs =
          parse_attributes(rec.at("shape").get<std::string>(), rec.at("color").get<std::string>(),
                           rec.at("position").get<std::string>());
      s.caption = rec.at("caption").get<Caption>();
      char file[32];
      std::snprintf(file, sizeof(file), "%06zu.raw", s.index);
      s.image = read_raster(dir / "images" / file);
      s.image.label = attrs;
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("bad manifest record: " + std::string(e.what()));
    }
    if (s.index != corpus.samples.size()) throw LoadError("manifest indices out of order");
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::max(std::sqrt(aa * bb), 1e-24);
}

ReferenceEmbedder ReferenceEmbedder::create(std::uint64_t seed, std::size_t d_ref,
                                            std::size_t image_size) {
  ReferenceEmbedder e;
  e.d_ref_ = d_ref;
  Rng rng(mix_seed(seed, 0x4ef0ULL));
  constexpr std::size_t in = kGrid * kGrid;
  e.feature_weights_ = randn({in, kFeatures}, 1.0, rng);
  e.feature_bias_ = randn({kFeatures}, 0.5, rng);
  e.text_projection_ = randn({TextVocab::size(), d_ref}, 1.0, rng);
  auto proj = e.text_projection_.data();
  for (auto stop : {"a", "the", "on"}) {
    const auto row = TextVocab::id(stop);
    for (std::size_t j = 0; j < d_ref; ++j) {
      proj[row * d_ref + j] = static_cast<double>(static_cast<float>(0.5 * proj[row * d_ref + j]));
    }
  }
  for (auto [syn, can] : kSynonyms) {
    std::copy_n(proj.begin() + can * d_ref, d_ref, proj.begin() + syn * d_ref);
  }

  // Closed-form ridge readout from random features to caption embeddings.
  constexpr std::size_t kPerClass = 24;
  const std::size_t n = kNumClasses * kPerClass;
  e.readout_ = Tensor::zeros({kFeatures, d_ref});
  Eigen::MatrixXd phi(n, kFeatures);
  Eigen::MatrixXd target(n, d_ref);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const auto attrs = Attributes::from_class(c);
    const auto text = e.embed_text(canonical_caption(attrs));
    for (std::size_t j = 0; j < kPerClass; ++j) {
      const std::size_t row = c * kPerClass + j;
      const auto img = render(attrs, seed, 0xfeed0000ULL + row, image_size);
      const auto f = e.features(img);
      for (std::size_t k = 0; k < kFeatures; ++k) phi(row, k) = f[k];
      for (std::size_t k = 0; k < d_ref; ++k) target(row, k) = text[k];
    }
  }
  Eigen::MatrixXd gram = phi.transpose() * phi;
  const double ridge = 1e-3 * gram.trace() / static_cast<double>(kFeatures);
  gram.diagonal().array() += ridge;
  const Eigen::MatrixXd w = gram.llt().solve(phi.transpose() * target);
  auto rd = e.readout_.data();
  for (std::size_t k = 0; k < kFeatures; ++k) {
    for (std::size_t j = 0; j < d_ref; ++j) {
      rd[k * d_ref + j] = static_cast<double>(static_cast<float>(w(k, j)));
    }
  }
  return e;
}

std::vector<double> ReferenceEmbedder::features(const ToyImage& image) const {
  if (image.width % kGrid != 0 || image.height % kGrid != 0) {
    throw ConfigError("reference embedder needs image sides divisible by 16");
  }
  const std::size_t bx = image.width / kGrid, by = image.height / kGrid;
  std::array<double, kGrid * kGrid> gray{};
  for (std::size_t gy = 0; gy < kGrid; ++gy) {
    for (std::size_t gx = 0; gx < kGrid; ++gx) {
      double acc = 0.0;
      for (std::size_t y = gy * by; y < (gy + 1) * by; ++y) {
        for (std::size_t x = gx * bx; x < (gx + 1) * bx; ++x) {
          acc += 0.299 * image.at(y, x, 0) + 0.587 * image.at(y, x, 1) +
                 0.114 * image.at(y, x, 2);
        }
      }
      gray[gy * kGrid + gx] = acc / static_cast<double>(bx * by) - 0.1;
    }
  }
  // Separable [1 4 6 4 1]/16 blur, edges clamped.
  constexpr std::array<double, 5> kTaps = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  const auto blur = [&](const std::array<double, kGrid * kGrid>& src, bool horizontal) {
    std::array<double, kGrid * kGrid> dst{};
    for (std::size_t y = 0; y < kGrid; ++y) {
      for (std::size_t x = 0; x < kGrid; ++x) {
        double acc = 0.0;
        for (int t = -2; t <= 2; ++t) {
          const auto clampi = [](long v) {
            return static_cast<std::size_t>(std::clamp<long>(v, 0, kGrid - 1));
          };
          const std::size_t sx = horizontal ? clampi(static_cast<long>(x) + t) : x;
          const std::size_t sy = horizontal ? y : clampi(static_cast<long>(y) + t);
          acc += kTaps[static_cast<std::size_t>(t + 2)] * src[sy * kGrid + sx];
        }
        dst[y * kGrid + x] = acc;
      }
    }
    return dst;
  };
  gray = blur(blur(gray, true), false);

  std::vector<double> f(kFeatures);
  const auto w = feature_weights_.data();
  for (std::size_t k = 0; k < kFeatures; ++k) f[k] = feature_bias_[k];
  for (std::size_t i = 0; i < gray.size(); ++i) {
    for (std::size_t k = 0; k < kFeatures; ++k) f[k] += gray[i] * w[i * kFeatures + k];
  }
  for (auto& v : f) v = std::tanh(v);
  return f;
}

std::vector<double> ReferenceEmbedder::embed_image(const ToyImage& image) const {
  const auto f = features(image);
  std::vector<double> out(d_ref_, 0.0);
  const auto r = readout_.data();
  for (std::size_t k = 0; k < kFeatures; ++k) {
    for (std::size_t j = 0; j < d_ref_; ++j) out[j] += f[k] * r[k * d_ref_ + j];
  }
  return normalized(std::move(out));
}

std::vector<double> ReferenceEmbedder::embed_text(const Caption& caption) const {
  std::vector<double> out(d_ref_, 0.0);
  const auto p = text_projection_.data();
  for (auto id : caption) {
    if (id >= TextVocab::size()) throw ContractViolation("caption id out of range");
    for (std::size_t j = 0; j < d_ref_; ++j) out[j] += p[id * d_ref_ + j];
  }
  return normalized(std::move(out));
}

std::vector<NamedTensor> ReferenceEmbedder::parameters() const {
  return {{"ref.feature_weights", feature_weights_},
          {"ref.feature_bias", feature_bias_},
          {"ref.readout", readout_},
          {"ref.text_projection", text_projection_}};
}

void ReferenceEmbedder::store(Checkpoint& ckpt) const { store_parameters(ckpt, parameters()); }

ReferenceEmbedder ReferenceEmbedder::load(const Checkpoint& ckpt) {
  ReferenceEmbedder e;
  e.feature_weights_ = ckpt.get("ref.feature_weights").clone();
  e.feature_bias_ = ckpt.get("ref.feature_bias").clone();
  e.readout_ = ckpt.get("ref.readout").clone();
  e.text_projection_ = ckpt.get("ref.text_projection").clone();
  if (e.feature_weights_.shape() != Shape{kGrid * kGrid, kFeatures} ||
      e.readout_.dim(0) != kFeatures || e.text_projection_.dim(0) != TextVocab::size() ||
      e.text_projection_.dim(1) != e.readout_.dim(1)) {
    throw LoadError("reference embedder entries have inconsistent shapes");
  }
  e.d_ref_ = e.readout_.dim(1);
  return e;
}

std::vector<InterleavedDoc> make_interleaved_docs(const Corpus& corpus, std::uint64_t seed,
                                                  std::size_t n_docs, std::size_t min_images,
                                                  std::size_t max_images, Split split) {
  const auto pool = corpus.indices(split);
  if (pool.empty()) throw ContractViolation("make_interleaved_docs: empty corpus split");
  if (min_images < 1 || min_images > max_images) {
    throw ContractViolation("make_interleaved_docs: bad images_per_doc range");
  }
  Rng rng(mix_seed(seed, 0xd0c5ULL));
  std::uniform_int_distribution<std::size_t> count(min_images, max_images);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::bernoulli_distribution image_first(0.5);
  std::vector<InterleavedDoc> docs(n_docs);
  for (auto& doc : docs) {
    const std::size_t units = count(rng);
    doc.provenance = units == 1 ? Provenance::pair : Provenance::document;
    for (std::size_t u = 0; u < units; ++u) {
      const std::size_t s = pool[pick(rng)];
      if (image_first(rng)) {
        doc.segments.push_back({SegmentKind::image, s});
        doc.segments.push_back({SegmentKind::text, s});
      } else {
        doc.segments.push_back({SegmentKind::text, s});
        doc.segments.push_back({SegmentKind::image, s});
      }
    }
  }
  return docs;
}

}  // namespace seed::data
