#ifndef SEED_TOY_DATA_HPP_
#define SEED_TOY_DATA_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "seed/checkpoint.hpp"
#include "seed/tensor.hpp"

namespace seed::data {

enum class ShapeKind : std::uint8_t { circle, square, triangle };
enum class Color : std::uint8_t { red, green, blue };
enum class Position : std::uint8_t { left, right, top, bottom };

inline constexpr std::size_t kNumClasses = 36;

struct Attributes {
  ShapeKind shape = ShapeKind::circle;
  Color color = Color::red;
  Position position = Position::left;

  std::size_t class_id() const;
  static Attributes from_class(std::size_t id);
  bool operator==(const Attributes&) const = default;
};

std::string_view name(ShapeKind s);
std::string_view name(Color c);
std::string_view name(Position p);
Attributes parse_attributes(std::string_view shape, std::string_view color,
                            std::string_view position);

// RGB raster, interleaved, values in [0, 1].
struct ToyImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> pixels;
  Attributes label;

  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

// Pure function of its arguments.
ToyImage render(const Attributes& attrs, std::uint64_t corpus_seed,
                std::uint64_t jitter_seed, std::size_t size = 32);

// Closed caption vocabulary: grammar words, synonyms, and instruction words.
class TextVocab {
 public:
  static std::size_t size();
  static std::string_view word(std::size_t id);
  static std::size_t id(std::string_view word);
  // Synonyms map to their canonical word; other ids map to themselves.
  static std::size_t canonical(std::size_t id);
};

using Caption = std::vector<std::size_t>;

// "a <color> <shape> on the <position>"
Caption canonical_caption(const Attributes& attrs);
// Canonical grammar with each color/shape word swapped for its synonym with
// probability synonym_prob.
Caption sample_caption(const Attributes& attrs, double synonym_prob, std::uint64_t seed);
// Inverse of the grammar; accepts synonyms.
std::optional<Attributes> parse_caption(const Caption& caption);
std::string caption_text(const Caption& caption);

enum class Split : std::uint8_t { train, val, test };
std::string_view name(Split s);

struct Sample {
  std::size_t index = 0;
  Split split = Split::train;
  ToyImage image;
  Caption caption;
};

struct Corpus {
  std::uint64_t seed = 0;
  std::vector<Sample> samples;

  std::vector<std::size_t> indices(Split split) const;
};

struct CorpusOptions {
  std::size_t image_size = 32;
  double synonym_prob = 0.0;
};

// Deterministic; classes balanced to within one sample; 80/10/10 split by a
// hash of (seed, index).
Corpus make_corpus(std::uint64_t seed, std::size_t n, const CorpusOptions& options = {});
Split split_of(std::uint64_t seed, std::size_t index);

// Manifest (one JSON object per line) plus images/<index>.raw rasters with an
// 8-byte header (u32 width, u32 height, little-endian) and float32 RGB payload.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);
void write_raster(const ToyImage& image, const std::filesystem::path& path);
ToyImage read_raster(const std::filesystem::path& path);

// Frozen stand-in for a pretrained image/text embedding space. The image
// branch sees a 16x16 grayscale downsample through frozen random tanh
// features and a linear readout; the text branch projects bag-of-token
// counts. The readout is fitted once, in closed form, so that prototype
// images rendered from the embedder seed land on their caption embeddings.
class ReferenceEmbedder {
 public:
  static constexpr std::size_t kGrid = 16;
  static constexpr std::size_t kFeatures = 512;

  ReferenceEmbedder() = default;
  static ReferenceEmbedder create(std::uint64_t seed, std::size_t d_ref,
                                  std::size_t image_size = 32);

  std::size_t dim() const { return d_ref_; }
  std::vector<double> embed_image(const ToyImage& image) const;
  std::vector<double> embed_text(const Caption& caption) const;

  void store(Checkpoint& ckpt) const;
  static ReferenceEmbedder load(const Checkpoint& ckpt);
  std::vector<NamedTensor> parameters() const;

 private:
  std::vector<double> features(const ToyImage& image) const;

  std::size_t d_ref_ = 0;
  Tensor feature_weights_;  // [kGrid*kGrid x kFeatures]
  Tensor feature_bias_;     // [kFeatures]
  Tensor readout_;          // [kFeatures x d_ref]
  Tensor text_projection_;  // [vocab x d_ref]
};

double cosine(const std::vector<double>& a, const std::vector<double>& b);

enum class SegmentKind : std::uint8_t { image, text };
enum class Provenance : std::uint8_t { pair, document };

// Refers to a corpus sample; an image segment stands for its raster, a text
// segment for its caption.
struct Segment {
  SegmentKind kind = SegmentKind::text;
  std::size_t sample = 0;
  bool operator==(const Segment&) const = default;
};

struct InterleavedDoc {
  std::vector<Segment> segments;
  Provenance provenance = Provenance::pair;
};

// Each doc strings together between min_images and max_images image-caption
// units drawn from `split`; each unit puts image or text first by a fair coin.
std::vector<InterleavedDoc> make_interleaved_docs(const Corpus& corpus, std::uint64_t seed,
                                                  std::size_t n_docs, std::size_t min_images,
                                                  std::size_t max_images,
                                                  Split split = Split::train);

}  // namespace seed::data

#endif  // SEED_TOY_DATA_HPP_
