#include "seed/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "seed/errors.hpp"

namespace seed {

namespace {

constexpr char kMagic[8] = {'S', 'E', 'E', 'D', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::string& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw LoadError("checkpoint truncated");
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::add(std::string name, const Tensor& tensor) {
  if (has(name)) throw ContractViolation("checkpoint entry '" + name + "' added twice");
  entries.push_back({std::move(name), tensor});
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return true;
  }
  return false;
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e.tensor;
  }
  throw LoadError("checkpoint has no entry '" + name + "'");
}

std::string Checkpoint::meta(const std::string& key) const {
  auto it = metadata.find(key);
  return it == metadata.end() ? std::string{} : it->second;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    put_string(out, k);
    put_string(out, v);
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    put_string(out, e.name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.tensor.ndim()));
    for (auto extent : e.tensor.shape()) put<std::uint64_t>(out, extent);
    put<std::uint64_t>(out, e.tensor.numel());
    for (double v : e.tensor.data()) {
      put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  r.need(sizeof(kMagic));
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw LoadError("not a checkpoint container (bad magic)");
  }
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) r.get<std::uint8_t>();
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw LoadError("unsupported checkpoint format version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto n_meta = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.get_string();
    ckpt.metadata[k] = r.get_string();
  }
  const auto n_entries = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    std::string name = r.get_string();
    const auto ndim = r.get<std::uint32_t>();
    if (ndim == 0 || ndim > 8) throw LoadError("entry '" + name + "' has invalid rank");
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(r.get<std::uint64_t>());
    const auto count = r.get<std::uint64_t>();
    std::size_t expected = 1;
    for (auto e : shape) {
      if (e == 0) throw LoadError("entry '" + name + "' has a zero extent");
      expected *= e;
    }
    if (count != expected) {
      throw LoadError("entry '" + name + "': payload length " + std::to_string(count) +
                      " does not match shape " + shape_string(shape));
    }
    if (count > r.remaining() / 4) throw LoadError("checkpoint truncated");
    std::vector<double> data(count);
    for (auto& v : data) v = static_cast<double>(std::bit_cast<float>(r.get<std::uint32_t>()));
    ckpt.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw LoadError("trailing bytes after checkpoint entries");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint " + path.string());
    const auto bytes = serialize_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("missing checkpoint: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize_checkpoint(ss.str());
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

void restore_parameters(const Checkpoint& ckpt, const std::vector<NamedTensor>& params,
                        const std::string& prefix) {
  for (const auto& p : params) {
    const Tensor& src = ckpt.get(prefix + p.name);
    if (src.shape() != p.tensor.shape()) {
      throw LoadError("entry '" + prefix + p.name + "' has shape " +
                      shape_string(src.shape()) + ", expected " +
                      shape_string(p.tensor.shape()));
    }
    Tensor dst = p.tensor;
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
  }
}

void store_parameters(Checkpoint& ckpt, const std::vector<NamedTensor>& params,
                      const std::string& prefix) {
  for (const auto& p : params) ckpt.add(prefix + p.name, p.tensor.detach());
}

}  // namespace seed
