#ifndef SEED_CHECKPOINT_HPP_
#define SEED_CHECKPOINT_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "seed/optim.hpp"
#include "seed/tensor.hpp"

namespace seed {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary container shared by every stage:
//   "SEEDCKPT" | u32 version
//   u32 n_meta  { u32 len, key bytes, u32 len, value bytes }*
//   u32 n_entry { u32 len, name bytes, u32 ndim, u64 extent*, u64 count, f32 payload* }*
// All integers and floats little-endian. Metadata is written in key order so
// save -> load -> save is byte-identical.
struct Checkpoint {
  std::map<std::string, std::string> metadata;
  std::vector<NamedTensor> entries;

  void add(std::string name, const Tensor& tensor);
  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  std::string meta(const std::string& key) const;
};

namespace meta_keys {
inline constexpr const char* kConfigDigest = "config_digest";
inline constexpr const char* kStage = "stage";
inline constexpr const char* kParentDigest = "parent_digest";
inline constexpr const char* kSeed = "seed";
}  // namespace meta_keys

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies entries into existing parameters by name; shapes must match.
void restore_parameters(const Checkpoint& ckpt, const std::vector<NamedTensor>& params,
                        const std::string& prefix = {});
void store_parameters(Checkpoint& ckpt, const std::vector<NamedTensor>& params,
                      const std::string& prefix = {});

}  // namespace seed

#endif  // SEED_CHECKPOINT_HPP_
