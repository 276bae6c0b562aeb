#ifndef SEED_STAGE_IO_HPP_
#define SEED_STAGE_IO_HPP_

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "seed/checkpoint.hpp"
#include "seed/config.hpp"
#include "seed/nn.hpp"
#include "seed/optim.hpp"
#include "seed/random.hpp"

namespace seed {

// Where a training stage writes: per-epoch checkpoints, metrics NDJSON and any
// non-finite diagnostic snapshot. An empty dir keeps everything in memory.
struct StageOutput {
  std::filesystem::path dir;
  std::string parent_digest;
};

// Weight matrices and adapters decay; biases, norms, queries, scalars do not.
std::vector<ParamSlot> optimizer_slots(const nn::ParamList& params);
AdamWOptions adam_options(const RunConfig& config);

Checkpoint stage_checkpoint(const RunConfig& config, const std::string& stage,
                            const std::string& parent_digest);

// Deterministic permutation of items for one epoch of one stage.
std::vector<std::size_t> epoch_order(std::span<const std::size_t> items, std::uint64_t seed,
                                     std::uint64_t stage_tag, std::size_t epoch);

void append_line(const std::filesystem::path& path, const std::string& line);

// Writes a JSON snapshot of the failing batch (when a dir is set) and throws
// NumericError carrying its path.
[[noreturn]] void raise_nonfinite(const StageOutput& output, const std::string& stage,
                                  std::size_t epoch, std::size_t step,
                                  std::span<const std::size_t> batch, double loss);

std::string epoch_checkpoint_name(const std::string& stage, std::size_t epoch);

}  // namespace seed

#endif  // SEED_STAGE_IO_HPP_
