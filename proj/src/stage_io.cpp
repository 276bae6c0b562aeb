#include "seed/stage_io.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "seed/errors.hpp"

namespace seed {

std::vector<ParamSlot> optimizer_slots(const nn::ParamList& params) {
  std::vector<ParamSlot> slots;
  slots.reserve(params.size());
  for (const auto& p : params) {
    const bool decay = p.name.ends_with(".weight") || p.name.ends_with(".lora_a") ||
                       p.name.ends_with(".lora_b");
    slots.push_back({.name = p.name, .tensor = p.tensor, .decay = decay});
  }
  return slots;
}

AdamWOptions adam_options(const RunConfig& config) {
  return {.beta1 = config.adam_beta1,
          .beta2 = config.adam_beta2,
          .eps = config.adam_eps,
          .weight_decay = config.weight_decay};
}

Checkpoint stage_checkpoint(const RunConfig& config, const std::string& stage,
                            const std::string& parent_digest) {
  Checkpoint ckpt;
  ckpt.metadata[meta_keys::kConfigDigest] = config_digest(config);
  ckpt.metadata[meta_keys::kStage] = stage;
  ckpt.metadata[meta_keys::kParentDigest] = parent_digest;
  ckpt.metadata[meta_keys::kSeed] = std::to_string(config.seed);
  return ckpt;
}

std::vector<std::size_t> epoch_order(std::span<const std::size_t> items, std::uint64_t seed,
                                     std::uint64_t stage_tag, std::size_t epoch) {
  std::vector<std::size_t> order(items.begin(), items.end());
  Rng rng(mix_seed(mix_seed(seed, stage_tag), epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << line << '\n';
}

void raise_nonfinite(const StageOutput& output, const std::string& stage, std::size_t epoch,
                     std::size_t step, std::span<const std::size_t> batch, double loss) {
  std::string snapshot;
  if (!output.dir.empty()) {
    const auto path = output.dir / (stage + "_nonfinite_snapshot.json");
    nlohmann::ordered_json j;
    j["stage"] = stage;
    j["epoch"] = epoch;
    j["step"] = step;
    j["loss"] = std::to_string(loss);
    j["batch"] = std::vector<std::size_t>(batch.begin(), batch.end());
    std::ofstream(path, std::ios::trunc) << j.dump(2) << '\n';
    snapshot = path.string();
  }
  throw NumericError(stage + ": non-finite loss at epoch " + std::to_string(epoch) +
                         ", step " + std::to_string(step),
                     snapshot);
}

std::string epoch_checkpoint_name(const std::string& stage, std::size_t epoch) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_epoch%03zu.ckpt", stage.c_str(), epoch);
  return buf;
}

}  // namespace seed
