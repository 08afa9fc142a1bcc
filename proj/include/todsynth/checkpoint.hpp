#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "todsynth/numerics/adamw.hpp"
#include "todsynth/numerics/tensor.hpp"

namespace todsynth {

// "TODW" weight file, little-endian:
//   magic, u16 version, kind string, config JSON, u64 step,
//   u32 count, then per parameter: name, u8 rank, u32 dims, float32 data,
//   u8 optimizer flag, then (if set) u64 optimizer step and both moment blobs.
// Strings are u32 length + bytes.
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<Tensor> first;
  std::vector<Tensor> second;
};

struct Checkpoint {
  std::string kind;         // "flownet" or "segnet"
  std::string config_json;  // echo of the model config
  std::uint64_t step = 0;   // training steps completed
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  std::optional<OptimizerState> optimizer;
};

Checkpoint make_checkpoint(std::string kind, std::string config_json, std::uint64_t step,
                           const ParameterSet& params, const AdamW* opt = nullptr);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws MissingArtifactError if absent, FormatError if malformed.
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies checkpoint tensors into params; names, order and shapes must match.
void load_parameters(const Checkpoint& ckpt, ParameterSet& params);
// Restores optimizer moments saved alongside params (no-op if none saved).
void load_optimizer(const Checkpoint& ckpt, AdamW& opt);

}  // namespace todsynth
