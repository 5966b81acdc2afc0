#pragma once

// Versioned binary checkpoint: header (schema version, config hash, config
// JSON, step) followed by named raw tensors.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <torch/torch.h>

#include "json.hpp"

namespace kgan {

inline constexpr std::uint32_t kCheckpointSchemaVersion = 1;

struct Checkpoint {
  std::uint32_t schema_version = kCheckpointSchemaVersion;
  nlohmann::json config;
  std::int64_t step = 0;
  std::map<std::string, torch::Tensor> arrays;
};

/// Hash of the canonical (sorted-key, compact) JSON dump.
std::uint64_t config_hash(const nlohmann::json& config);

/// Writes to a temporary file and renames, so a crash never leaves a torn file.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws VersionError on bad magic, unsupported schema or a corrupted config hash.
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Parameters and buffers under `prefix`, detached CPU copies.
void export_module(const torch::nn::Module& module, const std::string& prefix,
                   std::map<std::string, torch::Tensor>& out);

/// Copies every parameter/buffer of `module` from `arrays`; every entry must be
/// present with a matching shape.
void import_module(torch::nn::Module& module, const std::string& prefix,
                   const std::map<std::string, torch::Tensor>& arrays);

}  // namespace kgan
