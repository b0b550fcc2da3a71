#pragma once

// Persistence: dense arrays (.npy), model checkpoints, atomic file writes.

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "art/model.hpp"
#include "art/optim.hpp"
#include "art/tensor.hpp"

namespace art {

/// Writes `content` to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

/// NumPy .npy v1.0, little-endian float64, C order.
std::string encode_npy(const Tensor& t);
/// Accepts <f8, <f4, |u1, <i4, <i8 (C order); converts to double.
Tensor decode_npy(const std::string& bytes);
void write_npy(const std::filesystem::path& path, const Tensor& t);
Tensor read_npy(const std::filesystem::path& path);

struct TrainingMetadata {
  int epoch = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string training_kind;
  nlohmann::json extra = nlohmann::json::object();
};

struct Checkpoint {
  static constexpr int kFormatVersion = 1;
  ModelBundle model;
  OptimizerState optimizer;
  TrainingMetadata metadata;
};

/// Container layout: 8-byte magic "ARTCKPT\0", u64 little-endian header size,
/// JSON header (format_version, architecture, activation, array table,
/// optimizer step count, metadata), then raw float64 payload.
void save_checkpoint(const std::filesystem::path& path, const ModelBundle& model, const OptimizerState& optimizer,
                     const TrainingMetadata& metadata);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a 64-bit, hex-encoded. Used for config hashes.
std::string fnv1a_hex(const std::string& data);

}  // namespace art
