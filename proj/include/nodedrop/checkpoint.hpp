#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nodedrop/model.hpp"
#include "nodedrop/nodedrop.hpp"

namespace nodedrop {

// Container layout (single file):
//   "NDCK" | u32 LE format_version | u64 LE manifest length | manifest JSON |
//   blobs (little-endian float32, manifest order)
// The manifest lists every blob with name, shape, byte offset and length.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string preset;
  NodeDropConfig nodedrop;
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;

  bool operator==(const CheckpointMeta&) const = default;
};

struct Checkpoint {
  Model<float> model;
  CheckpointMeta meta;
};

std::vector<std::uint8_t> serialize_checkpoint(const Model<float>& model, const CheckpointMeta& meta);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

// Writes via a temporary file and rename. Weights are stored as float32
// whatever the in-memory precision.
template <typename T>
void save_checkpoint(const Model<T>& model, const CheckpointMeta& meta,
                     const std::filesystem::path& path);

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace nodedrop
