#pragma once

// Named-tensor container shared by model, adapter and policy checkpoints.
//
// Layout (all integers little-endian):
//   "CARL"                   4 bytes magic
//   u32 version              kCheckpointVersion
//   u64 header_len
//   header                   UTF-8 JSON {kind, config, meta, tensors: {name: {offset, shape}}}
//   blob                     contiguous little-endian float64 values; offsets are
//                            byte offsets from the start of the blob

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include <json.hpp>

#include "coarl/autodiff.hpp"

namespace coarl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, ad::Tensor> tensors;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

/// Writes via a temporary file and rename so readers never see partial files.
void save_checkpoint_file(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint_file(const std::filesystem::path& path);

/// FNV-1a over the raw bytes of every tensor, in name order.
std::uint64_t tensor_map_hash(const std::map<std::string, ad::Tensor>& tensors);

}  // namespace coarl
