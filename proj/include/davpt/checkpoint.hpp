#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "davpt/vit.hpp"

namespace davpt {

/// Checkpoint layout (all integers little-endian):
///
///   0   "DVPT"
///   4   u32 version (= 1)
///   8   u32 image_size, patch_size, channels, embed_dim, num_layers, num_heads
///   32  f64 mlp_ratio
///   40  u32 num_classes, prompts_per_layer, prompt_init, policy
///   56  u64 number of f64 values that follow
///   64  f64 values of ModelParams::parameters() in order, each row-major
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointHeaderBytes = 64;

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params);
/// Throws FormatError for any malformed input; never reads past `bytes`.
ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace davpt
