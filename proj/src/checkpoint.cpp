#include "davpt/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "byteio.hpp"
#include "davpt/error.hpp"

namespace davpt {

namespace {

constexpr char kMagic[4] = {'D', 'V', 'P', 'T'};
// Geometry caps keep fuzzed headers from requesting absurd allocations.
constexpr std::uint32_t kMaxExtent = 4096;

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params) {
  const ViTConfig& c = params.config;
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  byteio::put_u32(out, kCheckpointVersion);
  for (std::size_t v : {c.image_size, c.patch_size, c.channels, c.embed_dim, c.num_layers, c.num_heads})
    byteio::put_u32(out, static_cast<std::uint32_t>(v));
  byteio::put_f64(out, c.mlp_ratio);
  byteio::put_u32(out, static_cast<std::uint32_t>(c.num_classes));
  byteio::put_u32(out, static_cast<std::uint32_t>(c.prompts_per_layer));
  byteio::put_u32(out, static_cast<std::uint32_t>(c.prompt_init));
  byteio::put_u32(out, static_cast<std::uint32_t>(params.policy));
  std::uint64_t count = 0;
  const auto tensors = params.parameters();
  for (const Tensor* t : tensors) count += t->numel();
  byteio::put_u64(out, count);
  out.reserve(out.size() + count * 8);
  for (const Tensor* t : tensors)
    for (double v : t->values()) byteio::put_f64(out, v);
  return out;
}

ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kCheckpointHeaderBytes) {
    throw FormatError(FormatIssue::Truncated, "checkpoint truncated: header needs " +
                                                  std::to_string(kCheckpointHeaderBytes) + " bytes, file has " +
                                                  std::to_string(bytes.size()));
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(FormatIssue::BadMagic, "checkpoint: bad magic");
  const std::uint32_t version = byteio::get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    throw FormatError(FormatIssue::UnsupportedVersion,
                      "checkpoint: unsupported version " + std::to_string(version));
  }
  ViTConfig c;
  std::uint32_t raw[6];
  for (int i = 0; i < 6; ++i) {
    raw[i] = byteio::get_u32(bytes, 8 + 4 * i);
    if (raw[i] == 0 || raw[i] > kMaxExtent) {
      throw FormatError(FormatIssue::BadHeader, "checkpoint: geometry field " + std::to_string(i) + " = " +
                                                    std::to_string(raw[i]) + " out of range");
    }
  }
  c.image_size = raw[0];
  c.patch_size = raw[1];
  c.channels = raw[2];
  c.embed_dim = raw[3];
  c.num_layers = raw[4];
  c.num_heads = raw[5];
  c.mlp_ratio = byteio::get_f64(bytes, 32);
  const std::uint32_t classes = byteio::get_u32(bytes, 40);
  const std::uint32_t prompts = byteio::get_u32(bytes, 44);
  const std::uint32_t init = byteio::get_u32(bytes, 48);
  const std::uint32_t policy = byteio::get_u32(bytes, 52);
  if (!(c.mlp_ratio > 0.0 && c.mlp_ratio <= 64.0)) throw FormatError(FormatIssue::BadHeader, "checkpoint: bad mlp_ratio");
  if (classes == 0 || classes > kMaxExtent || prompts > kMaxExtent || init > 1 || policy > 3) {
    throw FormatError(FormatIssue::BadHeader, "checkpoint: bad class/prompt/init/policy fields");
  }
  c.num_classes = classes;
  c.prompts_per_layer = prompts;
  c.prompt_init = static_cast<PromptInit>(init);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(FormatIssue::BadHeader, std::string("checkpoint: ") + e.what());
  }

  // Expected value count, computed in 64 bits before anything is allocated.
  const std::uint64_t d = c.embed_dim, n = c.num_patches(), h = c.hidden_dim();
  const std::uint64_t per_block = 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d) + prompts * d;
  const std::uint64_t expected = d * c.patch_dim() + d + d + (n + 1) * d + c.num_layers * per_block +
                                 classes * d + classes;
  const std::uint64_t declared = byteio::get_u64(bytes, 56);
  if (declared != expected) {
    throw FormatError(FormatIssue::BadHeader, "checkpoint: declares " + std::to_string(declared) +
                                                  " values, configuration implies " + std::to_string(expected));
  }
  const std::uint64_t want = kCheckpointHeaderBytes + expected * 8;
  if (bytes.size() < want) {
    throw FormatError(FormatIssue::Truncated, "checkpoint truncated: expected " + std::to_string(want) +
                                                  " bytes, got " + std::to_string(bytes.size()));
  }
  if (bytes.size() > want) {
    throw FormatError(FormatIssue::TrailingBytes, "checkpoint: expected " + std::to_string(want) + " bytes, got " +
                                                      std::to_string(bytes.size()));
  }

  ModelParams m = init_model(c, 0, static_cast<Policy>(policy));
  std::size_t at = kCheckpointHeaderBytes;
  for (NamedParam& p : m.parameters()) {
    for (double& v : p.tensor->values()) {
      v = byteio::get_f64(bytes, at);
      at += 8;
    }
  }
  set_trainability(m, static_cast<Policy>(policy));
  return m;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
  write_file(path, encode_checkpoint(params));
}

ModelParams load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace davpt
