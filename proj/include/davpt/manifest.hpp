#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace davpt {

/// SHA-1 of "blob <size>\0" + bytes, lowercase hex (what `git hash-object` prints).
std::string git_blob_hash(std::span<const std::uint8_t> bytes);
std::string sha1_hex(std::span<const std::uint8_t> bytes);

/// Flat `key: value` record of a run. The hash covers everything except the
/// output paths, so the same run written to two directories hashes the same.
struct RunManifest {
  std::string command;
  std::uint64_t seed = 0;
  std::string dataset_hash;
  std::string config_text;  ///< `key = value` lines
  std::vector<std::pair<std::string, std::string>> outputs;

  std::string hash() const;
  std::string format() const;
};

}  // namespace davpt
