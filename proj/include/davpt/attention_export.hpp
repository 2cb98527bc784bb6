#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "davpt/vit.hpp"

namespace davpt {

struct AttentionSelection {
  enum class Target { Cls, Prompt };
  std::size_t layer = 0;
  std::optional<std::size_t> head;  ///< empty = mean over heads
  Target target = Target::Cls;
  std::size_t prompt = 0;  ///< row index when target is Prompt
  std::size_t sample = 0;  ///< batch position
};

/// One attention row restricted to the visual-token columns, on the patch grid.
struct AttentionGrid {
  std::size_t grid = 0;
  std::vector<double> values;  ///< grid x grid, row-major
  double other_mass = 0.0;     ///< weight on the CLS and prompt columns
};

/// Throws ConfigError naming the traced layers when `sel.layer` was not traced.
AttentionGrid extract_attention(const ForwardResult& forward, const AttentionSelection& sel);

/// Grid rows as comma-separated values, preceded by comment lines carrying the
/// manifest hash (if any) and the CLS/prompt column mass.
std::string attention_csv(const AttentionGrid& grid, const std::string& manifest_hash = "");

/// Binary graymap (P5), min-max normalized per map; a constant map is mid-gray.
std::vector<std::uint8_t> attention_pgm(const AttentionGrid& grid, const std::string& manifest_hash = "");

}  // namespace davpt
