#include "davpt/attention_export.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "davpt/error.hpp"

namespace davpt {

AttentionGrid extract_attention(const ForwardResult& forward, const AttentionSelection& sel) {
  const LayerTrace* tr = forward.trace(sel.layer);
  if (tr == nullptr) {
    std::string traced;
    for (const LayerTrace& t : forward.traces) traced += (traced.empty() ? "" : ", ") + std::to_string(t.layer);
    throw ConfigError("layer " + std::to_string(sel.layer) + " was not traced (traced layers: " +
                      (traced.empty() ? "none" : traced) + ")");
  }
  if (sel.sample >= forward.batch) throw ConfigError("sample index out of range for the traced batch");
  const std::size_t seq = tr->seq_len, m = tr->prompt_count;
  const std::size_t heads = tr->attention.size() / (forward.batch * seq * seq);
  const std::size_t n = seq - 1 - m;
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (sel.head && *sel.head >= heads) {
    throw ConfigError("head " + std::to_string(*sel.head) + " out of range; layer has " + std::to_string(heads));
  }
  std::size_t row = 0;
  if (sel.target == AttentionSelection::Target::Prompt) {
    if (sel.prompt >= m) {
      throw ConfigError("prompt " + std::to_string(sel.prompt) + " out of range; layer " + std::to_string(sel.layer) +
                        " has " + std::to_string(m) + " prompts");
    }
    row = 1 + sel.prompt;
  }
  std::vector<double> full(seq, 0.0);
  const std::size_t h0 = sel.head ? *sel.head : 0, h1 = sel.head ? *sel.head + 1 : heads;
  for (std::size_t h = h0; h < h1; ++h) {
    const double* r = tr->attention.data() + ((sel.sample * heads + h) * seq + row) * seq;
    for (std::size_t j = 0; j < seq; ++j) full[j] += r[j];
  }
  const double inv = 1.0 / static_cast<double>(h1 - h0);
  for (double& v : full) v *= inv;
  AttentionGrid out;
  out.grid = g;
  out.values.assign(full.begin() + 1 + static_cast<std::ptrdiff_t>(m), full.end());
  for (std::size_t j = 0; j < 1 + m; ++j) out.other_mass += full[j];
  return out;
}

std::string attention_csv(const AttentionGrid& grid, const std::string& manifest_hash) {
  std::ostringstream os;
  char buf[32];
  if (!manifest_hash.empty()) os << "# manifest " << manifest_hash << '\n';
  std::snprintf(buf, sizeof buf, "%.17g", grid.other_mass);
  os << "# cls_and_prompt_mass " << buf << '\n';
  for (std::size_t r = 0; r < grid.grid; ++r) {
    for (std::size_t c = 0; c < grid.grid; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", grid.values[r * grid.grid + c]);
      os << (c ? "," : "") << buf;
    }
    os << '\n';
  }
  return os.str();
}

std::vector<std::uint8_t> attention_pgm(const AttentionGrid& grid, const std::string& manifest_hash) {
  std::string header = "P5\n";
  if (!manifest_hash.empty()) header += "# manifest " + manifest_hash + "\n";
  header += std::to_string(grid.grid) + " " + std::to_string(grid.grid) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const auto [lo, hi] = std::minmax_element(grid.values.begin(), grid.values.end());
  const double range = *hi - *lo;
  for (double v : grid.values) {
    if (!(range > 0.0)) {
      out.push_back(128);
      continue;
    }
    out.push_back(static_cast<std::uint8_t>(std::lround(255.0 * (v - *lo) / range)));
  }
  return out;
}

}  // namespace davpt
