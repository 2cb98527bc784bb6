#pragma once

#include <map>
#include <string>
#include <vector>

#include "davpt/data.hpp"
#include "davpt/trainer.hpp"

namespace davpt {

/// Parsed `key = value` lines; `#` starts a comment. Later keys win.
struct ConfigFile {
  std::vector<std::pair<std::string, std::string>> entries;

  const std::string* find(const std::string& key) const;
};

ConfigFile parse_config(const std::string& text);
/// Throws ConfigError naming the path when the file cannot be read.
ConfigFile load_config(const std::string& path);

/// "desk" (30 epochs, warmup 3), "paper" (100 epochs, warmup 10, delta 32,
/// tau 10) or "proxy_anchor_classic" (delta 0.1, tau 1/32).
void apply_train_preset(TrainConfig& cfg, const std::string& name);

/// Sets one training key. Throws ConfigError for unknown keys or bad values.
void set_train_key(TrainConfig& cfg, const std::string& key, const std::string& value);

/// Applies a "preset" entry first, then every other entry in file order.
void apply_config(TrainConfig& cfg, const ConfigFile& file);

/// Canonical `key = value` text of every training setting, in fixed order.
std::string format_train_config(const TrainConfig& cfg);

void set_synth_key(SynthSpec& spec, const std::string& key, const std::string& value);

std::vector<std::size_t> parse_index_list(const std::string& text);
std::vector<double> parse_double_list(const std::string& text);

}  // namespace davpt
