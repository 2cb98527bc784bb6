#include "davpt/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "davpt/error.hpp"

namespace davpt {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  return x;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

const std::string* ConfigFile::find(const std::string& key) const {
  const std::string* out = nullptr;
  for (const auto& [k, v] : entries)
    if (k == key) out = &v;
  return out;
}

ConfigFile parse_config(const std::string& text) {
  ConfigFile out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    out.entries.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

ConfigFile load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void apply_train_preset(TrainConfig& cfg, const std::string& name) {
  if (name == "desk") {
    cfg.total_epochs = 30;
    cfg.warmup_epochs = 3;
  } else if (name == "paper") {
    cfg.total_epochs = 100;
    cfg.warmup_epochs = 10;
    apply_metric_preset(cfg.metric, "paper");
  } else if (name == "proxy_anchor_classic") {
    apply_metric_preset(cfg.metric, name);
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected desk, paper or proxy_anchor_classic)");
  }
}

std::vector<std::size_t> parse_index_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<std::size_t>(to_uint("list", item)));
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(to_double("list", item));
  }
  return out;
}

void set_train_key(TrainConfig& cfg, const std::string& key, const std::string& v) {
  ViTConfig& m = cfg.model;
  MetricConfig& mc = cfg.metric;
  if (key == "preset") apply_train_preset(cfg, v);
  else if (key == "policy") cfg.policy = parse_policy(v);
  else if (key == "beta") mc.beta = to_double(key, v);
  else if (key == "lambda") mc.lambda = to_double(key, v);
  else if (key == "delta") mc.delta = to_double(key, v);
  else if (key == "tau") mc.tau = to_double(key, v);
  else if (key == "guided_layers") mc.guided_layers = parse_index_list(v);
  else if (key == "compare_space") mc.compare_space = parse_compare_space(v);
  else if (key == "saliency_top_k") mc.saliency_top_k = to_uint(key, v);
  else if (key == "lr" || key == "base_lr") cfg.base_lr = to_double(key, v);
  else if (key == "weight_decay") cfg.weight_decay = to_double(key, v);
  else if (key == "decay_prompts") cfg.decay_prompts = to_bool(key, v);
  else if (key == "decay_biases") cfg.decay_biases = to_bool(key, v);
  else if (key == "warmup_epochs") cfg.warmup_epochs = to_uint(key, v);
  else if (key == "epochs" || key == "total_epochs") cfg.total_epochs = to_uint(key, v);
  else if (key == "batch_size") cfg.batch_size = to_uint(key, v);
  else if (key == "seed") cfg.seed = to_uint(key, v);
  else if (key == "backbone_seed") cfg.backbone_seed = to_uint(key, v);
  else if (key == "eval_every") cfg.eval_every = to_uint(key, v);
  else if (key == "clip_norm") cfg.clip_norm = to_double(key, v);
  else if (key == "metric_terms") cfg.metric_terms = to_bool(key, v);
  else if (key == "image_size") m.image_size = to_uint(key, v);
  else if (key == "patch_size") m.patch_size = to_uint(key, v);
  else if (key == "channels") m.channels = to_uint(key, v);
  else if (key == "embed_dim") m.embed_dim = to_uint(key, v);
  else if (key == "num_layers") m.num_layers = to_uint(key, v);
  else if (key == "num_heads") m.num_heads = to_uint(key, v);
  else if (key == "mlp_ratio") m.mlp_ratio = to_double(key, v);
  else if (key == "num_classes") m.num_classes = to_uint(key, v);
  else if (key == "prompts") m.prompts_per_layer = to_uint(key, v);
  else if (key == "prompt_init") m.prompt_init = parse_prompt_init(v);
  else throw ConfigError("unknown config key '" + key + "'");
}

void apply_config(TrainConfig& cfg, const ConfigFile& file) {
  if (const std::string* p = file.find("preset")) apply_train_preset(cfg, *p);
  for (const auto& [k, v] : file.entries)
    if (k != "preset") set_train_key(cfg, k, v);
}

std::string format_train_config(const TrainConfig& cfg) {
  std::ostringstream os;
  const ViTConfig& m = cfg.model;
  const MetricConfig& mc = cfg.metric;
  std::string layers;
  for (std::size_t l : mc.resolved_layers(m.num_layers)) layers += (layers.empty() ? "" : ",") + std::to_string(l);
  os << "policy = " << to_string(cfg.policy) << '\n'
     << "beta = " << num(mc.beta) << '\n'
     << "lambda = " << num(mc.lambda) << '\n'
     << "delta = " << num(mc.delta) << '\n'
     << "tau = " << num(mc.tau) << '\n'
     << "guided_layers = " << layers << '\n'
     << "compare_space = " << to_string(mc.compare_space) << '\n'
     << "saliency_top_k = " << mc.saliency_top_k << '\n'
     << "lr = " << num(cfg.base_lr) << '\n'
     << "weight_decay = " << num(cfg.weight_decay) << '\n'
     << "decay_prompts = " << (cfg.decay_prompts ? "true" : "false") << '\n'
     << "decay_biases = " << (cfg.decay_biases ? "true" : "false") << '\n'
     << "warmup_epochs = " << cfg.warmup_epochs << '\n'
     << "epochs = " << cfg.total_epochs << '\n'
     << "batch_size = " << cfg.batch_size << '\n'
     << "seed = " << cfg.seed << '\n'
     << "backbone_seed = " << cfg.backbone_seed << '\n'
     << "eval_every = " << cfg.eval_every << '\n'
     << "clip_norm = " << num(cfg.clip_norm) << '\n'
     << "metric_terms = " << (cfg.metric_terms ? "true" : "false") << '\n'
     << "image_size = " << m.image_size << '\n'
     << "patch_size = " << m.patch_size << '\n'
     << "channels = " << m.channels << '\n'
     << "embed_dim = " << m.embed_dim << '\n'
     << "num_layers = " << m.num_layers << '\n'
     << "num_heads = " << m.num_heads << '\n'
     << "mlp_ratio = " << num(m.mlp_ratio) << '\n'
     << "num_classes = " << m.num_classes << '\n'
     << "prompts = " << m.prompts_per_layer << '\n'
     << "prompt_init = " << to_string(m.prompt_init) << '\n';
  return os.str();
}

void set_synth_key(SynthSpec& spec, const std::string& key, const std::string& v) {
  if (key == "num_classes") spec.num_classes = to_uint(key, v);
  else if (key == "samples_per_class") spec.samples_per_class = to_uint(key, v);
  else if (key == "image_size") spec.image_size = to_uint(key, v);
  else if (key == "channels") spec.channels = to_uint(key, v);
  else if (key == "separability") spec.separability = to_double(key, v);
  else if (key == "noise_std") spec.noise_std = to_double(key, v);
  else if (key == "seed") spec.seed = to_uint(key, v);
  else throw ConfigError("unknown dataset key '" + key + "'");
}

}  // namespace davpt
