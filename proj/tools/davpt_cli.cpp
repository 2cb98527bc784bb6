// Command-line front end over the C interface.
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "davpt/davpt.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;

void print_line(const char* line, void*) { std::printf("%s\n", line); }

int report_error(davpt_status s) {
  std::fprintf(stderr, "error: %s: %s\n", davpt_status_name(s), davpt_last_error());
  return s == DAVPT_ERR_NUMERIC || s == DAVPT_ERR_DIVERGED ? kExitNumeric : kExitUsage;
}

std::vector<double> split_doubles(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    const double v = std::stod(item, &used);
    if (used != item.size()) throw std::invalid_argument(item);
    out.push_back(v);
  }
  return out;
}

struct GenDataArgs {
  std::size_t classes = 8, per_class = 64, image_size = 32, channels = 3;
  double separability = 1.0, noise = 8.0;
  std::optional<std::uint64_t> seed;
  std::string out;
};

struct TrainArgs {
  std::string config, data, out, policy, guided_layers, preset, compare_space;
  std::optional<double> beta, lambda, delta, tau, lr;
  std::optional<std::size_t> prompts, epochs;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
};

struct AttnArgs {
  std::string ckpt, data, head = "mean", target = "cls", mapping, out;
  std::size_t layer = 0, sample = 0;
};

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("DAVPT_SEED");
  if (s == nullptr || *s == '\0') return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0') {
    std::fprintf(stderr, "warning: ignoring non-numeric DAVPT_SEED '%s'\n", s);
    return std::nullopt;
  }
  return v;
}

template <typename T>
std::string str(const T& v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

int run_gen_data(const GenDataArgs& a) {
  std::ostringstream spec;
  spec << "num_classes = " << a.classes << "\nsamples_per_class = " << a.per_class << "\nimage_size = " << a.image_size
       << "\nchannels = " << a.channels << "\nseparability = " << str(a.separability) << "\nnoise_std = " << str(a.noise)
       << "\nseed = " << a.seed.value_or(env_seed().value_or(0)) << "\n";
  davpt_dataset* ds = nullptr;
  double proto = 0.0;
  davpt_status s = davpt_dataset_generate(spec.str().c_str(), &ds, &proto);
  if (s != DAVPT_OK) return report_error(s);
  s = davpt_dataset_save(ds, a.out.c_str());
  davpt_dataset_info info{};
  davpt_dataset_info_get(ds, &info);
  davpt_dataset_free(ds);
  if (s != DAVPT_OK) return report_error(s);
  std::printf("wrote %s: %u samples, %ux%ux%u, %u classes, nearest-prototype accuracy %.4f\n", a.out.c_str(),
              info.num_samples, info.height, info.width, info.channels, info.num_classes, proto);
  return kExitOk;
}

int run_train(const TrainArgs& a) {
  davpt_config* cfg = nullptr;
  davpt_config_new(&cfg);
  std::vector<std::pair<std::string, std::string>> sets;
  if (const auto s = env_seed()) sets.emplace_back("seed", std::to_string(*s));
  auto apply = [&](const std::string& k, const std::string& v) { sets.emplace_back(k, v); };
  davpt_status st = DAVPT_OK;
  for (const auto& [k, v] : sets) st = st == DAVPT_OK ? davpt_config_set(cfg, k.c_str(), v.c_str()) : st;
  sets.clear();
  if (st == DAVPT_OK && !a.config.empty()) st = davpt_config_load(cfg, a.config.c_str());
  if (!a.preset.empty()) apply("preset", a.preset);
  if (!a.policy.empty()) apply("policy", a.policy);
  if (a.beta) apply("beta", str(*a.beta));
  if (a.lambda) apply("lambda", str(*a.lambda));
  if (a.delta) apply("delta", str(*a.delta));
  if (a.tau) apply("tau", str(*a.tau));
  if (!a.guided_layers.empty()) apply("guided_layers", a.guided_layers);
  if (!a.compare_space.empty()) apply("compare_space", a.compare_space);
  if (a.prompts) apply("prompts", str(*a.prompts));
  if (a.seed) apply("seed", str(*a.seed));
  if (a.epochs) apply("epochs", str(*a.epochs));
  if (a.lr) apply("lr", str(*a.lr));
  for (const std::string& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
      davpt_config_free(cfg);
      return kExitUsage;
    }
    apply(kv.substr(0, eq), kv.substr(eq + 1));
  }
  for (const auto& [k, v] : sets) st = st == DAVPT_OK ? davpt_config_set(cfg, k.c_str(), v.c_str()) : st;
  if (st != DAVPT_OK) {
    davpt_config_free(cfg);
    return report_error(st);
  }

  davpt_dataset* ds = nullptr;
  st = davpt_dataset_load(a.data.c_str(), &ds);
  if (st != DAVPT_OK) {
    davpt_config_free(cfg);
    return report_error(st);
  }
  davpt_train_summary summary{};
  st = davpt_train(cfg, ds, a.out.c_str(), print_line, nullptr, &summary);
  davpt_dataset_free(ds);
  davpt_config_free(cfg);
  if (st != DAVPT_OK && st != DAVPT_ERR_DIVERGED) return report_error(st);
  std::printf("test accuracy %.4f, margin satisfaction %.4f -> %.4f, manifest %s\n", summary.test_accuracy,
              summary.first_margin_sat, summary.final_margin_sat, summary.manifest_hash);
  if (st == DAVPT_ERR_DIVERGED) return report_error(st);
  return kExitOk;
}

int run_eval(const std::string& ckpt, const std::string& data) {
  davpt_model* model = nullptr;
  davpt_status st = davpt_model_load(ckpt.c_str(), &model);
  if (st != DAVPT_OK) return report_error(st);
  davpt_dataset* ds = nullptr;
  st = davpt_dataset_load(data.c_str(), &ds);
  if (st != DAVPT_OK) {
    davpt_model_free(model);
    return report_error(st);
  }
  double acc = 0.0;
  st = davpt_evaluate(model, ds, &acc);
  davpt_dataset_free(ds);
  davpt_model_free(model);
  if (st != DAVPT_OK) return report_error(st);
  std::printf("accuracy %.6f\n", acc);
  return kExitOk;
}

int run_verify(std::size_t dim, std::size_t tokens, const std::string& scales_text, std::size_t draws,
               std::uint64_t seed) {
  std::vector<double> scales;
  try {
    scales = split_doubles(scales_text);
  } catch (const std::exception&) {
    std::fprintf(stderr, "error: --scales expects a comma-separated list of numbers\n");
    return kExitUsage;
  }
  davpt_theorem_summary s{};
  const davpt_status st =
      davpt_verify_theorem(dim, tokens, scales.data(), scales.size(), draws, seed, print_line, nullptr, &s);
  if (st != DAVPT_OK) return report_error(st);
  std::printf("orthogonal regime: %zu/%zu draws with error ratios in [3.5, 4.5] (observed %.4f .. %.4f)%s\n",
              s.orthogonal_ok, s.draws, s.min_ratio, s.max_ratio,
              s.orthogonal_unavailable ? ", some draws unavailable" : "");
  std::printf("general regime: %zu/%zu draws with residual order in [1.8, 2.2] (observed %.4f .. %.4f)\n",
              s.residual_ok, s.draws, s.min_order, s.max_order);
  return s.orthogonal_ok == s.draws ? kExitOk : kExitNumeric;
}

int run_grad_check(const std::string& module) {
  std::size_t failures = 0;
  double worst = 0.0;
  const davpt_status st = davpt_grad_check(module.c_str(), print_line, nullptr, &failures, &worst);
  if (st != DAVPT_OK) return report_error(st);
  std::printf("%zu check(s) over tolerance 1e-5; worst relative error %.3e\n", failures, worst);
  return failures == 0 ? kExitOk : kExitNumeric;
}

int run_export(const AttnArgs& a) {
  davpt_attention_request req{};
  req.layer = a.layer;
  req.sample = a.sample;
  try {
    req.head = a.head == "mean" ? -1 : std::stoi(a.head);
  } catch (const std::exception&) {
    std::fprintf(stderr, "error: --head expects an index or 'mean'\n");
    return kExitUsage;
  }
  if (a.target == "cls") {
    req.target = DAVPT_TARGET_CLS;
  } else if (a.target == "positive") {
    req.target = DAVPT_TARGET_POSITIVE;
    req.mapping_path = a.mapping.empty() ? nullptr : a.mapping.c_str();
  } else if (a.target.rfind("prompt:", 0) == 0) {
    req.target = DAVPT_TARGET_PROMPT;
    try {
      req.prompt = std::stoul(a.target.substr(7));
    } catch (const std::exception&) {
      std::fprintf(stderr, "error: --target prompt:K needs an integer K\n");
      return kExitUsage;
    }
  } else {
    std::fprintf(stderr, "error: --target must be cls, prompt:K or positive\n");
    return kExitUsage;
  }
  davpt_model* model = nullptr;
  davpt_status st = davpt_model_load(a.ckpt.c_str(), &model);
  if (st != DAVPT_OK) return report_error(st);
  davpt_dataset* ds = nullptr;
  st = davpt_dataset_load(a.data.c_str(), &ds);
  if (st == DAVPT_OK) {
    const std::string csv = a.out + ".csv", pgm = a.out + ".pgm";
    st = davpt_export_attention(model, ds, &req, csv.c_str(), pgm.c_str());
    if (st == DAVPT_OK) std::printf("wrote %s and %s\n", csv.c_str(), pgm.c_str());
    davpt_dataset_free(ds);
  }
  davpt_model_free(model);
  return st == DAVPT_OK ? kExitOk : report_error(st);
}

int run_dump_mapping(const std::string& mapping, const std::string& ckpt, const std::string& data,
                     std::uint64_t seed, const std::string& out) {
  if (!mapping.empty()) {
    const davpt_status st = davpt_print_mapping(mapping.c_str(), print_line, nullptr);
    return st == DAVPT_OK ? kExitOk : report_error(st);
  }
  if (ckpt.empty() || data.empty()) {
    std::fprintf(stderr, "error: dump-mapping needs --mapping, or --ckpt together with --data\n");
    return kExitUsage;
  }
  davpt_model* model = nullptr;
  davpt_status st = davpt_model_load(ckpt.c_str(), &model);
  if (st != DAVPT_OK) return report_error(st);
  davpt_dataset* ds = nullptr;
  st = davpt_dataset_load(data.c_str(), &ds);
  if (st == DAVPT_OK) {
    st = davpt_dump_mapping(model, ds, seed, out.empty() ? nullptr : out.c_str(), print_line, nullptr);
    davpt_dataset_free(ds);
  }
  davpt_model_free(model);
  return st == DAVPT_OK ? kExitOk : report_error(st);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Metric-guided visual prompt tuning lab"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset file");
  gen_cmd->add_option("--classes", gen.classes, "Number of classes")->capture_default_str();
  gen_cmd->add_option("--per-class", gen.per_class, "Samples per class")->capture_default_str();
  gen_cmd->add_option("--image-size", gen.image_size, "Image side in pixels")->capture_default_str();
  gen_cmd->add_option("--channels", gen.channels, "Channels per pixel")->capture_default_str();
  gen_cmd->add_option("--separability", gen.separability, "Prototype contrast in [0, 1]")->capture_default_str();
  gen_cmd->add_option("--noise", gen.noise, "Gaussian pixel noise std")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed (default: DAVPT_SEED or 0)");
  gen_cmd->add_option("--out", gen.out, "Output file")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train on a dataset file");
  train_cmd->add_option("--config", tr.config, "key = value config file");
  train_cmd->add_option("--data", tr.data, "Dataset file")->required();
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--preset", tr.preset, "desk, paper or proxy_anchor_classic");
  train_cmd->add_option("--policy", tr.policy, "linear, vpt_deep, da_vpt or da_vpt_plus");
  train_cmd->add_option("--beta", tr.beta, "Weight of the prompt-token metric loss");
  train_cmd->add_option("--lambda", tr.lambda, "Weight of the prompt-CLS metric loss");
  train_cmd->add_option("--delta", tr.delta, "Metric margin");
  train_cmd->add_option("--tau", tr.tau, "Metric temperature");
  train_cmd->add_option("--guided-layers", tr.guided_layers, "Comma-separated layer indices");
  train_cmd->add_option("--compare-space", tr.compare_space, "query_projected or raw_prompt");
  train_cmd->add_option("--prompts", tr.prompts, "Prompts per layer");
  train_cmd->add_option("--seed", tr.seed, "Run seed (default: DAVPT_SEED, then config)");
  train_cmd->add_option("--epochs", tr.epochs, "Total epochs");
  train_cmd->add_option("--lr", tr.lr, "Base learning rate");
  train_cmd->add_option("--set", tr.sets, "Extra key=value settings");

  std::string eval_ckpt, eval_data;
  auto* eval_cmd = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint on a dataset");
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset file")->required();

  std::size_t th_dim = 8, th_tokens = 4, th_draws = 20;
  std::uint64_t th_seed = 0;
  std::string th_scales = "1e-2,5e-3,2.5e-3,1.25e-3";
  auto* th_cmd = app.add_subcommand("verify-theorem", "Check the first-order attention response numerically");
  th_cmd->add_option("--dim", th_dim, "Key dimension")->capture_default_str();
  th_cmd->add_option("--tokens", th_tokens, "Number of keys")->capture_default_str();
  th_cmd->add_option("--scales", th_scales, "Decreasing perturbation scales")->capture_default_str();
  th_cmd->add_option("--draws", th_draws, "Random draws")->capture_default_str();
  th_cmd->add_option("--seed", th_seed, "Seed of the first draw")->capture_default_str();

  std::string gc_module = "all";
  auto* gc_cmd = app.add_subcommand("grad-check", "Finite-difference gradient checks");
  gc_cmd->add_option("--module", gc_module, "all, ops, attention, backbone, losses or objective")
      ->capture_default_str();

  AttnArgs at;
  auto* at_cmd = app.add_subcommand("export-attn", "Export one attention map as CSV and PGM");
  at_cmd->add_option("--ckpt", at.ckpt, "Checkpoint file")->required();
  at_cmd->add_option("--data", at.data, "Dataset file")->required();
  at_cmd->add_option("--layer", at.layer, "Layer index")->capture_default_str();
  at_cmd->add_option("--head", at.head, "Head index or 'mean'")->capture_default_str();
  at_cmd->add_option("--target", at.target, "cls, prompt:K or positive")->capture_default_str();
  at_cmd->add_option("--mapping", at.mapping, "Mapping file (for --target positive)");
  at_cmd->add_option("--sample", at.sample, "Sample index in the dataset")->capture_default_str();
  at_cmd->add_option("--out", at.out, "Output prefix (.csv and .pgm are appended)")->required();

  std::string dm_mapping, dm_ckpt, dm_data, dm_out;
  std::uint64_t dm_seed = 0;
  auto* dm_cmd = app.add_subcommand("dump-mapping", "Print a class-to-prompt mapping");
  dm_cmd->add_option("--mapping", dm_mapping, "Existing mapping file to print");
  dm_cmd->add_option("--ckpt", dm_ckpt, "Checkpoint to compute a fresh mapping from");
  dm_cmd->add_option("--data", dm_data, "Dataset for the class means");
  dm_cmd->add_option("--seed", dm_seed, "k-means++ seed")->capture_default_str();
  dm_cmd->add_option("--out", dm_out, "Also write the mapping here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (gen_cmd->parsed()) return run_gen_data(gen);
  if (train_cmd->parsed()) return run_train(tr);
  if (eval_cmd->parsed()) return run_eval(eval_ckpt, eval_data);
  if (th_cmd->parsed()) return run_verify(th_dim, th_tokens, th_scales, th_draws, th_seed);
  if (gc_cmd->parsed()) return run_grad_check(gc_module);
  if (at_cmd->parsed()) return run_export(at);
  if (dm_cmd->parsed()) return run_dump_mapping(dm_mapping, dm_ckpt, dm_data, dm_seed, dm_out);
  return kExitUsage;
}
