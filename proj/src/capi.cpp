#include "davpt/davpt.h"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>

#include "davpt/attention_export.hpp"
#include "davpt/checkpoint.hpp"
#include "davpt/config.hpp"
#include "davpt/data.hpp"
#include "davpt/error.hpp"
#include "davpt/grad_suite.hpp"
#include "davpt/manifest.hpp"
#include "davpt/mapping.hpp"
#include "davpt/theorem.hpp"
#include "davpt/trainer.hpp"

struct davpt_config {
  davpt::TrainConfig cfg;
};
struct davpt_dataset {
  davpt::Dataset data;
};
struct davpt_model {
  davpt::ModelParams params;
};

namespace {

thread_local std::string g_last_error;

davpt_status fail(davpt_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

davpt_status from_kind(davpt::ErrorKind k) {
  switch (k) {
    case davpt::ErrorKind::Dimension:
      return DAVPT_ERR_DIMENSION;
    case davpt::ErrorKind::Contract:
      return DAVPT_ERR_CONTRACT;
    case davpt::ErrorKind::Config:
      return DAVPT_ERR_CONFIG;
    case davpt::ErrorKind::Format:
      return DAVPT_ERR_FORMAT;
    case davpt::ErrorKind::Io:
      return DAVPT_ERR_IO;
    case davpt::ErrorKind::Numeric:
      return DAVPT_ERR_NUMERIC;
    case davpt::ErrorKind::Diverged:
      return DAVPT_ERR_DIVERGED;
  }
  return DAVPT_ERR_INTERNAL;
}

template <typename Fn>
davpt_status guarded(Fn&& fn) {
  try {
    g_last_error.clear();
    return fn();
  } catch (const davpt::Error& e) {
    return fail(from_kind(e.kind()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(DAVPT_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(DAVPT_ERR_INTERNAL, e.what());
  }
}

void emit(davpt_line_sink sink, void* user, const std::string& text) {
  if (sink == nullptr) return;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) sink(line.c_str(), user);
}

std::span<const std::uint8_t> as_bytes(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

void write_text(const std::string& path, const std::string& text) { davpt::write_file(path, as_bytes(text)); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

extern "C" {

const char* davpt_last_error(void) { return g_last_error.c_str(); }

const char* davpt_status_name(davpt_status s) {
  switch (s) {
    case DAVPT_OK:
      return "ok";
    case DAVPT_ERR_ARGUMENT:
      return "argument error";
    case DAVPT_ERR_CONFIG:
      return "configuration error";
    case DAVPT_ERR_DIMENSION:
      return "dimension error";
    case DAVPT_ERR_CONTRACT:
      return "contract violation";
    case DAVPT_ERR_FORMAT:
      return "format error";
    case DAVPT_ERR_IO:
      return "i/o error";
    case DAVPT_ERR_NUMERIC:
      return "numeric error";
    case DAVPT_ERR_DIVERGED:
      return "training diverged";
    case DAVPT_ERR_INTERNAL:
      return "internal error";
  }
  return "unknown status";
}

davpt_status davpt_config_new(davpt_config** out) {
  if (out == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null output pointer");
  return guarded([&] {
    *out = new davpt_config();
    return DAVPT_OK;
  });
}

void davpt_config_free(davpt_config* cfg) { delete cfg; }

davpt_status davpt_config_load(davpt_config* cfg, const char* path) {
  if (cfg == nullptr || path == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null argument");
  return guarded([&] {
    davpt::TrainConfig next = cfg->cfg;
    davpt::apply_config(next, davpt::load_config(path));
    cfg->cfg = next;
    return DAVPT_OK;
  });
}

davpt_status davpt_config_set(davpt_config* cfg, const char* key, const char* value) {
  if (cfg == nullptr || key == nullptr || value == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null argument");
  return guarded([&] {
    davpt::TrainConfig next = cfg->cfg;
    davpt::set_train_key(next, key, value);
    cfg->cfg = next;
    return DAVPT_OK;
  });
}

davpt_status davpt_config_dump(const davpt_config* cfg, char* buffer, size_t capacity, size_t* needed) {
  if (cfg == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null config");
  return guarded([&] {
    const std::string text = davpt::format_train_config(cfg->cfg);
    if (needed != nullptr) *needed = text.size() + 1;
    if (buffer != nullptr && capacity > 0) {
      const std::size_t n = std::min(capacity - 1, text.size());
      std::memcpy(buffer, text.data(), n);
      buffer[n] = '\0';
    }
    return DAVPT_OK;
  });
}

davpt_status davpt_dataset_generate(const char* spec, davpt_dataset** out, double* prototype_accuracy) {
  if (out == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null output pointer");
  return guarded([&] {
    davpt::SynthSpec s;
    if (spec != nullptr)
      for (const auto& [k, v] : davpt::parse_config(spec).entries) davpt::set_synth_key(s, k, v);
    auto ds = std::make_unique<davpt_dataset>();
    ds->data = davpt::generate(s);
    if (prototype_accuracy != nullptr) *prototype_accuracy = davpt::nearest_prototype_accuracy(s, ds->data);
    *out = ds.release();
    return DAVPT_OK;
  });
}

davpt_status davpt_dataset_load(const char* path, davpt_dataset** out) {
  if (path == nullptr || out == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null argument");
  return guarded([&] {
    auto ds = std::make_unique<davpt_dataset>();
    ds->data = davpt::load_dataset(path);
    *out = ds.release();
    return DAVPT_OK;
  });
}

davpt_status davpt_dataset_save(const davpt_dataset* ds, const char* path) {
  if (ds == nullptr || path == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null argument");
  return guarded([&] {
    davpt::save_dataset(ds->data, path);
    return DAVPT_OK;
  });
}

davpt_status davpt_dataset_info_get(const davpt_dataset* ds, davpt_dataset_info* out) {
  if (ds == nullptr || out == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null argument");
  out->num_samples = static_cast<uint32_t>(ds->data.size());
  out->height = ds->data.height;
  out->width = ds->data.width;
  out->channels = ds->data.channels;
  out->num_classes = ds->data.num_classes;
  return DAVPT_OK;
}

void davpt_dataset_free(davpt_dataset* ds) { delete ds; }

davpt_status davpt_model_load(const char* path, davpt_model** out) {
  if (path == nullptr || out == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null argument");
  return guarded([&] {
    auto m = std::make_unique<davpt_model>();
    m->params = davpt::load_checkpoint(path);
    *out = m.release();
    return DAVPT_OK;
  });
}

davpt_status davpt_model_save(const davpt_model* model, const char* path) {
  if (model == nullptr || path == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null argument");
  return guarded([&] {
    davpt::save_checkpoint(model->params, path);
    return DAVPT_OK;
  });
}

davpt_status davpt_model_info_get(const davpt_model* model, davpt_model_info* out) {
  if (model == nullptr || out == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null argument");
  const davpt::ViTConfig& c = model->params.config;
  out->image_size = c.image_size;
  out->patch_size = c.patch_size;
  out->channels = c.channels;
  out->embed_dim = c.embed_dim;
  out->num_layers = c.num_layers;
  out->num_heads = c.num_heads;
  out->num_classes = c.num_classes;
  out->prompts_per_layer = c.prompts_per_layer;
  out->total_parameters = 0;
  for (const davpt::Tensor* t : model->params.parameters()) out->total_parameters += t->numel();
  out->trainable_parameters = davpt::trainable_count(model->params);
  std::snprintf(out->policy, sizeof out->policy, "%s", davpt::to_string(model->params.policy).c_str());
  return DAVPT_OK;
}

void davpt_model_free(davpt_model* model) { delete model; }

davpt_status davpt_train(const davpt_config* cfg, const davpt_dataset* ds, const char* out_dir,
                         davpt_line_sink progress, void* user, davpt_train_summary* summary) {
  if (cfg == nullptr || ds == nullptr || out_dir == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null argument");
  return guarded([&] {
    davpt::TrainConfig tc = cfg->cfg;
    const davpt::Dataset& data = ds->data;
    if (data.height != data.width) throw davpt::ConfigError("training needs square images");
    tc.model.image_size = data.height;
    tc.model.channels = data.channels;
    tc.model.num_classes = data.num_classes;
    tc.validate();

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw davpt::IoError("cannot create output directory '" + std::string(out_dir) + "': " + ec.message());
    const std::filesystem::path dir(out_dir);
    const auto path = [&](const char* name) { return (dir / name).string(); };

    davpt::RunManifest manifest;
    manifest.command = "train";
    manifest.seed = tc.seed;
    manifest.dataset_hash = davpt::git_blob_hash(davpt::encode_dataset(data));
    manifest.config_text = davpt::format_train_config(tc);
    for (const char* name : {"report.csv", "checkpoint_init.bin", "checkpoint.bin", "mapping.txt", "summary.txt"})
      manifest.outputs.emplace_back(name, path(name));
    const std::string hash = manifest.hash();
    write_text(path("manifest.txt"), manifest.format());

    davpt::ModelParams model = davpt::build_model(tc, data);
    davpt::save_checkpoint(model, path("checkpoint_init.bin"));
    davpt::TrainHooks hooks;
    if (progress != nullptr) {
      hooks.on_epoch = [&](const davpt::EpochRecord& e) {
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "epoch %zu  step %zu  lr %.3e  ce %.5f  l_xp %.5f  l_pc %.5f  total %.5f  margin_sat %.4f  "
                      "val_acc %.4f",
                      e.epoch, e.step, e.lr, e.ce, e.l_xp, e.l_pc, e.total, e.margin_sat, e.acc);
        progress(buf, user);
      };
    }
    const davpt::TrainReport report = davpt::fit(model, data, tc, hooks);
    write_text(path("report.csv"), davpt::format_report(report, hash));
    davpt::save_checkpoint(model, path("checkpoint.bin"));
    write_text(path("mapping.txt"), "# manifest " + hash + "\n" + davpt::format_mapping(report.mapping));

    const double nan = std::numeric_limits<double>::quiet_NaN();
    davpt_train_summary s{};
    s.epochs = report.epochs.size();
    s.steps = report.steps.empty() ? 0 : report.steps.back().step;
    s.test_accuracy = report.test_accuracy;
    s.final_val_accuracy = report.epochs.empty() ? nan : report.epochs.back().acc;
    s.first_margin_sat = report.epochs.empty() ? nan : report.epochs.front().margin_sat;
    s.final_margin_sat = report.epochs.empty() ? nan : report.epochs.back().margin_sat;
    s.diverged = report.diverged ? 1 : 0;
    std::snprintf(s.manifest_hash, sizeof s.manifest_hash, "%s", hash.c_str());

    std::ostringstream sum;
    sum << "manifest_hash: " << hash << '\n'
        << "policy: " << davpt::to_string(tc.policy) << '\n'
        << "epochs: " << s.epochs << '\n'
        << "steps: " << s.steps << '\n'
        << "trainable_parameters: " << davpt::trainable_count(model) << '\n'
        << "test_accuracy: " << fmt(s.test_accuracy) << '\n'
        << "final_val_accuracy: " << fmt(s.final_val_accuracy) << '\n'
        << "first_margin_sat: " << fmt(s.first_margin_sat) << '\n'
        << "final_margin_sat: " << fmt(s.final_margin_sat) << '\n'
        << "diverged: " << (report.diverged ? "true" : "false") << '\n';
    if (report.diverged) sum << "divergence: " << report.divergence << '\n';
    write_text(path("summary.txt"), sum.str());
    if (summary != nullptr) *summary = s;
    if (report.diverged) return fail(DAVPT_ERR_DIVERGED, report.divergence);
    return DAVPT_OK;
  });
}

davpt_status davpt_evaluate(const davpt_model* model, const davpt_dataset* ds, double* accuracy) {
  if (model == nullptr || ds == nullptr || accuracy == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null argument");
  return guarded([&] {
    const davpt::ViTConfig& c = model->params.config;
    if (ds->data.num_classes != c.num_classes || ds->data.height != c.image_size || ds->data.width != c.image_size ||
        ds->data.channels != c.channels) {
      throw davpt::ConfigError("dataset geometry or class count does not match the checkpoint");
    }
    *accuracy = davpt::evaluate(model->params, ds->data);
    return DAVPT_OK;
  });
}

davpt_status davpt_verify_theorem(size_t dim, size_t tokens, const double* scales, size_t num_scales, size_t draws,
                                  uint64_t seed, davpt_line_sink sink, void* user, davpt_theorem_summary* out) {
  if (scales == nullptr || num_scales == 0) return fail(DAVPT_ERR_ARGUMENT, "no scales given");
  if (draws == 0) return fail(DAVPT_ERR_ARGUMENT, "at least one draw is required");
  return guarded([&] {
    davpt_theorem_summary s{};
    s.min_ratio = s.min_order = std::numeric_limits<double>::infinity();
    s.max_ratio = s.max_order = -std::numeric_limits<double>::infinity();
    const std::span<const double> sc(scales, num_scales);
    for (std::size_t k = 0; k < draws; ++k) {
      const davpt::TheoremDraw d = davpt::random_theorem_draw(tokens, dim, seed + k);
      const std::size_t target = davpt::least_attended(d.keys, d.prompt);
      const davpt::AttentionResponseReport r = davpt::verify_attention_response(d.keys, d.prompt, d.direction, sc, target);
      ++s.draws;
      if (!r.orthogonal.available) ++s.orthogonal_unavailable;
      if (davpt::orthogonal_ratios_ok(r)) ++s.orthogonal_ok;
      if (davpt::residual_orders_ok(r)) ++s.residual_ok;
      for (double x : r.orthogonal.error_ratios) {
        s.min_ratio = std::min(s.min_ratio, x);
        s.max_ratio = std::max(s.max_ratio, x);
      }
      for (double x : r.general.residual_orders) {
        s.min_order = std::min(s.min_order, x);
        s.max_order = std::max(s.max_order, x);
      }
      emit(sink, user, "draw " + std::to_string(k) + " (seed " + std::to_string(seed + k) + ")");
      emit(sink, user, davpt::format_theorem_report(r));
    }
    if (out != nullptr) *out = s;
    return DAVPT_OK;
  });
}

davpt_status davpt_grad_check(const char* module, davpt_line_sink sink, void* user, size_t* failures,
                              double* worst_rel_error) {
  if (module == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null module name");
  return guarded([&] {
    const auto entries = davpt::run_grad_checks(module);
    std::size_t bad = 0;
    double worst = 0.0;
    for (const davpt::GradCheckEntry& e : entries) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "%-4s %-10s %-34s max_rel_error %.3e over %zu entries", e.passed ? "ok" : "FAIL",
                    e.module.c_str(), e.name.c_str(), e.result.max_rel_error, e.result.entries);
      emit(sink, user, buf);
      bad += e.passed ? 0 : 1;
      worst = std::max(worst, e.result.max_rel_error);
    }
    if (failures != nullptr) *failures = bad;
    if (worst_rel_error != nullptr) *worst_rel_error = worst;
    return DAVPT_OK;
  });
}

davpt_status davpt_export_attention(const davpt_model* model, const davpt_dataset* ds,
                                    const davpt_attention_request* req, const char* csv_path, const char* pgm_path) {
  if (model == nullptr || ds == nullptr || req == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null argument");
  return guarded([&] {
    const davpt::ModelParams& params = model->params;
    if (req->sample >= ds->data.size()) throw davpt::ConfigError("sample index out of range for the dataset");
    if (req->head < -1) throw davpt::ConfigError("head must be -1 (mean) or a head index");
    davpt::AttentionSelection sel;
    sel.layer = req->layer;
    if (req->head >= 0) sel.head = static_cast<std::size_t>(req->head);
    sel.sample = 0;
    std::string target_desc = "cls";
    if (req->target == DAVPT_TARGET_PROMPT || req->target == DAVPT_TARGET_POSITIVE) {
      sel.target = davpt::AttentionSelection::Target::Prompt;
      sel.prompt = req->prompt;
      if (req->target == DAVPT_TARGET_POSITIVE) {
        if (req->mapping_path == nullptr) throw davpt::ConfigError("the positive target needs a mapping file");
        const davpt::PromptAssignment map = davpt::load_mapping(req->mapping_path);
        const std::size_t cls = ds->data.labels[req->sample];
        if (cls >= map.class_to_prompt.size()) throw davpt::ConfigError("mapping does not cover the sample's class");
        sel.prompt = map.class_to_prompt[cls];
        target_desc = "positive:" + std::to_string(sel.prompt);
      } else {
        target_desc = "prompt:" + std::to_string(sel.prompt);
      }
    }
    davpt::Tape tape;
    davpt::BoundModel bound = davpt::bind_frozen(tape, params);
    const std::size_t idx[] = {req->sample};
    const auto imgs = ds->data.images(idx);
    const std::size_t layers[] = {req->layer};
    const std::span<const std::size_t> traced =
        req->layer < params.config.num_layers ? std::span<const std::size_t>(layers) : std::span<const std::size_t>();
    const davpt::ForwardResult fr = davpt::forward_model(tape, bound, imgs, traced);
    const davpt::AttentionGrid grid = davpt::extract_attention(fr, sel);

    davpt::RunManifest manifest;
    manifest.command = "export-attn";
    manifest.dataset_hash = davpt::git_blob_hash(davpt::encode_dataset(ds->data));
    manifest.config_text = "checkpoint_hash = " + davpt::git_blob_hash(davpt::encode_checkpoint(params)) + "\n" +
                           "layer = " + std::to_string(req->layer) + "\n" +
                           "head = " + (req->head < 0 ? std::string("mean") : std::to_string(req->head)) + "\n" +
                           "target = " + target_desc + "\n" + "sample = " + std::to_string(req->sample) + "\n";
    const std::string hash = manifest.hash();
    if (csv_path != nullptr) write_text(csv_path, davpt::attention_csv(grid, hash));
    if (pgm_path != nullptr) davpt::write_file(pgm_path, davpt::attention_pgm(grid, hash));
    return DAVPT_OK;
  });
}

davpt_status davpt_dump_mapping(const davpt_model* model, const davpt_dataset* ds, uint64_t seed, const char* out_path,
                                davpt_line_sink sink, void* user) {
  if (model == nullptr || ds == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null argument");
  return guarded([&] {
    const davpt::ViTConfig& c = model->params.config;
    if (ds->data.num_classes != c.num_classes) throw davpt::ConfigError("dataset class count does not match the model");
    if (c.prompts_per_layer == 0) throw davpt::ConfigError("the model has no prompts to map");
    std::vector<std::size_t> all(ds->data.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const davpt::Tensor means = davpt::collect_class_representations(model->params, ds->data, all).means();
    const davpt::PromptAssignment map =
        davpt::build_mapping(means, davpt::pad_prompts(c.num_classes, c.prompts_per_layer), seed);
    const std::string text = davpt::format_mapping(map);
    if (out_path != nullptr) write_text(out_path, text);
    emit(sink, user, text);
    return DAVPT_OK;
  });
}

davpt_status davpt_print_mapping(const char* path, davpt_line_sink sink, void* user) {
  if (path == nullptr) return fail(DAVPT_ERR_ARGUMENT, "null path");
  return guarded([&] {
    emit(sink, user, davpt::format_mapping(davpt::load_mapping(path)));
    return DAVPT_OK;
  });
}

}  // extern "C"
