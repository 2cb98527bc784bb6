/* C interface to the prompt-tuning library. Every call returns a status;
 * on failure davpt_last_error() describes what went wrong (per thread). */
#ifndef DAVPT_DAVPT_H
#define DAVPT_DAVPT_H

#include <stddef.h>
#include <stdint.h>

#if defined(DAVPT_BUILDING_LIBRARY)
#define DAVPT_API __attribute__((visibility("default")))
#else
#define DAVPT_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum davpt_status {
  DAVPT_OK = 0,
  DAVPT_ERR_ARGUMENT = 1,  /* null handle or malformed argument */
  DAVPT_ERR_CONFIG = 2,
  DAVPT_ERR_DIMENSION = 3,
  DAVPT_ERR_CONTRACT = 4,
  DAVPT_ERR_FORMAT = 5,    /* malformed dataset, checkpoint or mapping file */
  DAVPT_ERR_IO = 6,
  DAVPT_ERR_NUMERIC = 7,
  DAVPT_ERR_DIVERGED = 8,  /* training stopped on a non-finite loss; last good state saved */
  DAVPT_ERR_INTERNAL = 9
} davpt_status;

typedef struct davpt_config davpt_config;
typedef struct davpt_dataset davpt_dataset;
typedef struct davpt_model davpt_model;

/* Receives one line of human-readable output (no trailing newline). */
typedef void (*davpt_line_sink)(const char* line, void* user);

DAVPT_API const char* davpt_last_error(void);
DAVPT_API const char* davpt_status_name(davpt_status status);

/* ---- training configuration ------------------------------------------- */

DAVPT_API davpt_status davpt_config_new(davpt_config** out);
DAVPT_API void davpt_config_free(davpt_config* cfg);
/* `key = value` file; keys as accepted by davpt_config_set. */
DAVPT_API davpt_status davpt_config_load(davpt_config* cfg, const char* path);
DAVPT_API davpt_status davpt_config_set(davpt_config* cfg, const char* key, const char* value);
/* Canonical text of every setting. Writes at most `capacity` bytes including
 * the terminator; `needed` receives the full size including the terminator. */
DAVPT_API davpt_status davpt_config_dump(const davpt_config* cfg, char* buffer, size_t capacity, size_t* needed);

/* ---- datasets ----------------------------------------------------------- */

typedef struct davpt_dataset_info {
  uint32_t num_samples;
  uint32_t height;
  uint32_t width;
  uint32_t channels;
  uint32_t num_classes;
} davpt_dataset_info;

/* `spec` holds `key = value` lines (num_classes, samples_per_class,
 * image_size, channels, separability, noise_std, seed); NULL = defaults.
 * `prototype_accuracy` (optional) receives the nearest-prototype accuracy. */
DAVPT_API davpt_status davpt_dataset_generate(const char* spec, davpt_dataset** out, double* prototype_accuracy);
DAVPT_API davpt_status davpt_dataset_load(const char* path, davpt_dataset** out);
DAVPT_API davpt_status davpt_dataset_save(const davpt_dataset* ds, const char* path);
DAVPT_API davpt_status davpt_dataset_info_get(const davpt_dataset* ds, davpt_dataset_info* out);
DAVPT_API void davpt_dataset_free(davpt_dataset* ds);

/* ---- models ------------------------------------------------------------- */

typedef struct davpt_model_info {
  size_t image_size, patch_size, channels, embed_dim, num_layers, num_heads, num_classes, prompts_per_layer;
  size_t total_parameters;
  size_t trainable_parameters;
  char policy[16];
} davpt_model_info;

DAVPT_API davpt_status davpt_model_load(const char* path, davpt_model** out);
DAVPT_API davpt_status davpt_model_save(const davpt_model* model, const char* path);
DAVPT_API davpt_status davpt_model_info_get(const davpt_model* model, davpt_model_info* out);
DAVPT_API void davpt_model_free(davpt_model* model);

/* ---- training ----------------------------------------------------------- */

typedef struct davpt_train_summary {
  size_t epochs;
  size_t steps;
  double test_accuracy;
  double final_val_accuracy;
  double first_margin_sat;
  double final_margin_sat;
  int diverged;
  char manifest_hash[41];
} davpt_train_summary;

/* Trains on `ds` (image size, channels and class count are taken from the
 * dataset) and writes report.csv, checkpoint_init.bin, checkpoint.bin,
 * mapping.txt, manifest.txt and summary.txt into `out_dir` (created if
 * missing). `progress` (optional) gets one line per epoch. On divergence the
 * last good checkpoint is still written and DAVPT_ERR_DIVERGED returned. */
DAVPT_API davpt_status davpt_train(const davpt_config* cfg, const davpt_dataset* ds, const char* out_dir,
                                   davpt_line_sink progress, void* user, davpt_train_summary* summary);

DAVPT_API davpt_status davpt_evaluate(const davpt_model* model, const davpt_dataset* ds, double* accuracy);

/* ---- analysis ----------------------------------------------------------- */

typedef struct davpt_theorem_summary {
  size_t draws;
  size_t orthogonal_ok;        /* draws whose error ratios all lie in [3.5, 4.5] */
  size_t orthogonal_unavailable;
  size_t residual_ok;          /* draws whose residual orders all lie in [1.8, 2.2] */
  double min_ratio, max_ratio; /* over orthogonal-regime error ratios */
  double min_order, max_order; /* over general-regime residual orders */
} davpt_theorem_summary;

/* Random (keys, prompt, direction) draws with seeds seed, seed+1, ...;
 * the full per-draw report goes to `sink`. */
DAVPT_API davpt_status davpt_verify_theorem(size_t dim, size_t tokens, const double* scales, size_t num_scales,
                                            size_t draws, uint64_t seed, davpt_line_sink sink, void* user,
                                            davpt_theorem_summary* out);

/* Runs gradient checks for `module` ("all" or a module name); one line per
 * check goes to `sink`. `failures` receives the number over tolerance. */
DAVPT_API davpt_status davpt_grad_check(const char* module, davpt_line_sink sink, void* user, size_t* failures,
                                        double* worst_rel_error);

typedef enum davpt_attention_target {
  DAVPT_TARGET_CLS = 0,
  DAVPT_TARGET_PROMPT = 1,   /* prompt row `prompt` */
  DAVPT_TARGET_POSITIVE = 2  /* prompt assigned to the sample's class (needs a mapping file) */
} davpt_attention_target;

typedef struct davpt_attention_request {
  size_t layer;
  int head; /* -1 = mean over heads */
  davpt_attention_target target;
  size_t prompt;
  size_t sample;
  const char* mapping_path; /* for DAVPT_TARGET_POSITIVE */
} davpt_attention_request;

/* Writes the selected attention row over the patch grid as CSV and PGM. */
DAVPT_API davpt_status davpt_export_attention(const davpt_model* model, const davpt_dataset* ds,
                                              const davpt_attention_request* req, const char* csv_path,
                                              const char* pgm_path);

/* Cold-start class-to-prompt mapping from the model's class means over `ds`,
 * written to `out_path` (optional) and echoed to `sink`. */
DAVPT_API davpt_status davpt_dump_mapping(const davpt_model* model, const davpt_dataset* ds, uint64_t seed,
                                          const char* out_path, davpt_line_sink sink, void* user);
/* Echoes an existing mapping file after validating it. */
DAVPT_API davpt_status davpt_print_mapping(const char* path, davpt_line_sink sink, void* user);

#ifdef __cplusplus
}
#endif

#endif
