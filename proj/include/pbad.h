#ifndef PBAD_H
#define PBAD_H

/* C interface to the patch-based anomaly detection library. Every call
 * returns a pbad_status; on failure pbad_last_error() describes the cause
 * (thread-local, valid until the next failing call on the same thread). */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define PBAD_API __declspec(dllexport)
#else
#define PBAD_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum pbad_status {
  PBAD_OK = 0,
  PBAD_USAGE = 1,
  PBAD_DATA = 2,
  PBAD_NUMERIC = 3,
  PBAD_INTERNAL = 4
} pbad_status;

typedef struct pbad_config pbad_config;
typedef struct pbad_map pbad_map;

typedef void (*pbad_log_fn)(const char* message, void* user);

PBAD_API const char* pbad_last_error(void);
PBAD_API const char* pbad_version(void);

/* Run configuration. A new config holds the defaults with $PBAD_DATA_ROOT applied. */
PBAD_API pbad_status pbad_config_new(pbad_config** out);
PBAD_API void pbad_config_free(pbad_config* cfg);
/* Applies an INI file on top of the current values. */
PBAD_API pbad_status pbad_config_load_file(pbad_config* cfg, const char* path);
PBAD_API pbad_status pbad_config_set(pbad_config* cfg, const char* key, const char* value);
/* Copies the value (NUL-terminated) into buf; *needed receives the full length + 1. */
PBAD_API pbad_status pbad_config_get(const pbad_config* cfg, const char* key, char* buf, size_t len, size_t* needed);
PBAD_API pbad_status pbad_config_validate(const pbad_config* cfg);
/* Resolved configuration as INI text; same buffer convention as pbad_config_get. */
PBAD_API pbad_status pbad_config_to_ini(const pbad_config* cfg, char* buf, size_t len, size_t* needed);

PBAD_API size_t pbad_config_key_count(void);
PBAD_API const char* pbad_config_key_name(size_t i);
PBAD_API const char* pbad_config_key_section(size_t i);
PBAD_API const char* pbad_config_key_help(size_t i);

PBAD_API size_t pbad_subcommand_count(void);
PBAD_API const char* pbad_subcommand_name(size_t i);

/* Runs synth, train-ae, train-vqae, fit-svm, train-prior, score or eval.
 * log may be NULL. */
PBAD_API pbad_status pbad_run(const char* subcommand, const pbad_config* cfg, pbad_log_fn log, void* user);

/* Score maps. */
PBAD_API pbad_status pbad_map_load(const char* path, pbad_map** out);
PBAD_API void pbad_map_free(pbad_map* map);
PBAD_API size_t pbad_map_height(const pbad_map* map);
PBAD_API size_t pbad_map_width(const pbad_map* map);
PBAD_API const float* pbad_map_scores(const pbad_map* map);
PBAD_API const char* pbad_map_method(const pbad_map* map);
PBAD_API pbad_status pbad_map_write_preview(const pbad_map* map, const char* png_path);

/* Pooled pixel metrics over n scores and 0/1 labels. */
PBAD_API pbad_status pbad_roc(const float* scores, const uint8_t* labels, size_t n, double fpr_limit, double* auroc,
                              double* auroc_limited);
PBAD_API pbad_status pbad_pr(const float* scores, const uint8_t* labels, size_t n, double* auprc);

#ifdef __cplusplus
}
#endif

#endif
