#ifndef DMEA_H
#define DMEA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum DmeaStatus {
  DMEA_STATUS_OK = 0,
  DMEA_STATUS_NULL_ARGUMENT = 1,
  DMEA_STATUS_INVALID_ARGUMENT = 2,
  DMEA_STATUS_INVALID_STATE = 3,
  DMEA_STATUS_CONFIG = 4,
  DMEA_STATUS_IO = 5,
  DMEA_STATUS_TRAINING_FAILURE = 6,
  DMEA_STATUS_NUMERICAL_FAILURE = 7,
  DMEA_STATUS_PANIC = 8,
} DmeaStatus;

// A frozen pretrained backbone.
typedef struct DmeaBackbone DmeaBackbone;

// A finished lifelong run.
typedef struct DmeaRun DmeaRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *dmea_version(void);

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next call on the same thread.
const char *dmea_last_error(void);

// Releases a string returned by this library.
void dmea_string_free(char *s);

// The default configuration as JSON.
enum DmeaStatus dmea_default_config(char **out_json);

// Loads the cached backbone for `config_json` (NULL for defaults), pretraining it if needed.
enum DmeaStatus dmea_backbone_load(const char *config_json, struct DmeaBackbone **out);

void dmea_backbone_free(struct DmeaBackbone *backbone);

// Runs `method` over task order `order` of `suite` ("similar", "random" or "long").
enum DmeaStatus dmea_run_lifelong(const struct DmeaBackbone *backbone,
                                  const char *suite,
                                  uint32_t order,
                                  const char *method,
                                  uint64_t seed,
                                  const char *config_json,
                                  struct DmeaRun **out);

void dmea_run_free(struct DmeaRun *run);

// Number of tasks learned in the run.
enum DmeaStatus dmea_run_num_tasks(const struct DmeaRun *run, size_t *out);

// Exact-match score of task `j` after learning task `i` (0-based, `j <= i`).
enum DmeaStatus dmea_run_score(const struct DmeaRun *run, size_t i, size_t j, double *out);

// Mean exact match over all tasks after the last step.
enum DmeaStatus dmea_run_final_average(const struct DmeaRun *run, double *out);

// The run summary as JSON; release with [`dmea_string_free`].
enum DmeaStatus dmea_run_summary_json(const struct DmeaRun *run, char **out_json);

// Writes the run's files (summary, results, traces, plots) under `dir`.
enum DmeaStatus dmea_run_write(const struct DmeaRun *run, const char *dir);

// Forward transfer at 1-based step `t` from `len` diagonal and standalone scores.
enum DmeaStatus dmea_fkt(const double *diagonal,
                         const double *standalone,
                         size_t len,
                         size_t t,
                         double *out);

// Replay loss scale after `t` completed epochs for the given gradient norms.
double dmea_gradient_scale(double g_new_norm, double g_old_norm, uint32_t t);

// Runs the built-in invariant checks; `out_failed` receives the failure count.
enum DmeaStatus dmea_selftest(uint32_t *out_failed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DMEA_H */
