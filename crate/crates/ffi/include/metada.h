#ifndef METADA_H
#define METADA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MdaStatus {
  MDA_STATUS_OK = 0,
  MDA_STATUS_NULL_POINTER = 1,
  MDA_STATUS_INVALID_UTF8 = 2,
  MDA_STATUS_CONTRACT = 3,
  MDA_STATUS_NUMERIC = 4,
  MDA_STATUS_CONFIG = 5,
  MDA_STATUS_IO = 6,
  MDA_STATUS_FORMAT = 7,
  MDA_STATUS_PANIC = 8,
} MdaStatus;

/**
 * Architecture plus parameters.
 */
typedef struct MdaParams MdaParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *mda_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mda_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` is null or a string obtained from this library and not yet freed.
 */
void mda_string_free(char *s);

/**
 * Initialises parameters for the architecture in `arch_json`.
 * `init_json` may be null for the default scheme.
 *
 * # Safety
 * String arguments are null or NUL-terminated; `out` is a valid pointer.
 */
enum MdaStatus mda_params_init(const char *arch_json,
                               const char *init_json,
                               uint64_t seed,
                               struct MdaParams **out);

/**
 * Reads a parameter file.
 *
 * # Safety
 * `path` is null or NUL-terminated; `out` is a valid pointer.
 */
enum MdaStatus mda_params_load(const char *path, struct MdaParams **out);

/**
 * Writes a parameter file.
 *
 * # Safety
 * `params` is null or a live handle; `path` is null or NUL-terminated.
 */
enum MdaStatus mda_params_save(const struct MdaParams *params, const char *path);

/**
 * Number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `params` is null or a live handle.
 */
size_t mda_params_len(const struct MdaParams *params);

/**
 * Architecture of `params` as a JSON string.
 *
 * # Safety
 * `params` is null or a live handle; `out` is a valid pointer.
 */
enum MdaStatus mda_params_arch_json(const struct MdaParams *params, char **out);

/**
 * Copies the flattened parameters into `buf`, which holds `len` doubles;
 * `len` must equal [`mda_params_len`].
 *
 * # Safety
 * `params` is null or a live handle; `buf` points to `len` writable doubles.
 */
enum MdaStatus mda_params_get_flat(const struct MdaParams *params, double *buf, size_t len);

/**
 * Overwrites the parameters from `len` doubles in flatten order.
 *
 * # Safety
 * `params` is null or a live handle; `buf` points to `len` readable doubles.
 */
enum MdaStatus mda_params_set_flat(struct MdaParams *params, const double *buf, size_t len);

/**
 * Logits of head `head` for `rows` inputs of width `cols` (row-major),
 * written to `logits_out`, which holds `rows * num_classes` doubles.
 *
 * # Safety
 * `params` is null or a live handle; `x` points to `rows * cols` doubles;
 * `logits_out` points to `logits_len` writable doubles.
 */
enum MdaStatus mda_params_predict(const struct MdaParams *params,
                                  const double *x,
                                  size_t rows,
                                  size_t cols,
                                  size_t head,
                                  double *logits_out,
                                  size_t logits_len);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `params` is null or a handle from this library not yet freed.
 */
void mda_params_free(struct MdaParams *params);

/**
 * Trains one run described by a run-config JSON object (the `config` field
 * of a report) and returns the report as JSON in `*report_out`. When
 * `final_params_out` is non-null it receives the trained parameters.
 *
 * # Safety
 * `run_config_json` is null or NUL-terminated; `report_out` is a valid
 * pointer; `final_params_out` is null or a valid pointer.
 */
enum MdaStatus mda_train(const char *run_config_json,
                         uint64_t seed,
                         char **report_out,
                         struct MdaParams **final_params_out);

/**
 * Runs the experiment grid in the config file at `config_path`, like
 * `metada run`. `n_failed_out`, if non-null, receives the failed-run count.
 * Failed runs do not make the call fail.
 *
 * # Safety
 * `config_path` is null or NUL-terminated; `n_failed_out` is null or valid.
 */
enum MdaStatus mda_run_experiment(const char *config_path,
                                  uint64_t seed_offset,
                                  size_t *n_failed_out);

/**
 * Recomputes `summary.csv` and writes `comparison.csv` in `dir`.
 *
 * # Safety
 * `dir` is null or NUL-terminated.
 */
enum MdaStatus mda_aggregate(const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METADA_H */
