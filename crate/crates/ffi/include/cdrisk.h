#ifndef CDRISK_H
#define CDRISK_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CdrStatus {
  CDR_STATUS_OK = 0,
  CDR_STATUS_NULL_POINTER = 1,
  CDR_STATUS_INVALID_ARGUMENT = 2,
  CDR_STATUS_IO = 3,
  CDR_STATUS_MALFORMED_CODEBOOK = 4,
  CDR_STATUS_BAD_MAGIC = 5,
  CDR_STATUS_VERSION_MISMATCH = 6,
  CDR_STATUS_SCHEMA_HASH_MISMATCH = 7,
  /**
   * The answers failed cleaning; the message lists each field and reason.
   */
  CDR_STATUS_REJECTED = 8,
  CDR_STATUS_INTERNAL = 9,
} CdrStatus;

/**
 * One disease model.
 */
typedef struct CdrModel CdrModel;

/**
 * A validated codebook.
 */
typedef struct CdrSchema CdrSchema;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cdr_version(void);

/**
 * Message for the last failure on this thread; empty if none. Valid until the
 * next failing call on the same thread.
 */
const char *cdr_last_error_message(void);

/**
 * The built-in codebook.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum CdrStatus cdr_schema_builtin(struct CdrSchema **out);

/**
 * Load and validate a codebook JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum CdrStatus cdr_schema_load(const char *path, struct CdrSchema **out);

/**
 * # Safety
 * `schema` must come from `cdr_schema_*` and not be used afterwards. Null is ignored.
 */
void cdr_schema_free(struct CdrSchema *schema);

/**
 * Number of input features; 0 for a null handle.
 *
 * # Safety
 * `schema` must be null or a live handle.
 */
size_t cdr_schema_feature_count(const struct CdrSchema *schema);

/**
 * Feature id at `index` (declaration order), owned by the schema; null if out of range.
 *
 * # Safety
 * `schema` must be null or a live handle.
 */
const char *cdr_schema_feature_id(const struct CdrSchema *schema, size_t index);

/**
 * Load a checkpoint. When `schema` is non-null the checkpoint must have been
 * trained against it.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `schema` null or live, `out` writable.
 */
enum CdrStatus cdr_model_load(const char *path,
                              const struct CdrSchema *schema,
                              struct CdrModel **out);

/**
 * # Safety
 * `model` must come from `cdr_model_load` and not be used afterwards. Null is ignored.
 */
void cdr_model_free(struct CdrModel *model);

/**
 * Input width of the model; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t cdr_model_input_dim(const struct CdrModel *model);

/**
 * Disease id the model predicts, owned by the model; null for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
const char *cdr_model_disease(const struct CdrModel *model);

/**
 * Clean raw answers (schema order, NaN = empty answer) and score them.
 *
 * # Safety
 * Handles must be live; `values` must point to `len` doubles; `risk` writable.
 */
enum CdrStatus cdr_model_risk_raw(const struct CdrModel *model,
                                  const struct CdrSchema *schema,
                                  const double *values,
                                  size_t len,
                                  double *risk);

/**
 * Score already-cleaned values (schema order, clean units).
 *
 * # Safety
 * `model` must be live; `values` must point to `len` doubles; `risk` writable.
 */
enum CdrStatus cdr_model_risk_clean(const struct CdrModel *model,
                                    const double *values,
                                    size_t len,
                                    double *risk);

/**
 * Kernel SHAP attribution of cleaned values against the training mean.
 * Writes `len` values to `phi` plus the baseline and the risk at `values`.
 *
 * # Safety
 * `model` must be live; `values` and `phi` must each hold `len` doubles;
 * `base` and `fx` writable.
 */
enum CdrStatus cdr_model_explain(const struct CdrModel *model,
                                 const double *values,
                                 size_t len,
                                 size_t budget,
                                 uint64_t seed,
                                 double *phi,
                                 double *base,
                                 double *fx);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDRISK_H */
