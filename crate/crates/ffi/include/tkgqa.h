#ifndef TKGQA_H
#define TKGQA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum TkgqaStatus {
  TKGQA_STATUS_OK = 0,
  TKGQA_STATUS_NULL_POINTER = 1,
  TKGQA_STATUS_INVALID_UTF8 = 2,
  TKGQA_STATUS_CONFIG = 3,
  TKGQA_STATUS_MISSING_ARTIFACT = 4,
  TKGQA_STATUS_DATA = 5,
  TKGQA_STATUS_NUMERIC = 6,
  TKGQA_STATUS_IO = 7,
  TKGQA_STATUS_BUFFER_TOO_SMALL = 8,
  TKGQA_STATUS_PANIC = 9,
} TkgqaStatus;

/**
 * Forecaster representations plus whichever QA models were found.
 */
typedef struct TkgqaModel TkgqaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *tkgqa_version(void);

/**
 * Length in bytes of the last error message on this thread, excluding the
 * terminating NUL. Zero when the last call succeeded.
 */
size_t tkgqa_last_error_length(void);

/**
 * Copy the last error message into `buf` (NUL-terminated).
 *
 * # Safety
 * `buf` must point to `len` writable bytes.
 */
enum TkgqaStatus tkgqa_last_error_message(char *buf, size_t len);

/**
 * Load `reps.bin` and every `qa-{epq,yuq,frq}.bin` from a checkpoint
 * directory. At least one QA model must be present.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TkgqaStatus tkgqa_model_open(const char *dir, struct TkgqaModel **out);

/**
 * Release a model handle. Null is ignored.
 *
 * # Safety
 * `m` must come from [`tkgqa_model_open`] and not be used afterwards.
 */
void tkgqa_model_free(struct TkgqaModel *m);

/**
 * # Safety
 * `m` must be a live handle and `out` a valid pointer.
 */
enum TkgqaStatus tkgqa_model_num_entities(const struct TkgqaModel *m, size_t *out);

/**
 * Answer one question given as a JSON object (the format of the question
 * files). On success `*out` receives the prediction as JSON, to be released
 * with [`tkgqa_string_free`].
 *
 * # Safety
 * `m` must be a live handle, `question_json` a NUL-terminated string and
 * `out` a valid pointer.
 */
enum TkgqaStatus tkgqa_model_predict_json(const struct TkgqaModel *m,
                                          const char *question_json,
                                          char **out);

/**
 * Forecast object scores for `(s, r, ?, t)` into `scores[0..len]`, where
 * `len` must equal the entity count.
 *
 * # Safety
 * `m` must be a live handle and `scores` must point to `len` writable doubles.
 */
enum TkgqaStatus tkgqa_model_forecast(const struct TkgqaModel *m,
                                      uint32_t s,
                                      uint32_t r,
                                      uint32_t t,
                                      double *scores,
                                      size_t len);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void tkgqa_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TKGQA_H */
