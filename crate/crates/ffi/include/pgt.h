#ifndef PGT_H
#define PGT_H

#include <stddef.h>
#include <stdint.h>

// Status codes; the nonzero values match the command-line exit codes
// where both exist.
typedef enum PgtStatus {
  PGT_STATUS_OK = 0,
  PGT_STATUS_INVALID_ARGUMENT = 1,
  PGT_STATUS_CONFIG_ERROR = 2,
  PGT_STATUS_PREREQUISITE_MISSING = 3,
  PGT_STATUS_RUNTIME_FAILURE = 4,
  PGT_STATUS_PANIC = 5,
} PgtStatus;

// An open work directory with its resolved configuration.
typedef struct PgtPipeline PgtPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *pgt_last_error_message(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void pgt_string_free(char *s);

// Library version as a static string.
const char *pgt_version(void);

// Opens (and locks) a work directory.
//
// `config_path` may be null for built-in defaults. `workdir` may be null to
// keep the configured one. `overrides` holds `n_overrides` `key=value`
// strings.
//
// # Safety
// String arguments must be null or NUL-terminated; `overrides` must point
// to `n_overrides` valid strings; `out` must be writable.
enum PgtStatus pgt_pipeline_open(const char *config_path,
                                 const char *workdir,
                                 const char *const *overrides,
                                 size_t n_overrides,
                                 struct PgtPipeline **out);

// Closes a pipeline and releases its lock. Null is ignored.
//
// # Safety
// `p` must come from [`pgt_pipeline_open`] and not have been freed.
void pgt_pipeline_free(struct PgtPipeline *p);

// Runs one phase by command name (`ingest`, `ict`, `seed`, ...). The
// iteration is ignored by `ingest` and `ict`.
//
// # Safety
// `p` must be a live handle and `phase` a NUL-terminated string.
enum PgtStatus pgt_pipeline_run_phase(struct PgtPipeline *p, const char *phase, size_t iteration);

// Runs every phase in order.
//
// # Safety
// `p` must be a live handle.
enum PgtStatus pgt_pipeline_run_all(struct PgtPipeline *p);

// Answers `question` with the latest trained model (`iteration` 0) or the
// given iteration. Writes a JSON object with `answer`, `evidence` and
// `confidence` to `out`.
//
// # Safety
// `p` must be a live handle, `question` NUL-terminated, `out` writable.
enum PgtStatus pgt_pipeline_answer(const struct PgtPipeline *p,
                                   const char *question,
                                   size_t iteration,
                                   char **out);

// The run manifest as JSON.
//
// # Safety
// `p` must be a live handle and `out` writable.
enum PgtStatus pgt_pipeline_manifest_json(const struct PgtPipeline *p, char **out);

// Token-level F1 between two answers.
//
// # Safety
// Both strings must be NUL-terminated; `out` writable.
enum PgtStatus pgt_token_f1(const char *reference, const char *candidate, double *out);

// Ten-bin expected calibration error of `n` (confidence, correct) pairs.
//
// # Safety
// `confidence` and `correct` must each hold `n` elements; `out` writable.
enum PgtStatus pgt_expected_calibration_error(const double *confidence,
                                              const uint8_t *correct,
                                              size_t n,
                                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PGT_H */
