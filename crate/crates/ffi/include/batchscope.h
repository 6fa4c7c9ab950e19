#ifndef BATCHSCOPE_H
#define BATCHSCOPE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BsModelRole {
  BS_MODEL_ROLE_RUN_TIME = 0,
  BS_MODEL_ROLE_MEMORY = 1,
} BsModelRole;

typedef enum BsSortKey {
  BS_SORT_KEY_RUN_TIME = 0,
  BS_SORT_KEY_MEMORY = 1,
} BsSortKey;

typedef enum BsStatus {
  BS_STATUS_OK = 0,
  BS_STATUS_NULL_POINTER = 1,
  BS_STATUS_INVALID_UTF8 = 2,
  BS_STATUS_INVALID_ARGUMENT = 3,
  BS_STATUS_IO = 4,
  BS_STATUS_ANALYSIS = 5,
  BS_STATUS_PREDICTION = 6,
  BS_STATUS_MUTATION = 7,
  BS_STATUS_PANIC = 255,
} BsStatus;

/**
 * A completed analysis of a replayed trace.
 */
typedef struct BsAnalysis BsAnalysis;

/**
 * A fitted or hand-built linear model.
 */
typedef struct BsLinearModel BsLinearModel;

/**
 * Location of the batch size literal inside a source buffer.
 */
typedef struct BsLiteralSpan {
  /**
   * 1-based.
   */
  uint32_t line_number;
  /**
   * Byte offsets into the source, end exclusive.
   */
  size_t byte_start;
  size_t byte_end;
  uint64_t current_value;
} BsLiteralSpan;

typedef struct BsSyntheticSpec {
  double a_ms_per_sample;
  double b_ms;
  uint64_t c_bytes_per_sample;
  uint64_t d_bytes;
  uint32_t op_count;
  uint32_t tree_depth;
  double noise_fraction;
  uint64_t seed;
  uint64_t capacity_bytes;
} BsSyntheticSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Wire protocol version spoken by the daemon.
 */
uint32_t bs_protocol_version(void);

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call into this library on the same thread.
 */
const char *bs_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void bs_string_free(char *s);

/**
 * Least squares fit of `values[i]` against `batches[i]`.
 *
 * # Safety
 * `batches` and `values` must point to `len` readable elements. `out` must
 * be writable.
 */
enum BsStatus bs_linear_fit(const uint32_t *batches,
                            const double *values,
                            size_t len,
                            enum BsModelRole model_role,
                            struct BsLinearModel **out);

/**
 * # Safety
 * `out` must be writable.
 */
enum BsStatus bs_linear_model_new(double slope,
                                  double intercept,
                                  enum BsModelRole model_role,
                                  struct BsLinearModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from this library, not yet freed.
 */
void bs_linear_model_free(struct BsLinearModel *model);

/**
 * # Safety
 * `model` must be a live handle; `slope` and `intercept` must be writable.
 */
enum BsStatus bs_linear_model_coefficients(const struct BsLinearModel *model,
                                           double *slope,
                                           double *intercept);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum BsStatus bs_linear_model_eval(const struct BsLinearModel *model, double x, double *out);

/**
 * Asymptotic throughput `1000 / a` in samples/s for a run time model.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum BsStatus bs_max_throughput(const struct BsLinearModel *model, double *out);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum BsStatus bs_batch_from_throughput(const struct BsLinearModel *model,
                                       double samples_per_s,
                                       uint32_t *out);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum BsStatus bs_batch_from_memory(const struct BsLinearModel *model, double bytes, uint32_t *out);

/**
 * Replays a trace file and analyzes it. `batch_size == 0` picks the smallest
 * batch in the trace; `capacity_bytes == 0` keeps the recorded capacity.
 *
 * # Safety
 * `trace_path` must be a NUL-terminated string; `out` must be writable.
 */
enum BsStatus bs_analysis_from_trace(const char *trace_path,
                                     uint32_t batch_size,
                                     uint64_t capacity_bytes,
                                     struct BsAnalysis **out);

/**
 * # Safety
 * `analysis` must be NULL or a handle from this library, not yet freed.
 */
void bs_analysis_free(struct BsAnalysis *analysis);

/**
 * Key metrics, fitted models and top-level breakdown as pretty JSON.
 *
 * # Safety
 * `analysis` must be a live handle; `out` must be writable.
 */
enum BsStatus bs_analysis_profile_json(const struct BsAnalysis *analysis, char **out);

/**
 * The subtree at `path` (child indices from the root, in `sort_key` order)
 * as a JSON array of nodes in pre-order.
 *
 * # Safety
 * `analysis` must be a live handle; `path` must point to `path_len`
 * readable elements; `out` must be writable.
 */
enum BsStatus bs_analysis_breakdown_json(const struct BsAnalysis *analysis,
                                         const uint32_t *path,
                                         size_t path_len,
                                         enum BsSortKey sort_key,
                                         char **out);

/**
 * Copies of the fitted run time and memory models. Fails with
 * `BS_STATUS_ANALYSIS` when fewer than three batches were measurable.
 *
 * # Safety
 * `analysis` must be a live handle; both outputs must be writable.
 */
enum BsStatus bs_analysis_models(const struct BsAnalysis *analysis,
                                 struct BsLinearModel **run_time,
                                 struct BsLinearModel **memory);

/**
 * Finds the integer default of `kwarg` in the definition of `provider`.
 * NULL names select `input_provider` / `batch_size`.
 *
 * # Safety
 * String arguments must be NULL (where allowed) or NUL-terminated; `out`
 * must be writable.
 */
enum BsStatus bs_locate_batch_literal(const char *source,
                                      const char *provider,
                                      const char *kwarg,
                                      struct BsLiteralSpan *out);

/**
 * Returns `source` with the literal at `span` replaced by `new_value`.
 *
 * # Safety
 * `source` must be NUL-terminated; `span` must be readable; `out` must be
 * writable.
 */
enum BsStatus bs_apply_batch_size(const char *source,
                                  const struct BsLiteralSpan *span,
                                  uint64_t new_value,
                                  char **out);

/**
 * Writes a deterministic synthetic trace (JSON lines) for the given batch
 * sizes.
 *
 * # Safety
 * `spec` must be readable; `batches` must point to `len` readable elements;
 * `out` must be writable.
 */
enum BsStatus bs_generate_synthetic_trace(const struct BsSyntheticSpec *spec,
                                          const uint32_t *batches,
                                          size_t len,
                                          char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BATCHSCOPE_H */
