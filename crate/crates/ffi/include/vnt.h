#ifndef VNT_H
#define VNT_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VntStatus {
  VNT_STATUS_OK = 0,
  VNT_STATUS_NULL_POINTER = 1,
  VNT_STATUS_INVALID_ARGUMENT = 2,
  VNT_STATUS_CONFIG = 3,
  VNT_STATUS_DATA = 4,
  VNT_STATUS_CHECKPOINT = 5,
  VNT_STATUS_NUMERIC = 6,
  VNT_STATUS_BUFFER_SIZE = 7,
  VNT_STATUS_PANIC = 8,
} VntStatus;

/**
 * Opaque model handle.
 */
typedef struct VntModel VntModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a freshly initialized model from a JSON model configuration.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VntStatus vnt_model_new(const char *config_json, uint64_t seed, struct VntModel **out);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VntStatus vnt_model_load(const char *dir, struct VntModel **out);

/**
 * Writes the model (without optimizer state) to a checkpoint directory.
 *
 * # Safety
 * `model` must come from this library; `dir` must be NUL-terminated.
 */
enum VntStatus vnt_model_save(const struct VntModel *model, const char *dir);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void vnt_model_free(struct VntModel *model);

/**
 * Number of trainable scalars.
 *
 * # Safety
 * Pointers must be valid.
 */
enum VntStatus vnt_model_num_params(const struct VntModel *model, size_t *out);

/**
 * Number of logits per cloud (classification) or per point (segmentation).
 *
 * # Safety
 * Pointers must be valid.
 */
enum VntStatus vnt_model_num_outputs(const struct VntModel *model, size_t *out);

/**
 * Class logits for one cloud; `logits_len` must equal the output count.
 *
 * # Safety
 * `points` must hold `n * 3` doubles and `logits` `logits_len` doubles.
 */
enum VntStatus vnt_classify(const struct VntModel *model,
                            const double *points,
                            size_t n,
                            double *logits,
                            size_t logits_len);

/**
 * Per-point part logits, row-major `n × outputs`.
 *
 * # Safety
 * `points` must hold `n * 3` doubles and `logits` `logits_len` doubles.
 */
enum VntStatus vnt_segment(const struct VntModel *model,
                           const double *points,
                           size_t n,
                           size_t category,
                           double *logits,
                           size_t logits_len);

/**
 * Row-stochastic `n × n` attention matrix of one block and head.
 * `category` is ignored for classification models.
 *
 * # Safety
 * `points` must hold `n * 3` doubles and `out` `out_len` doubles.
 */
enum VntStatus vnt_attention(const struct VntModel *model,
                             const double *points,
                             size_t n,
                             size_t category,
                             size_t block,
                             size_t head,
                             double *out,
                             size_t out_len);

/**
 * Parameter total implied by a JSON model configuration.
 *
 * # Safety
 * `config_json` must be NUL-terminated and `out` valid.
 */
enum VntStatus vnt_count_params(const char *config_json, size_t *out);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *vnt_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VNT_H */
