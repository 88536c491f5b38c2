#ifndef MGNET3D_H
#define MGNET3D_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MgnStatus {
  MGN_STATUS_OK = 0,
  MGN_STATUS_NULL_POINTER = 1,
  MGN_STATUS_ARGUMENT = 2,
  MGN_STATUS_CONFIG = 3,
  MGN_STATUS_STATE = 4,
  MGN_STATUS_SHAPE = 5,
  MGN_STATUS_FORMAT = 6,
  MGN_STATUS_DATA = 7,
  MGN_STATUS_IO = 8,
  MGN_STATUS_DIVERGENCE = 9,
  MGN_STATUS_PANIC = 10,
} MgnStatus;

/**
 * Opaque model handle.
 */
typedef struct MgnModel MgnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *mgn_last_error(void);

/**
 * Builds a freshly initialised model with `num_grids` levels, `smoothing`
 * iterations per level and `channels` feature channels, for single-channel
 * input and two classes.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum MgnStatus mgn_model_new(uint32_t num_grids,
                             uint32_t smoothing,
                             uint32_t channels,
                             bool use_avg_pool,
                             uint64_t seed,
                             struct MgnModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer to
 * writable storage for one handle.
 */
enum MgnStatus mgn_model_load(const char *path, struct MgnModel **out);

/**
 * Writes a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum MgnStatus mgn_model_save(const struct MgnModel *model, const char *path);

/**
 * Number of learnable scalars, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mgn_model_param_count(const struct MgnModel *model);

/**
 * Number of logits produced by `mgn_model_forward`, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mgn_model_num_classes(const struct MgnModel *model);

/**
 * Runs the network on one `[channels, depth, height, width]` volume of
 * row-major floats and writes the class logits.
 *
 * # Safety
 * `volume` must hold `channels * depth * height * width` floats and
 * `logits` must have room for `logits_len` floats.
 */
enum MgnStatus mgn_model_forward(const struct MgnModel *model,
                                 const float *volume,
                                 size_t channels,
                                 size_t depth,
                                 size_t height,
                                 size_t width,
                                 float *logits,
                                 size_t logits_len);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void mgn_model_free(struct MgnModel *model);

/**
 * Area under the ROC curve of `n` scores with 0/1 labels.
 *
 * # Safety
 * `labels` and `scores` must each hold `n` elements; `out` must be writable.
 */
enum MgnStatus mgn_roc_auc(const uint8_t *labels, const double *scores, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MGNET3D_H */
