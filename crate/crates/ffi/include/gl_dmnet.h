#ifndef GL_DMNET_H
#define GL_DMNET_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum GldmStatus {
  GLDM_STATUS_OK = 0,
  GLDM_STATUS_INVALID_ARGUMENT = 1,
  GLDM_STATUS_IO_ERROR = 2,
  GLDM_STATUS_DATA_ERROR = 3,
  GLDM_STATUS_CHECKPOINT_ERROR = 4,
  GLDM_STATUS_SHAPE_ERROR = 5,
  GLDM_STATUS_INTERNAL_ERROR = 6,
} GldmStatus;

/**
 * Opaque model handle.
 */
typedef struct GldmModel GldmModel;

/**
 * Aggregate evaluation scores for a prediction directory.
 */
typedef struct GldmMetrics {
  double mae;
  double s_measure;
  double e_measure_max;
  double e_measure_mean;
  double f_max;
  uint32_t n_images;
  uint32_t n_excluded_empty_gt;
} GldmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *gldm_version(void);

/**
 * Copies the last error message (NUL-terminated, truncated to `cap`).
 * Returns the full message length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes (or be null to query length).
 */
uintptr_t gldm_last_error(char *buf, uintptr_t cap);

/**
 * Loads a model from a checkpoint file into a fresh handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string, `out` a valid pointer.
 */
enum GldmStatus gldm_model_load(const char *path, struct GldmModel **out);

/**
 * Releases a handle obtained from `gldm_model_load`.
 *
 * # Safety
 * `model` must be a pointer returned by `gldm_model_load`, used once.
 */
void gldm_model_free(struct GldmModel *model);

/**
 * Network input side length (images are resized internally).
 *
 * # Safety
 * `model` must be a live handle.
 */
uint32_t gldm_model_input_size(const struct GldmModel *model);

/**
 * Predicts a saliency map for one RGB + depth pair.
 *
 * `rgb` is interleaved 8-bit RGB (h*w*3 bytes, row-major), `depth` an
 * 8-bit single-channel plane (h*w bytes). The result is written to
 * `out_map` as h*w bytes, round(255 * S) at the input resolution.
 *
 * # Safety
 * All buffers must match the documented sizes; `model` must be live.
 */
enum GldmStatus gldm_model_predict(const struct GldmModel *model,
                                   const uint8_t *rgb,
                                   const uint8_t *depth,
                                   uint32_t h,
                                   uint32_t w,
                                   uint8_t *out_map);

/**
 * Scores a directory of predicted maps against same-stem ground truth.
 *
 * # Safety
 * `pred_dir` / `gt_dir` must be valid NUL-terminated strings and `out` a
 * valid pointer.
 */
enum GldmStatus gldm_eval_dataset(const char *pred_dir,
                                  const char *gt_dir,
                                  struct GldmMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GL_DMNET_H */
