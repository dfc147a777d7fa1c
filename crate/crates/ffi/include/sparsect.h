#ifndef SPARSECT_H
#define SPARSECT_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SctStatus {
  SCT_STATUS_OK = 0,
  SCT_STATUS_NULL_ARGUMENT = 1,
  SCT_STATUS_CONFIG = 2,
  SCT_STATUS_DATA = 3,
  SCT_STATUS_FORMAT = 4,
  SCT_STATUS_NUMERIC = 5,
  SCT_STATUS_USAGE = 6,
  SCT_STATUS_IO = 7,
  SCT_STATUS_PANIC = 8,
} SctStatus;

/**
 * Opaque trained model (checkpoint).
 */
typedef struct SctModel SctModel;

/**
 * Opaque set of posed projections.
 */
typedef struct SctProjections SctProjections;

/**
 * Opaque voxel volume.
 */
typedef struct SctVolume SctVolume;

/**
 * Source/detector setup (mm and pixels).
 */
typedef struct SctGeometry {
  double sad;
  double sid;
  size_t detector_rows;
  size_t detector_cols;
  double pixel_pitch;
  double volume_half_extent;
} SctGeometry;

typedef struct SctMetrics {
  double psnr_db;
  double ssim;
  double rmse;
  /**
   * NaN when the truth carries no normalization record.
   */
  double rmse_hu;
} SctMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message (NUL-terminated, truncated to `len`) into
 * `buf`; returns the full message length in bytes. Pass a null `buf` to
 * query the length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t sct_last_error_message(char *buf, size_t len);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SctStatus sct_volume_read(const char *path, struct SctVolume **out);

/**
 * Writes 64-bit voxels.
 *
 * # Safety
 * `volume` must come from this library; `path` must be NUL-terminated.
 */
enum SctStatus sct_volume_write(const struct SctVolume *volume, const char *path);

/**
 * Writes `(depth, height, width)` into `dims`.
 *
 * # Safety
 * `volume` must come from this library; `dims` must hold 3 elements.
 */
enum SctStatus sct_volume_dims(const struct SctVolume *volume, size_t *dims);

/**
 * Copies the voxels (z, y, x order) into `data`, which must hold exactly
 * the voxel count.
 *
 * # Safety
 * `data` must point to `len` writable doubles.
 */
enum SctStatus sct_volume_copy_data(const struct SctVolume *volume, double *data, size_t len);

/**
 * # Safety
 * `volume` must be null or come from this library, and not be used afterwards.
 */
void sct_volume_free(struct SctVolume *volume);

/**
 * Random analytic phantom voxelized on an `n^3` grid and normalized to `[0, 1]`.
 *
 * # Safety
 * `out` must be writable.
 */
enum SctStatus sct_phantom_make(uint64_t seed,
                                size_t n,
                                double half_extent,
                                struct SctVolume **out);

/**
 * Ray-marched DRRs of `volume` at a view preset (1, 2, 5, 10 or 72).
 *
 * # Safety
 * `volume` must come from this library; `out` must be writable.
 */
enum SctStatus sct_drr_generate(const struct SctVolume *volume,
                                struct SctGeometry geometry,
                                uint32_t preset,
                                struct SctProjections **out);

/**
 * # Safety
 * `dir` must be NUL-terminated; `out` must be writable.
 */
enum SctStatus sct_projections_read(const char *dir, struct SctProjections **out);

/**
 * # Safety
 * `set` must come from this library; `dir` must be NUL-terminated.
 */
enum SctStatus sct_projections_write(const struct SctProjections *set, const char *dir);

/**
 * Number of views, or 0 for a null handle.
 *
 * # Safety
 * `set` must be null or come from this library.
 */
size_t sct_projections_len(const struct SctProjections *set);

/**
 * # Safety
 * `set` must be null or come from this library, and not be used afterwards.
 */
void sct_projections_free(struct SctProjections *set);

/**
 * Loads a training checkpoint directory.
 *
 * # Safety
 * `dir` must be NUL-terminated; `out` must be writable.
 */
enum SctStatus sct_model_load(const char *dir, struct SctModel **out);

/**
 * # Safety
 * `model` must be null or come from this library, and not be used afterwards.
 */
void sct_model_free(struct SctModel *model);

/**
 * Fits latents to `references` with default inference settings (at most
 * `max_iterations` steps) and renders an `n^3` volume.
 *
 * # Safety
 * Handles must come from this library; `out` must be writable.
 */
enum SctStatus sct_reconstruct(const struct SctModel *model,
                               const struct SctProjections *references,
                               size_t max_iterations,
                               size_t n,
                               struct SctVolume **out);

/**
 * PSNR, global SSIM and RMSE of `pred` against `truth`.
 *
 * # Safety
 * Handles must come from this library; `out` must be writable.
 */
enum SctStatus sct_volume_compare(const struct SctVolume *pred,
                                  const struct SctVolume *truth,
                                  struct SctMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPARSECT_H */
