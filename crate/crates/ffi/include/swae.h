/* C interface for the sphere-projected WAE runtime. */

#ifndef SWAE_H
#define SWAE_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes for every FFI entry point.
 */
typedef enum SwaeStatus {
  SWAE_STATUS_OK = 0,
  SWAE_STATUS_NULL_ARGUMENT = 1,
  SWAE_STATUS_INVALID_UTF8 = 2,
  SWAE_STATUS_INVALID_ARGUMENT = 3,
  SWAE_STATUS_IO_ERROR = 4,
  SWAE_STATUS_FORMAT_ERROR = 5,
  SWAE_STATUS_SHAPE_MISMATCH = 6,
  /**
   * The checkpoint lacks the standardizer or scientific line required
   * by the call.
   */
  SWAE_STATUS_MISSING_METADATA = 7,
  SWAE_STATUS_NUMERIC_ERROR = 8,
  SWAE_STATUS_INTERNAL_PANIC = 9,
} SwaeStatus;

/**
 * Opaque handle to a loaded checkpoint.
 */
typedef struct SwaeModel SwaeModel;

/**
 * Model dimensions, all in elements.
 */
typedef struct SwaeDims {
  uintptr_t latent_dim;
  uintptr_t channels;
  uintptr_t height;
  uintptr_t width;
  uintptr_t n_scalars;
} SwaeDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Valid until the
 * next FFI call from the same thread; never null.
 */
const char *swae_last_error(void);

/**
 * Load a checkpoint from `path` into a fresh handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out_model` a valid
 * pointer; the returned handle must be released with [`swae_model_free`].
 */
enum SwaeStatus swae_model_load(const char *path, struct SwaeModel **out_model);

/**
 * Release a handle. A null pointer is a no-op.
 *
 * # Safety
 * `model` must have come from [`swae_model_load`] and not be used after.
 */
void swae_model_free(struct SwaeModel *model);

/**
 * Query the model's data and latent dimensions.
 *
 * # Safety
 * Both pointers must be valid.
 */
enum SwaeStatus swae_model_dims(const struct SwaeModel *model, struct SwaeDims *out_dims);

/**
 * Generate `n` samples: draw from the prior, project to the unit sphere,
 * scale by `radius`, decode. Identical (seed, radius) calls reproduce the
 * CLI `sample` subcommand exactly.
 *
 * `images_out` must hold n*channels*height*width floats and `scalars_out`
 * n*n_scalars floats (de-standardized units).
 *
 * # Safety
 * All pointers must be valid for the documented lengths.
 */
enum SwaeStatus swae_generate(const struct SwaeModel *model,
                              uintptr_t n,
                              double radius,
                              uint64_t seed,
                              float *images_out,
                              float *scalars_out);

/**
 * Encode `n` samples to latents. With `project` nonzero the rows are
 * normalized onto the unit sphere (the generator-side representation);
 * with zero they are the raw Euclidean encodings.
 *
 * `images` holds n*channels*height*width floats in [0,1], `scalars`
 * n*n_scalars floats in original units, `latents_out` n*latent_dim floats.
 *
 * # Safety
 * All pointers must be valid for the documented lengths.
 */
enum SwaeStatus swae_encode(const struct SwaeModel *model,
                            uintptr_t n,
                            const float *images,
                            const float *scalars,
                            int32_t project,
                            float *latents_out);

/**
 * Score `n` samples against the checkpoint's scientific line: residual =
 * t_ion - (slope * image_temperature + intercept), one double per sample.
 *
 * # Safety
 * All pointers must be valid for the documented lengths.
 */
enum SwaeStatus swae_score(const struct SwaeModel *model,
                           uintptr_t n,
                           const float *images,
                           const float *scalars,
                           double *residuals_out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SWAE_H */
