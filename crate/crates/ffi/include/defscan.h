#ifndef DEFSCAN_H
#define DEFSCAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DefscanStatus {
  DEFSCAN_STATUS_OK = 0,
  DEFSCAN_STATUS_NULL_POINTER = 1,
  DEFSCAN_STATUS_INVALID_UTF8 = 2,
  DEFSCAN_STATUS_BUFFER_TOO_SMALL = 3,
  DEFSCAN_STATUS_DIMENSION = 4,
  DEFSCAN_STATUS_CONFIG = 5,
  DEFSCAN_STATUS_INPUT = 6,
  DEFSCAN_STATUS_FORMAT = 7,
  DEFSCAN_STATUS_NON_FINITE = 8,
  DEFSCAN_STATUS_DIVERGED = 9,
  DEFSCAN_STATUS_IO = 10,
  DEFSCAN_STATUS_PANIC = 11,
} DefscanStatus;

/**
 * Opaque model handle.
 */
typedef struct DefscanModel DefscanModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a freshly initialized model from a preset name (`nano`, `tiny`,
 * `small` or `base`).
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DefscanStatus defscan_model_new_preset(const char *preset,
                                            uint64_t seed,
                                            struct DefscanModel **out);

/**
 * Loads a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DefscanStatus defscan_model_load(const char *path, struct DefscanModel **out);

/**
 * Releases a model. Null is accepted and ignored.
 *
 * # Safety
 * `model` must be null or a handle from this library that was not freed yet.
 */
void defscan_model_free(struct DefscanModel *model);

/**
 * Number of learnable scalars.
 *
 * # Safety
 * `model` must be a live handle and `out` a writable pointer.
 */
enum DefscanStatus defscan_model_param_count(const struct DefscanModel *model, size_t *out);

/**
 * # Safety
 * `model` must be a live handle and `out` a writable pointer.
 */
enum DefscanStatus defscan_model_num_classes(const struct DefscanModel *model, size_t *out);

/**
 * Input side length; images are `image_size × image_size × 3`.
 *
 * # Safety
 * `model` must be a live handle and `out` a writable pointer.
 */
enum DefscanStatus defscan_model_image_size(const struct DefscanModel *model, size_t *out);

/**
 * Class logits of one image. `logits_len` must equal the class count.
 *
 * # Safety
 * `model` must be a live handle, `image_data` must point to `image_len`
 * readable doubles and `logits` to `logits_len` writable doubles.
 */
enum DefscanStatus defscan_model_forward(const struct DefscanModel *model,
                                         const double *image_data,
                                         size_t image_len,
                                         double *logits,
                                         size_t logits_len);

/**
 * Deformable scan order of the first block of the first stage for one
 * image: entry `i` is the raster index of the `i`-th scanned token.
 *
 * # Safety
 * `model` must be a live handle, `image_data` must point to `image_len`
 * readable doubles, `order` to `capacity` writable indices and `out_len`
 * must be writable.
 */
enum DefscanStatus defscan_model_scan_order(const struct DefscanModel *model,
                                            const double *image_data,
                                            size_t image_len,
                                            size_t *order,
                                            size_t capacity,
                                            size_t *out_len);

/**
 * Fixed scan order of an `h × w` grid. `kind` is `raster`,
 * `raster_reversed`, `continuous`, `local_window` or `local_window(N)`.
 *
 * # Safety
 * `kind` must be a NUL-terminated string, `order` must point to `capacity`
 * writable indices and `out_len` must be writable.
 */
enum DefscanStatus defscan_fixed_order(const char *kind,
                                       size_t h,
                                       size_t w,
                                       size_t *order,
                                       size_t capacity,
                                       size_t *out_len);

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to fit, into `buf`. Returns the full message length in bytes
 * excluding the terminator, or 0 when the last call succeeded.
 *
 * # Safety
 * `buf` must be null or point to `capacity` writable bytes.
 */
size_t defscan_last_error_message(char *buf, size_t capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEFSCAN_H */
