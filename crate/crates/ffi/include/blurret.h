#ifndef BLURRET_H
#define BLURRET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BlurretStatus {
  BLURRET_STATUS_OK = 0,
  BLURRET_STATUS_NULL_POINTER = 1,
  BLURRET_STATUS_INVALID_ARGUMENT = 2,
  BLURRET_STATUS_SHAPE_MISMATCH = 3,
  BLURRET_STATUS_DOMAIN = 4,
  BLURRET_STATUS_EMPTY_ERODED_MASK = 5,
  BLURRET_STATUS_EMPTY_INDEX = 6,
  BLURRET_STATUS_DEGENERATE_DESCRIPTOR = 7,
  BLURRET_STATUS_IO = 8,
  BLURRET_STATUS_FORMAT = 9,
  BLURRET_STATUS_PANIC = 10,
  BLURRET_STATUS_OTHER = 11,
} BlurretStatus;

/**
 * A trained descriptor network.
 */
typedef struct BlurretModel BlurretModel;

/**
 * Unit descriptors with ids, object ids and blur levels.
 */
typedef struct BlurretStore BlurretStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into the library on this thread.
 */
const char *blurret_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *blurret_version(void);

/**
 * Blur severity of a row-major `height × width` alpha mask.
 *
 * # Safety
 * `alpha` must point to `height * width` doubles and `out_bs` to one.
 */
enum BlurretStatus blurret_blur_severity(const double *alpha,
                                         size_t height,
                                         size_t width,
                                         size_t erosion_radius,
                                         double *out_bs);

/**
 * Blur level `max(1, ceil(10 * bs))` for `bs` in `[0, 1)`.
 *
 * # Safety
 * `out_level` must point to one byte.
 */
enum BlurretStatus blurret_blur_level(double bs, uint8_t *out_level);

/**
 * Loads a model checkpoint written by `blurret train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_model` a valid pointer.
 */
enum BlurretStatus blurret_model_load(const char *path, struct BlurretModel **out_model);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`blurret_model_load`] and not be used afterwards.
 */
void blurret_model_free(struct BlurretModel *model);

/**
 * Descriptor dimension of the model, 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t blurret_model_descriptor_dim(const struct BlurretModel *model);

/**
 * Unit-norm descriptor of one planar RGB image into `out_descriptor`,
 * which must hold exactly the model's descriptor dimension.
 *
 * # Safety
 * `image` must point to `3 * height * width` doubles and `out_descriptor`
 * to `descriptor_len` doubles.
 */
enum BlurretStatus blurret_model_embed(const struct BlurretModel *model,
                                       const double *image,
                                       size_t height,
                                       size_t width,
                                       double *out_descriptor,
                                       size_t descriptor_len);

/**
 * Creates an empty store for descriptors of dimension `dim`.
 *
 * # Safety
 * `out_store` must be a valid pointer.
 */
enum BlurretStatus blurret_store_new(size_t dim, struct BlurretStore **out_store);

/**
 * Reads a descriptor file written by `blurret embed`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_store` a valid pointer.
 */
enum BlurretStatus blurret_store_load(const char *path, struct BlurretStore **out_store);

/**
 * Writes the store in the `blurret embed` format.
 *
 * # Safety
 * `store` must be a live handle and `path` a NUL-terminated string.
 */
enum BlurretStatus blurret_store_save(const struct BlurretStore *store, const char *path);

/**
 * Releases a store; null is ignored.
 *
 * # Safety
 * `store` must come from this library and not be used afterwards.
 */
void blurret_store_free(struct BlurretStore *store);

/**
 * Number of descriptors, 0 for null.
 *
 * # Safety
 * `store` must be null or a live handle.
 */
size_t blurret_store_len(const struct BlurretStore *store);

/**
 * Descriptor dimension, 0 for null.
 *
 * # Safety
 * `store` must be null or a live handle.
 */
size_t blurret_store_dim(const struct BlurretStore *store);

/**
 * Adds a unit-norm descriptor (within 1e-6) under a new `id`.
 *
 * # Safety
 * `store` must be a live handle and `descriptor` point to `len` doubles.
 */
enum BlurretStatus blurret_store_push(struct BlurretStore *store,
                                      uint64_t id,
                                      uint64_t object_id,
                                      uint8_t blur_level,
                                      const double *descriptor,
                                      size_t len);

/**
 * Exact top-`k` search by inner product, ties broken by ascending id.
 * Writes up to `k` ids and scores and the number written to `out_count`.
 *
 * # Safety
 * `query` must point to `len` doubles; `out_ids` and `out_scores` to `k`
 * elements each; `out_count` to one.
 */
enum BlurretStatus blurret_store_search(const struct BlurretStore *store,
                                        const double *query,
                                        size_t len,
                                        size_t k,
                                        uint64_t *out_ids,
                                        double *out_scores,
                                        size_t *out_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLURRET_H */
