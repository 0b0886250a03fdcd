#ifndef STEGOGRAPH_H
#define STEGOGRAPH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Embedding cost models.
typedef enum SgAlgorithm {
  SG_ALGORITHM_UNIFORM = 0,
  SG_ALGORITHM_HILL = 1,
} SgAlgorithm;

// Result codes shared by every entry point.
typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_POINTER = 1,
  SG_STATUS_INVALID_ARGUMENT = 2,
  SG_STATUS_IO = 3,
  SG_STATUS_CHECKPOINT = 4,
  SG_STATUS_SHAPE = 5,
  SG_STATUS_NUMERIC = 6,
  SG_STATUS_INTERNAL = 7,
} SgStatus;

// A trained model loaded from a checkpoint.
typedef struct SgModel SgModel;

// Message describing the last failure on this thread, or NULL. The pointer
// stays valid until the next failing call on the same thread.
const char *sg_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *sg_version(void);

// Load a checkpoint manifest; on success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum SgStatus sg_model_load(const char *path, struct SgModel **out);

// Release a handle from [`sg_model_load`]. NULL is ignored.
//
// # Safety
// `model` must come from [`sg_model_load`] and not be used afterwards.
void sg_model_free(struct SgModel *model);

// Image size the model was trained on.
//
// # Safety
// `model` must be a live handle; `height` and `width` writable.
enum SgStatus sg_model_input_size(const struct SgModel *model, size_t *height, size_t *width);

// Class probabilities `[cover, stego]` for one image, written to `probs`.
//
// # Safety
// `pixels` must hold `height * width` bytes and `probs` two floats.
enum SgStatus sg_model_predict(const struct SgModel *model,
                               const uint8_t *pixels,
                               size_t height,
                               size_t width,
                               float *probs);

// 1-based `(row, col)` offsets of an `n x m` patch grid, row-major, written
// as `2 * n * m` values to `offsets` (which holds `capacity` values).
//
// # Safety
// `offsets` must hold `capacity` values.
enum SgStatus sg_plan_patches(size_t height,
                              size_t width,
                              size_t patch_h,
                              size_t patch_w,
                              size_t n,
                              size_t m,
                              double alpha,
                              double beta,
                              size_t *offsets,
                              size_t capacity);

// HILL costs of an image, `height * width` doubles in row-major order.
//
// # Safety
// `pixels` and `costs` must hold `height * width` elements.
enum SgStatus sg_hill_cost(const uint8_t *pixels, size_t height, size_t width, double *costs);

// Simulate embedding `payload_bpp` bits per pixel; writes the stego image
// and, when `lambda` is non-NULL, the chosen multiplier.
//
// # Safety
// `pixels` and `stego` must hold `height * width` bytes.
enum SgStatus sg_simulate_embedding(const uint8_t *pixels,
                                    size_t height,
                                    size_t width,
                                    enum SgAlgorithm algorithm,
                                    double payload_bpp,
                                    uint64_t seed,
                                    uint8_t *stego,
                                    double *lambda);

#endif  /* STEGOGRAPH_H */
