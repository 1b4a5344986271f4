#ifndef SSCD_H
#define SSCD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SSCD_CVA_OTSU 0

#define SSCD_CVA_TRIANGLE 1

#define SSCD_TASK_OVERLAP 0

#define SSCD_TASK_TRIPLET 1

/**
 * Result code of every fallible call.
 */
typedef enum SscdStatus {
  SSCD_OK = 0,
  SSCD_NULL_POINTER = 1,
  SSCD_INVALID_ARGUMENT = 2,
  SSCD_SHAPE = 3,
  SSCD_DATA = 4,
  SSCD_FORMAT = 5,
  SSCD_IO = 6,
  SSCD_TASK_MISMATCH = 7,
  SSCD_NON_FINITE = 8,
  SSCD_DEGENERATE = 9,
  SSCD_INTERNAL = 10,
  SSCD_PANIC = 11,
} SscdStatus;

/**
 * Opaque handle to a loaded pretext model.
 */
typedef struct SscdModel SscdModel;

/**
 * Shape facts about a loaded model.
 */
typedef struct SscdModelInfo {
  uint32_t task;
  size_t in_channels;
  /**
   * Deepest layer accepted by `sscd_detect_cva`.
   */
  uint32_t max_layer;
} SscdModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint directory. On success `*out` owns a handle that must be
 * released with `sscd_model_free`; on failure it is set to null.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SscdStatus sscd_model_load(const char *dir, struct SscdModel **out);

/**
 * Releases a handle from `sscd_model_load`. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void sscd_model_free(struct SscdModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum SscdStatus sscd_model_info(const struct SscdModel *model, struct SscdModelInfo *out);

/**
 * CVA change detection on one image pair.
 *
 * `t1` and `t2` hold `bands * height * width` floats each, band-sequential
 * (`[band][row][col]`). Both dates are standardized per band before feature
 * extraction, as during training. `out_binary` receives `height * width`
 * 0/1 bytes. `out_score` (same length) and `out_threshold` are optional and
 * receive the normalized magnitude map and the threshold it was cut at. A
 * scene whose magnitude map is constant yields an all-zero map and status OK.
 *
 * # Safety
 * Every non-null pointer must be valid for the stated number of elements.
 */
enum SscdStatus sscd_detect_cva(const struct SscdModel *model,
                                const float *t1,
                                const float *t2,
                                size_t bands,
                                size_t height,
                                size_t width,
                                uint32_t layer,
                                uint32_t method,
                                uint8_t *out_binary,
                                float *out_score,
                                double *out_threshold);

/**
 * Copies the calling thread's last error message into `buf` (truncated and
 * always NUL-terminated when `len > 0`). Returns the full message length
 * excluding the terminator, so a caller can size a second call.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t sscd_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sscd_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSCD_H */
