#ifndef THERMOYOLO_H
#define THERMOYOLO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TyStatus {
  TY_STATUS_OK = 0,
  TY_STATUS_NULL_POINTER = 1,
  TY_STATUS_INVALID_ARGUMENT = 2,
  TY_STATUS_IO = 3,
  TY_STATUS_FORMAT = 4,
  TY_STATUS_DATA = 5,
  TY_STATUS_BUFFER_TOO_SMALL = 6,
  TY_STATUS_PANIC = 7,
} TyStatus;

/**
 * Float model.
 */
typedef struct TyModel TyModel;

/**
 * Int8 model.
 */
typedef struct TyQModel TyQModel;

/**
 * One detection in source-frame pixels.
 */
typedef struct TyDetection {
  float x1;
  float y1;
  float x2;
  float y2;
  uint32_t class_id;
  float score;
} TyDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *ty_last_error_message(void);

const char *ty_version(void);

/**
 * Randomly initialised nano model.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum TyStatus ty_model_build_nano(uint32_t num_classes,
                                  uint32_t input_size,
                                  uint64_t seed,
                                  struct TyModel **out);

/**
 * Loads a TYM1 file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` as for [`ty_model_build_nano`].
 */
enum TyStatus ty_model_load(const char *path, struct TyModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum TyStatus ty_model_save(const struct TyModel *model, const char *path);

/**
 * # Safety
 * `model` must be a live handle or null.
 */
uint32_t ty_model_input_size(const struct TyModel *model);

/**
 * # Safety
 * `model` must be a live handle or null.
 */
uint32_t ty_model_num_classes(const struct TyModel *model);

/**
 * Detects on an 8-bit grayscale frame of `width · height` bytes. `*count`
 * receives the total number of detections; at most `capacity` are
 * written, and a larger total returns `BufferTooSmall`.
 *
 * # Safety
 * `pixels` must hold `width · height` bytes and `out` room for `capacity`
 * records.
 */
enum TyStatus ty_model_detect(const struct TyModel *model,
                              const uint8_t *pixels,
                              uint32_t width,
                              uint32_t height,
                              float conf_threshold,
                              float iou_threshold,
                              struct TyDetection *out,
                              size_t capacity,
                              size_t *count);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void ty_model_free(struct TyModel *model);

/**
 * Calibrates on `count` frames stored back to back (each `width · height`
 * bytes) with min/max ranges and returns the int8 model.
 *
 * # Safety
 * `frames` must hold `count · width · height` bytes; `out` as for
 * [`ty_model_build_nano`].
 */
enum TyStatus ty_model_quantize(const struct TyModel *model,
                                const uint8_t *frames,
                                uint32_t width,
                                uint32_t height,
                                uint32_t count,
                                struct TyQModel **out);

/**
 * Loads a TYQ1 file.
 *
 * # Safety
 * As for [`ty_model_load`].
 */
enum TyStatus ty_qmodel_load(const char *path, struct TyQModel **out);

/**
 * # Safety
 * As for [`ty_model_save`].
 */
enum TyStatus ty_qmodel_save(const struct TyQModel *model, const char *path);

/**
 * Int8 counterpart of [`ty_model_detect`].
 *
 * # Safety
 * As for [`ty_model_detect`].
 */
enum TyStatus ty_qmodel_detect(const struct TyQModel *model,
                               const uint8_t *pixels,
                               uint32_t width,
                               uint32_t height,
                               float conf_threshold,
                               float iou_threshold,
                               struct TyDetection *out,
                               size_t capacity,
                               size_t *count);

/**
 * # Safety
 * As for [`ty_model_free`].
 */
void ty_qmodel_free(struct TyQModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* THERMOYOLO_H */
