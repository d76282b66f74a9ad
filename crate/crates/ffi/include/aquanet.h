#ifndef AQUANET_H
#define AQUANET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AquanetStatus {
  AQUANET_STATUS_OK = 0,
  AQUANET_STATUS_NULL_POINTER = 1,
  AQUANET_STATUS_INVALID_ARGUMENT = 2,
  AQUANET_STATUS_UNKNOWN_IMAGE = 3,
  AQUANET_STATUS_BUFFER_TOO_SMALL = 4,
  AQUANET_STATUS_INTERNAL = 5,
} AquanetStatus;

// Accumulates ground truth and detections for scoring.
typedef struct AquanetEvaluator AquanetEvaluator;

// Pixel-corner box.
typedef struct AquanetBox {
  double x1;
  double y1;
  double x2;
  double y2;
} AquanetBox;

typedef struct AquanetDetection {
  uint32_t class_id;
  double confidence;
  struct AquanetBox bbox;
} AquanetDetection;

// Micro-averaged operating point.
typedef struct AquanetOperatingPoint {
  double precision;
  double recall;
  double f1;
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_count;
} AquanetOperatingPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failed call on this thread; empty after a
// successful call. Valid until the next call on this thread.
const char *aquanet_last_error_message(void);

// Intersection over union of two pixel-corner boxes.
//
// # Safety
// `a`, `b` and `out` must be valid pointers.
enum AquanetStatus aquanet_iou(const struct AquanetBox *a, const struct AquanetBox *b, double *out);

// Per-class greedy NMS. Writes indices of kept detections, highest
// confidence first, to `keep` and their number to `keep_len`. When
// `keep_capacity` is too small, `keep_len` receives the required size and
// `BufferTooSmall` is returned.
//
// # Safety
// `detections` must point to `count` values (may be null when `count` is
// 0); `keep` must have room for `keep_capacity` values.
enum AquanetStatus aquanet_nms(const struct AquanetDetection *detections,
                               uintptr_t count,
                               double iou_threshold,
                               uintptr_t *keep,
                               uintptr_t keep_capacity,
                               uintptr_t *keep_len);

// New evaluator over the plant / hole / plastic class table. Never null.
struct AquanetEvaluator *aquanet_evaluator_new(void);

// # Safety
// `ev` must come from [`aquanet_evaluator_new`] and not be used afterwards.
void aquanet_evaluator_free(struct AquanetEvaluator *ev);

// Registers an image. Re-registering keeps existing ground truth only if
// the size is unchanged.
//
// # Safety
// `ev` must be a live evaluator and `image_id` a NUL-terminated string.
enum AquanetStatus aquanet_evaluator_add_image(struct AquanetEvaluator *ev,
                                               const char *image_id,
                                               uint32_t width,
                                               uint32_t height);

// Adds a ground-truth box in source pixels to a registered image.
//
// # Safety
// `ev` must be a live evaluator, `image_id` a NUL-terminated string and
// `bbox` a valid pointer.
enum AquanetStatus aquanet_evaluator_add_ground_truth(struct AquanetEvaluator *ev,
                                                      const char *image_id,
                                                      uint32_t class_id,
                                                      const struct AquanetBox *bbox);

// Adds a detection in source pixels to a registered image.
//
// # Safety
// `ev` must be a live evaluator, `image_id` a NUL-terminated string and
// `detection` a valid pointer.
enum AquanetStatus aquanet_evaluator_add_detection(struct AquanetEvaluator *ev,
                                                   const char *image_id,
                                                   const struct AquanetDetection *detection);

// Micro precision / recall / F1 at confidence `tau` (inclusive).
//
// # Safety
// `ev` must be a live evaluator and `out` a valid pointer.
enum AquanetStatus aquanet_evaluator_operating_point(const struct AquanetEvaluator *ev,
                                                     double tau,
                                                     double match_iou,
                                                     struct AquanetOperatingPoint *out);

// Mean all-point AP over classes with ground truth; NaN when no class
// has any.
//
// # Safety
// `ev` must be a live evaluator and `out` a valid pointer.
enum AquanetStatus aquanet_evaluator_map(const struct AquanetEvaluator *ev,
                                         double match_iou,
                                         double *out);

// Full detector report as JSON. Release `*out` with
// [`aquanet_string_free`].
//
// # Safety
// `ev` must be a live evaluator, `model` a NUL-terminated string and `out`
// a valid pointer.
enum AquanetStatus aquanet_evaluator_report_json(const struct AquanetEvaluator *ev,
                                                 const char *model,
                                                 double tau,
                                                 double match_iou,
                                                 char **out);

// # Safety
// `s` must come from this library and not be used afterwards.
void aquanet_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AQUANET_H */
