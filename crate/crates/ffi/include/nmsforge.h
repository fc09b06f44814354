#ifndef NMSFORGE_H
#define NMSFORGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NmsforgeStatus {
  NMSFORGE_STATUS_OK = 0,
  NMSFORGE_STATUS_NULL_POINTER = 1,
  NMSFORGE_STATUS_INVALID_INPUT = 2,
  NMSFORGE_STATUS_INVALID_CONFIG = 3,
  NMSFORGE_STATUS_UNSUPPORTED = 4,
  NMSFORGE_STATUS_BUFFER_TOO_SMALL = 5,
  NMSFORGE_STATUS_INTERNAL = 6,
} NmsforgeStatus;

typedef enum NmsforgeAssignment {
  NMSFORGE_ASSIGNMENT_MAX = 0,
  NMSFORGE_ASSIGNMENT_SUM = 1,
  NMSFORGE_ASSIGNMENT_RANDOM = 2,
} NmsforgeAssignment;

typedef enum NmsforgeEngine {
  NMSFORGE_ENGINE_GREEDY = 0,
  NMSFORGE_ENGINE_PSRR = 1,
  NMSFORGE_ENGINE_LEGACY_SINGLE = 2,
  NMSFORGE_ENGINE_LEGACY_RATIO = 3,
  NMSFORGE_ENGINE_LEGACY_SCALE = 4,
} NmsforgeEngine;

typedef enum NmsforgeOverlapMode {
  NMSFORGE_OVERLAP_MODE_JACCARD = 0,
  NMSFORGE_OVERLAP_MODE_RECALL = 1,
} NmsforgeOverlapMode;

/**
 * Opaque engine configuration.
 */
typedef struct NmsforgeConfig NmsforgeConfig;

/**
 * One detection. The anchor fields are read only when `has_anchor` is
 * non-zero; legacy engines require them.
 */
typedef struct NmsforgeDetection {
  double x1;
  double y1;
  double x2;
  double y2;
  double score;
  uint32_t class_id;
  uint32_t det_id;
  uint8_t has_anchor;
  double anchor_x1;
  double anchor_y1;
  double anchor_x2;
  double anchor_y2;
  uint32_t anchor_channel;
} NmsforgeDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null.
 * The pointer is valid until the next call into this library.
 */
const char *nmsforge_last_error(void);

const char *nmsforge_version(void);

/**
 * New config with default settings. Free with [`nmsforge_config_free`].
 */
struct NmsforgeConfig *nmsforge_config_new(void);

/**
 * # Safety
 * `cfg` must come from [`nmsforge_config_new`] and not be freed twice.
 */
void nmsforge_config_free(struct NmsforgeConfig *cfg);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum NmsforgeStatus nmsforge_config_set_alpha(struct NmsforgeConfig *cfg, double alpha);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum NmsforgeStatus nmsforge_config_set_beta(struct NmsforgeConfig *cfg, double beta);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum NmsforgeStatus nmsforge_config_set_image_size(struct NmsforgeConfig *cfg,
                                                   double width,
                                                   double height);

/**
 * Anchor areas in pixels², strictly increasing.
 *
 * # Safety
 * `cfg` must be a live handle and `scales` must point to `n` doubles.
 */
enum NmsforgeStatus nmsforge_config_set_scales(struct NmsforgeConfig *cfg,
                                               const double *scales,
                                               size_t n);

/**
 * Height:width ratios, strictly increasing.
 *
 * # Safety
 * `cfg` must be a live handle and `ratios` must point to `n` doubles.
 */
enum NmsforgeStatus nmsforge_config_set_ratios(struct NmsforgeConfig *cfg,
                                               const double *ratios,
                                               size_t n);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum NmsforgeStatus nmsforge_config_set_top_k(struct NmsforgeConfig *cfg, size_t top_k);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum NmsforgeStatus nmsforge_config_set_greedy_iou(struct NmsforgeConfig *cfg, double iou);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum NmsforgeStatus nmsforge_config_set_assignment(struct NmsforgeConfig *cfg,
                                                   enum NmsforgeAssignment a);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum NmsforgeStatus nmsforge_config_set_seed(struct NmsforgeConfig *cfg, uint64_t seed);

/**
 * Pooling schedule such as `"single+ratio+scale+all"`.
 *
 * # Safety
 * `cfg` must be a live handle and `schedule` a NUL-terminated string.
 */
enum NmsforgeStatus nmsforge_config_set_schedule(struct NmsforgeConfig *cfg,
                                                 const char *schedule,
                                                 bool shifted);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum NmsforgeStatus nmsforge_config_validate(struct NmsforgeConfig *cfg);

/**
 * Suppresses `dets` class by class and writes the kept det_ids, ordered
 * by class and then by descending score, into `out_ids`.
 *
 * `*out_len` always receives the number of kept boxes. If it exceeds
 * `out_cap`, nothing is written and `BufferTooSmall` is returned.
 *
 * # Safety
 * `cfg` must be a live handle, `dets` must point to `n_dets` detections,
 * `out_ids` to `out_cap` writable u32 and `out_len` to a writable usize.
 */
enum NmsforgeStatus nmsforge_run(const struct NmsforgeConfig *cfg,
                                 enum NmsforgeEngine engine,
                                 const struct NmsforgeDetection *dets,
                                 size_t n_dets,
                                 uint32_t *out_ids,
                                 size_t out_cap,
                                 size_t *out_len);

/**
 * Overlap between two kept-id sets; `b` is the reference for `Recall`.
 * Duplicate ids are counted once.
 *
 * # Safety
 * `a` and `b` must point to `na` and `nb` u32, `out` to a writable double.
 */
enum NmsforgeStatus nmsforge_overlap(const uint32_t *a,
                                     size_t na,
                                     const uint32_t *b,
                                     size_t nb,
                                     enum NmsforgeOverlapMode mode,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NMSFORGE_H */
