#ifndef STC_VIS_H
#define STC_VIS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum StcStatus {
  STC_OK = 0,
  STC_ERR_NULL_POINTER = 1,
  STC_ERR_INVALID_ARGUMENT = 2,
  STC_ERR_CONFIG = 3,
  STC_ERR_SHAPE = 4,
  STC_ERR_FORMAT = 5,
  STC_ERR_IO = 6,
  STC_ERR_RUNTIME = 7,
  STC_ERR_PANIC = 8,
} StcStatus;

/**
 * Opaque model handle.
 */
typedef struct StcModel StcModel;

/**
 * Opaque online tracker bound to one video.
 */
typedef struct StcTracker StcTracker;

/**
 * Detection and association thresholds.
 */
typedef struct StcTrackerParams {
  double score_thresh;
  double nms_thresh;
  size_t top_t;
  double w_iou;
  double w_cls;
  double new_thresh;
} StcTrackerParams;

/**
 * Summary of one finalized track.
 */
typedef struct StcTrack {
  uint64_t track_id;
  uint32_t category;
  double score;
  /**
   * Number of frames with a mask.
   */
  size_t num_frames;
} StcTrack;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *stc_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *stc_last_error_message(void);

void stc_clear_error(void);

/**
 * Creates a freshly initialized model. `embed_dim` 0 selects the default.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum StcStatus stc_model_new(uint64_t seed, size_t embed_dim, struct StcModel **out);

/**
 * Loads a checkpoint written by the `train` command or [`stc_model_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum StcStatus stc_model_load(const char *path, struct StcModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum StcStatus stc_model_save(const struct StcModel *model, const char *path);

/**
 * Length of each predicted dynamic mask kernel.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum StcStatus stc_model_kernel_length(const struct StcModel *model, size_t *out);

/**
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum StcStatus stc_model_num_parameters(const struct StcModel *model, size_t *out);

/**
 * Releases a model. Trackers created from it stay valid. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void stc_model_free(struct StcModel *model);

struct StcTrackerParams stc_tracker_default_params(void);

/**
 * Starts tracking a new video. `params` may be null for defaults.
 *
 * # Safety
 * `model` must come from this library, `params` null or valid, `out` writable.
 */
enum StcStatus stc_tracker_new(const struct StcModel *model,
                               const struct StcTrackerParams *params,
                               struct StcTracker **out);

/**
 * Detects and associates one frame of interleaved 8-bit RGB
 * (`height * width * 3` bytes, row-major). Every frame of a video must
 * share one size, divisible by 32.
 *
 * # Safety
 * `tracker` must come from this library; `rgb` must point to
 * `height * width * 3` readable bytes; `out_num_detections` null or writable.
 */
enum StcStatus stc_tracker_push_frame(struct StcTracker *tracker,
                                      const uint8_t *rgb,
                                      size_t height,
                                      size_t width,
                                      size_t *out_num_detections);

/**
 * Number of frames pushed so far.
 *
 * # Safety
 * `tracker` must come from this library; `out` writable.
 */
enum StcStatus stc_tracker_num_frames(const struct StcTracker *tracker, size_t *out);

/**
 * Number of tracks after majority voting over all frames pushed so far.
 *
 * # Safety
 * `tracker` must come from this library; `out` writable.
 */
enum StcStatus stc_tracker_num_tracks(const struct StcTracker *tracker, size_t *out);

/**
 * # Safety
 * `tracker` must come from this library; `out` writable.
 */
enum StcStatus stc_tracker_track(const struct StcTracker *tracker,
                                 size_t index,
                                 struct StcTrack *out);

/**
 * Copies the track's binary mask (0/1 bytes, row-major) at `frame` into
 * `buf`. Sets `*out_present` to false and leaves `buf` untouched when the
 * track has no mask there.
 *
 * # Safety
 * `tracker` must come from this library; `buf` must hold `buf_len` writable
 * bytes; `out_present` writable.
 */
enum StcStatus stc_tracker_track_mask(const struct StcTracker *tracker,
                                      size_t index,
                                      size_t frame,
                                      uint8_t *buf,
                                      size_t buf_len,
                                      bool *out_present);

/**
 * # Safety
 * `tracker` must come from this library and not be used afterwards.
 */
void stc_tracker_free(struct StcTracker *tracker);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STC_VIS_H */
