#ifndef DYNCLOUD_H
#define DYNCLOUD_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum DcStatus {
  DC_STATUS_OK = 0,
  DC_STATUS_NULL_ARGUMENT = 1,
  DC_STATUS_INVALID_ARGUMENT = 2,
  DC_STATUS_PRECONDITION = 3,
  DC_STATUS_NUMERIC_FAILURE = 4,
  DC_STATUS_IO = 5,
  DC_STATUS_FORMAT = 6,
  DC_STATUS_DIMENSION_MISMATCH = 7,
  DC_STATUS_TIME_OUT_OF_RANGE = 8,
  DC_STATUS_BUFFER_TOO_SMALL = 9,
  DC_STATUS_ABORTED = 10,
  DC_STATUS_PANIC = 11,
} DcStatus;

/**
 * Frame kinds reported to a synthesis callback.
 */
typedef enum DcFrameKind {
  DC_FRAME_KIND_KEYFRAME = 0,
  DC_FRAME_KIND_ANCHOR = 1,
  DC_FRAME_KIND_BLEND = 2,
} DcFrameKind;

/**
 * A dense flow field in pixels per keyframe interval.
 */
typedef struct DcFlow DcFlow;

/**
 * A square sky image in display range.
 */
typedef struct DcImage DcImage;

/**
 * A trained network loaded from a checkpoint.
 */
typedef struct DcModel DcModel;

/**
 * Receives each synthesized frame in order. The image is borrowed for the
 * duration of the call. Returning nonzero stops synthesis with
 * `DC_STATUS_ABORTED`.
 */
typedef int (*DcFrameSink)(void *user,
                           size_t index,
                           double time,
                           enum DcFrameKind kind,
                           const struct DcImage *frame);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *dc_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dc_version(void);

/**
 * Builds an image from `size * size` interleaved RGB floats. Values are
 * clamped to `[0, 1]`; pixels outside the fisheye disc are zeroed.
 *
 * # Safety
 * `rgb` must point to `len` readable floats.
 */
enum DcStatus dc_image_new(size_t size, const float *rgb, size_t len, struct DcImage **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum DcStatus dc_image_load_png(const char *path, struct DcImage **out);

/**
 * # Safety
 * `img` must be a live handle and `path` a NUL-terminated string.
 */
enum DcStatus dc_image_save_png(const struct DcImage *img, const char *path);

/**
 * Side length in pixels, or 0 for a null handle.
 *
 * # Safety
 * `img` must be null or a live handle.
 */
size_t dc_image_size(const struct DcImage *img);

/**
 * Copies `size * size * 3` interleaved floats into `out`.
 *
 * # Safety
 * `img` must be a live handle and `out` point to `len` writable floats.
 */
enum DcStatus dc_image_read(const struct DcImage *img, float *out, size_t len);

/**
 * Writes the cloud mask (1 = cloud) as `size * size` bytes.
 *
 * # Safety
 * `img` must be a live handle and `out` point to `len` writable bytes.
 */
enum DcStatus dc_cloud_mask(const struct DcImage *img, float threshold, uint8_t *out, size_t len);

/**
 * # Safety
 * `img` must be null or a handle not yet freed.
 */
void dc_image_free(struct DcImage *img);

/**
 * Builds a flow field from `size * size` interleaved `(du, dv)` pairs.
 *
 * # Safety
 * `uv` must point to `len` readable floats.
 */
enum DcStatus dc_flow_new(size_t size, const float *uv, size_t len, struct DcFlow **out);

/**
 * Dense flow from `a` to `b` with default estimator settings.
 *
 * # Safety
 * `a` and `b` must be live handles.
 */
enum DcStatus dc_flow_estimate(const struct DcImage *a,
                               const struct DcImage *b,
                               struct DcFlow **out);

/**
 * Copies `size * size * 2` interleaved floats into `out`.
 *
 * # Safety
 * `flow` must be a live handle and `out` point to `len` writable floats.
 */
enum DcStatus dc_flow_read(const struct DcFlow *flow, float *out, size_t len);

/**
 * # Safety
 * `flow` must be null or a handle not yet freed.
 */
void dc_flow_free(struct DcFlow *flow);

/**
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum DcStatus dc_model_load(const char *path, struct DcModel **out);

/**
 * Input resolution of the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dc_model_resolution(const struct DcModel *model);

/**
 * 1 for FlowNet, 2 for CloudNet, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int dc_model_role(const struct DcModel *model);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void dc_model_free(struct DcModel *model);

/**
 * One keyframe step: the image `delta_t` seconds after `img`.
 *
 * # Safety
 * All handles must be live.
 */
enum DcStatus dc_predict_next(const struct DcModel *flownet,
                              const struct DcModel *cloudnet,
                              const struct DcImage *img,
                              struct DcImage **out);

/**
 * Moves `img` along `flow` by the fraction `s` of one interval.
 *
 * # Safety
 * All handles must be live.
 */
enum DcStatus dc_advect(const struct DcImage *img,
                        const struct DcFlow *flow,
                        double s,
                        struct DcImage **out);

/**
 * The in-between frame at `t` seconds, `0 < t < delta_t`, for keyframes
 * `a` and `b` and the flow from `a` to `b`.
 *
 * # Safety
 * All handles must be live.
 */
enum DcStatus dc_interpolate_frame(const struct DcImage *a,
                                   const struct DcImage *b,
                                   const struct DcFlow *flow,
                                   double t,
                                   double delta_t,
                                   struct DcImage **out);

/**
 * Synthesizes `keyframes * substeps + 1` frames from `input`, passing
 * each to `sink` in order.
 *
 * # Safety
 * All handles must be live; `sink` must be callable with `user`.
 */
enum DcStatus dc_synthesize(const struct DcImage *input,
                            const struct DcModel *flownet,
                            const struct DcModel *cloudnet,
                            size_t keyframes,
                            size_t substeps,
                            double delta_t,
                            DcFrameSink sink,
                            void *user);

/**
 * # Safety
 * `a`, `b` must be live handles and `out` writable.
 */
enum DcStatus dc_mse(const struct DcImage *a, const struct DcImage *b, double *out);

/**
 * Infinite for identical images.
 *
 * # Safety
 * `a`, `b` must be live handles and `out` writable.
 */
enum DcStatus dc_psnr(const struct DcImage *a, const struct DcImage *b, double peak, double *out);

/**
 * # Safety
 * `a`, `b` must be live handles and `out` writable.
 */
enum DcStatus dc_ssim(const struct DcImage *a, const struct DcImage *b, double peak, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYNCLOUD_H */
