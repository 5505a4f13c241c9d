/* C ABI for the frustumfield feed-forward radiance-field engine. */

#ifndef FRUSTUMFIELD_H
#define FRUSTUMFIELD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every FFI call.
 */
typedef enum {
  FF_STATUS_OK = 0,
  FF_STATUS_INVALID_ARGUMENT = 1,
  FF_STATUS_IO = 2,
  FF_STATUS_PARSE = 3,
  FF_STATUS_CONTRACT = 4,
  FF_STATUS_INTERNAL = 5,
} FfStatus;

/**
 * A loaded scene + model, ready to render views.
 */
typedef struct FfRenderer FfRenderer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Never null; valid
 * until the next FFI call on the same thread.
 */
const char *ff_last_error(void);

/**
 * ABI version of this header/library pair.
 */
uint32_t ff_abi_version(void);

/**
 * Generate a synthetic scene directory (views, depths, manifest).
 *
 * # Safety
 * `preset` and `out_dir` must be valid NUL-terminated strings.
 */
FfStatus ff_synth_scene(const char *preset,
                        uint32_t views,
                        double baseline_deg,
                        uint32_t width,
                        uint32_t height,
                        uint64_t seed,
                        const char *out_dir);

/**
 * Train on a scene directory using a config file; writes a checkpoint.
 * Blocking. `coarse_ckpt` may be null (required for the fine stage).
 *
 * # Safety
 * All non-null pointers must be valid NUL-terminated strings.
 */
FfStatus ff_train(const char *scene_dir,
                  const char *config_path,
                  const char *coarse_ckpt,
                  const char *out_ckpt);

/**
 * Open a renderer over a scene directory and a checkpoint.
 *
 * # Safety
 * `scene_dir`/`ckpt_path` must be valid strings; `out` must be a valid
 * pointer to receive the handle. Close with `ff_renderer_close`.
 */
FfStatus ff_renderer_open(const char *scene_dir,
                          const char *ckpt_path,
                          uint32_t input_views,
                          FfRenderer **out);

/**
 * # Safety
 * `handle` must come from `ff_renderer_open` and not be closed twice.
 */
void ff_renderer_close(FfRenderer *handle);

/**
 * Number of views in the scene behind a renderer.
 *
 * # Safety
 * `handle` must be a live renderer handle; `out` a valid pointer.
 */
FfStatus ff_renderer_view_count(const FfRenderer *handle, uint32_t *out);

/**
 * Width/height of a view.
 *
 * # Safety
 * `handle` live; `w`/`h` valid pointers.
 */
FfStatus ff_renderer_image_size(const FfRenderer *handle,
                                uint32_t view_id,
                                uint32_t *w,
                                uint32_t *h);

/**
 * Render a scene view into a caller buffer of 3*w*h interleaved RGB bytes
 * (row-major, top-left origin). `patches` > 1 uses patch-based decoding
 * with the given overlap (in volume cells).
 *
 * # Safety
 * `handle` live; `rgb_out` must point to at least `rgb_len` bytes.
 */
FfStatus ff_renderer_render_view(FfRenderer *handle,
                                 uint32_t view_id,
                                 uint32_t patches,
                                 uint32_t overlap,
                                 uint8_t *rgb_out,
                                 size_t rgb_len);

/**
 * Render a view and score it against its ground-truth image.
 *
 * # Safety
 * `handle` live; `psnr`/`ssim` valid pointers.
 */
FfStatus ff_renderer_eval_view(FfRenderer *handle, uint32_t view_id, double *psnr, double *ssim);

/**
 * PSNR between two interleaved RGB byte buffers of the same size.
 *
 * # Safety
 * Both buffers must hold `3*w*h` bytes; `out` a valid pointer.
 */
FfStatus ff_psnr_rgb8(const uint8_t *a, const uint8_t *b, uint32_t w, uint32_t h, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FRUSTUMFIELD_H */
