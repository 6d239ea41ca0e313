#ifndef QPROBE_H
#define QPROBE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result codes shared by every function.
typedef enum QpStatus {
  QP_STATUS_OK = 0,
  QP_STATUS_IO = 1,
  QP_STATUS_FORMAT = 2,
  QP_STATUS_PARSE = 3,
  QP_STATUS_VALIDATION = 4,
  QP_STATUS_ARGUMENT = 5,
  QP_STATUS_SHAPE = 6,
  QP_STATUS_FORGE = 7,
  QP_STATUS_REGION = 8,
  QP_STATUS_MISSING_IDS = 9,
  QP_STATUS_NETWORK = 10,
  QP_STATUS_SCHEMA = 11,
  QP_STATUS_MISSING_ENTRY = 12,
  QP_STATUS_NULL_POINTER = 13,
  QP_STATUS_UTF8 = 14,
  QP_STATUS_PANIC = 15,
} QpStatus;

// Opaque benchmark manifest.
typedef struct QpManifest QpManifest;

// Opaque image handle.
typedef struct QpRaster QpRaster;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Code of the most recent failure on this thread, `Ok` if the last call succeeded.
enum QpStatus qp_last_error_code(void);

// Message of the most recent failure on this thread, or NULL.
//
// The pointer stays valid until the next qprobe call on the same thread.
const char *qp_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *qp_version(void);

// # Safety
// `s` must come from a qprobe function that returns an owned string, or be NULL.
void qp_string_free(char *s);

// # Safety
// `data` must hold `width * height * channels` readable doubles in row-major,
// channel-interleaved order; `out` must be writable.
enum QpStatus qp_raster_new(size_t width,
                            size_t height,
                            size_t channels,
                            const double *data,
                            struct QpRaster **out);

// # Safety
// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
enum QpStatus qp_raster_load(const char *path, struct QpRaster **out);

// # Safety
// `raster` must be a live handle; `path` a NUL-terminated UTF-8 string.
enum QpStatus qp_raster_save(const struct QpRaster *raster, const char *path);

// Width, height and channel count. Any output pointer may be NULL.
//
// # Safety
// `raster` must be a live handle.
enum QpStatus qp_raster_shape(const struct QpRaster *raster,
                              size_t *width,
                              size_t *height,
                              size_t *channels);

// Borrowed pointer to the samples, valid while the handle lives.
//
// # Safety
// `raster` must be a live handle and `len` writable.
enum QpStatus qp_raster_data(const struct QpRaster *raster, const double **data, size_t *len);

// # Safety
// `raster` must come from this library and not be freed twice.
void qp_raster_free(struct QpRaster *raster);

// # Safety
// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
enum QpStatus qp_manifest_read(const char *path, struct QpManifest **out);

// # Safety
// `json` must be a NUL-terminated UTF-8 string; `out` must be writable.
enum QpStatus qp_manifest_parse(const char *json, struct QpManifest **out);

// Number of items, 0 for NULL.
//
// # Safety
// `manifest` must be a live handle or NULL.
size_t qp_manifest_len(const struct QpManifest *manifest);

// Item `index` as a JSON object string owned by the caller.
//
// # Safety
// `manifest` must be a live handle; `out` must be writable.
enum QpStatus qp_manifest_item_json(const struct QpManifest *manifest, size_t index, char **out);

// # Safety
// `manifest` must come from this library and not be freed twice.
void qp_manifest_free(struct QpManifest *manifest);

// Degrades `source` into a new raster plus its manifest entry as JSON.
//
// `config_json` may be NULL for the default forge settings.
//
// # Safety
// `source` must be a live handle, string arguments NUL-terminated UTF-8, and
// both outputs writable.
enum QpStatus qp_forge_item(const struct QpRaster *source,
                            const char *config_json,
                            const char *id,
                            struct QpRaster **out_raster,
                            char **out_item_json);

// MOS of a defect list given as a JSON array.
//
// # Safety
// `defects_json` must be NUL-terminated UTF-8; `out` must be writable.
enum QpStatus qp_synthesize_mos(const char *defects_json, double image_area, double *out);

// # Safety
// `preds` and `gts` must each hold `n` readable doubles; `out` must be writable.
enum QpStatus qp_srcc(const double *preds, const double *gts, size_t n, double *out);

// # Safety
// `preds` and `gts` must each hold `n` readable doubles; `out` must be writable.
enum QpStatus qp_plcc(const double *preds, const double *gts, size_t n, double *out);

// Per-source-tag evaluation report as JSON.
//
// `predictions_json` is an array of `{"id": .., "score": ..}` objects.
//
// # Safety
// `manifest` must be a live handle, `predictions_json` NUL-terminated UTF-8,
// and `out` writable.
enum QpStatus qp_evaluate(const struct QpManifest *manifest,
                          const char *predictions_json,
                          char **out);

// # Safety
// `out` must be writable.
enum QpStatus qp_acc_reward(double s_pred, double s_mos, double tau, double *out);

// Intersection over union of two boxes.
double qp_iou(uint32_t ax,
              uint32_t ay,
              uint32_t aw,
              uint32_t ah,
              uint32_t bx,
              uint32_t by,
              uint32_t bw,
              uint32_t bh);

// 1 when `trace` follows the reasoning-trace grammar, else 0. NULL scores 0.
//
// # Safety
// `trace` must be NUL-terminated or NULL.
double qp_format_reward(const char *trace);

// # Safety
// `out` must be writable.
enum QpStatus qp_rank_reward(double p, double y, double *out);

// Thurstone rewards of group `i` against group `j`, written to `out` (`k` slots).
//
// # Safety
// `group_i`, `group_j` and `out` must each hold `k` doubles.
enum QpStatus qp_pair_rewards(const double *group_i,
                              const double *group_j,
                              size_t k,
                              double y,
                              double gamma,
                              double *out);

// Group-normalized advantages, written to `out` (`n` slots).
//
// # Safety
// `rewards` and `out` must each hold `n` doubles.
enum QpStatus qp_group_advantages(const double *rewards, size_t n, double *out);

// Largest absolute difference between `raster` and its Haar round trip.
//
// # Safety
// `raster` must be a live handle; `out` must be writable.
enum QpStatus qp_wavelet_roundtrip_error(const struct QpRaster *raster, size_t levels, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QPROBE_H */
