#ifndef GRIDLINE_H
#define GRIDLINE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Feature space of an anchor set.
 */
typedef enum GlSpace {
  GL_SPACE_CART = 0,
  GL_SPACE_MR = 1,
  GL_SPACE_MP = 2,
  GL_SPACE_DIR = 3,
} GlSpace;

/**
 * Result of every call.
 */
typedef enum GlStatus {
  GL_STATUS_OK = 0,
  GL_STATUS_NULL_POINTER = 1,
  GL_STATUS_INVALID_UTF8 = 2,
  GL_STATUS_INVALID_ARGUMENT = 3,
  GL_STATUS_INVALID_GEOMETRY = 4,
  GL_STATUS_OUT_OF_BOUNDS = 5,
  GL_STATUS_SHAPE_MISMATCH = 6,
  GL_STATUS_NON_FINITE = 7,
  GL_STATUS_PARSE = 8,
  GL_STATUS_IO = 9,
  GL_STATUS_DIVERGED = 10,
  GL_STATUS_PANIC = 11,
} GlStatus;

/**
 * Opaque anchor set.
 */
typedef struct GlAnchorSet GlAnchorSet;

/**
 * Opaque trained model.
 */
typedef struct GlModel GlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the
 * library and valid until the next failing call on the same thread.
 */
const char *gl_last_error(void);

/**
 * Library version as a static string.
 */
const char *gl_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` is null or a string produced by this library that was not yet freed.
 */
void gl_string_free(char *s);

/**
 * Minimum-cost assignment of a row-major `rows x cols` cost matrix.
 * `row_to_col` receives `rows` entries, `-1` for unmatched rows.
 *
 * # Safety
 * `costs` holds `rows * cols` doubles, `row_to_col` has room for `rows`
 * entries, `total_cost` is null or writable.
 */
enum GlStatus gl_hungarian(const double *costs,
                           size_t rows,
                           size_t cols,
                           ptrdiff_t *row_to_col,
                           double *total_cost);

/**
 * `[su, sv, eu, ev]` to `[mu, mv, du, dv]`.
 *
 * # Safety
 * `cart` and `mr` point to four doubles each.
 */
enum GlStatus gl_cart_to_mr(const double *cart, double *mr);

/**
 * `[mu, mv, du, dv]` to `[su, sv, eu, ev]`; fails when an endpoint leaves the cell.
 *
 * # Safety
 * `mr` and `cart` point to four doubles each.
 */
enum GlStatus gl_mr_to_cart(const double *mr, double *cart);

/**
 * Splits an image-space polyline of `n` `(u, v)` vertices into per-cell
 * segments, written to `out_json` as a JSON array. `label < 0` means
 * unlabeled.
 *
 * # Safety
 * `points` holds `2 * n` doubles, `out_json` is writable.
 */
enum GlStatus gl_split_polyline(const double *points,
                                size_t n,
                                ptrdiff_t label,
                                size_t width,
                                size_t height,
                                size_t cell_size,
                                size_t classes,
                                char **out_json);

/**
 * Evenly spread anchors in `space`.
 *
 * # Safety
 * `out_set` is writable.
 */
enum GlStatus gl_anchors_uniform(enum GlSpace space,
                                 size_t predictors,
                                 struct GlAnchorSet **out_set);

/**
 * Anchor set from its JSON file format.
 *
 * # Safety
 * `json` is a NUL-terminated string, `out_set` is writable.
 */
enum GlStatus gl_anchors_from_json(const char *json, struct GlAnchorSet **out_set);

/**
 * Number of anchors, 0 for a null handle.
 *
 * # Safety
 * `set` is null or a live handle.
 */
size_t gl_anchors_len(const struct GlAnchorSet *set);

/**
 * Anchor set as JSON.
 *
 * # Safety
 * `set` is a live handle, `out_json` is writable.
 */
enum GlStatus gl_anchors_to_json(const struct GlAnchorSet *set, char **out_json);

/**
 * # Safety
 * `set` is null or a handle not yet freed.
 */
void gl_anchors_free(struct GlAnchorSet *set);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` is a NUL-terminated string, `out_model` is writable.
 */
enum GlStatus gl_model_load(const char *path, struct GlModel **out_model);

/**
 * Model from checkpoint JSON text.
 *
 * # Safety
 * `json` is a NUL-terminated string, `out_model` is writable.
 */
enum GlStatus gl_model_from_json(const char *json, struct GlModel **out_model);

/**
 * Cell size in pixels, 0 for a null handle.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t gl_model_cell_size(const struct GlModel *model);

/**
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void gl_model_free(struct GlModel *model);

/**
 * Runs the model on a row-major 8-bit raster and writes the segments with
 * confidence above `threshold` as one annotation record in JSON.
 *
 * # Safety
 * `model` is a live handle, `pixels` holds `width * height` bytes,
 * `out_json` is writable.
 */
enum GlStatus gl_model_predict(const struct GlModel *model,
                               const uint8_t *pixels,
                               size_t width,
                               size_t height,
                               double threshold,
                               char **out_json);

/**
 * Suppresses duplicate segments of one annotation record with the default
 * tolerances for `cell_size`.
 *
 * # Safety
 * `record_json` is a NUL-terminated string, `out_json` is writable.
 */
enum GlStatus gl_nms(const char *record_json, size_t cell_size, double threshold, char **out_json);

/**
 * Scores JSON-lines predictions against JSON-lines ground truth. `options_json`
 * may be null for defaults; the metrics report is written as JSON.
 *
 * # Safety
 * String arguments are NUL-terminated, `out_json` is writable.
 */
enum GlStatus gl_evaluate(const char *predictions_jsonl,
                          const char *truth_jsonl,
                          const char *options_json,
                          char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRIDLINE_H */
