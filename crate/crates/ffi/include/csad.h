#ifndef CSAD_H
#define CSAD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum CsadStatus {
  CSAD_STATUS_OK = 0,
  CSAD_STATUS_NULL_ARGUMENT = 1,
  CSAD_STATUS_INVALID_ARGUMENT = 2,
  // File missing or unreadable.
  CSAD_STATUS_IO = 3,
  // File readable but malformed.
  CSAD_STATUS_FORMAT = 4,
  CSAD_STATUS_CLASS_OUT_OF_RANGE = 5,
  CSAD_STATUS_TOO_FEW_SAMPLES = 6,
  CSAD_STATUS_UNSUPPORTED = 7,
  CSAD_STATUS_BUFFER_TOO_SMALL = 8,
  CSAD_STATUS_INTERNAL = 9,
  CSAD_STATUS_PANIC = 10,
} CsadStatus;

// Row-major `f64` anomaly map.
typedef struct CsadAnomalyMap CsadAnomalyMap;

// Per-pixel class map, 0 is background.
typedef struct CsadLabelMap CsadLabelMap;

// A fitted model loaded from a model directory.
typedef struct CsadModel CsadModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *csad_version(void);

// Message of the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *csad_last_error(void);

// Loads a model directory written by `csad fit`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum CsadStatus csad_model_load(const char *dir, struct CsadModel **out);

// # Safety
// `model` must come from [`csad_model_load`] or be NULL.
void csad_model_free(struct CsadModel *model);

// Number of foreground classes; valid label values are `0..=n`. 0 for NULL.
//
// # Safety
// `model` must be a live handle or NULL.
size_t csad_model_n_classes(const struct CsadModel *model);

// Number of calibrated score streams.
//
// # Safety
// `model` must be a live handle or NULL.
size_t csad_model_stream_count(const struct CsadModel *model);

// Name of stream `index` (e.g. `ph_256`, `lgst`), owned by the model; NULL
// when out of range.
//
// # Safety
// `model` must be a live handle or NULL.
const char *csad_model_stream_name(const struct CsadModel *model, size_t index);

// Maps a segmenter label map into model classes. Identity when the model
// carries no remap.
//
// # Safety
// Handles must be live; `out` must be a valid pointer.
enum CsadStatus csad_model_remap(const struct CsadModel *model,
                                 const struct CsadLabelMap *map,
                                 struct CsadLabelMap **out);

// Scores one label map (already in model classes). `lgst` may be NULL.
//
// When `streams_out` is non-NULL it receives one raw score per stream in
// [`csad_model_stream_name`] order, NaN for streams not computed; it must
// hold at least `csad_model_stream_count` values. `fused_out` may be NULL.
//
// # Safety
// Handles must be live; buffers must be valid for the stated lengths.
enum CsadStatus csad_model_score(const struct CsadModel *model,
                                 const struct CsadLabelMap *map,
                                 const struct CsadAnomalyMap *lgst,
                                 double *streams_out,
                                 size_t streams_len,
                                 double *fused_out);

// Anomaly maps for one label map. Any of the three outputs may be NULL.
//
// # Safety
// Handles must be live; non-NULL outputs must be valid pointers.
enum CsadStatus csad_model_localize(const struct CsadModel *model,
                                    const struct CsadLabelMap *map,
                                    const struct CsadAnomalyMap *lgst,
                                    struct CsadAnomalyMap **patch_hist_out,
                                    struct CsadAnomalyMap **lgst_out,
                                    struct CsadAnomalyMap **merged_out);

// Copies `width * height` class indices into a new label map.
//
// # Safety
// `pixels` must hold `width * height` bytes; `out` must be valid.
enum CsadStatus csad_label_map_new(size_t width,
                                   size_t height,
                                   const uint8_t *pixels,
                                   struct CsadLabelMap **out);

// Reads an 8-bit or 16-bit binary PGM label map.
//
// # Safety
// `path` must be NUL-terminated; `out` must be valid.
enum CsadStatus csad_label_map_read(const char *path, struct CsadLabelMap **out);

// # Safety
// `map` must be a live handle or NULL.
size_t csad_label_map_width(const struct CsadLabelMap *map);

// # Safety
// `map` must be a live handle or NULL.
size_t csad_label_map_height(const struct CsadLabelMap *map);

// Row-major pixels, `width * height` bytes owned by the map.
//
// # Safety
// `map` must be a live handle or NULL.
const uint8_t *csad_label_map_pixels(const struct CsadLabelMap *map);

// # Safety
// `map` must come from this library or be NULL.
void csad_label_map_free(struct CsadLabelMap *map);

// Copies `width * height` finite values into a new anomaly map.
//
// # Safety
// `values` must hold `width * height` doubles; `out` must be valid.
enum CsadStatus csad_anomaly_map_new(size_t width,
                                     size_t height,
                                     const double *values,
                                     struct CsadAnomalyMap **out);

// Combined LGST anomaly map for image `id`, computed from the four tensors
// listed in a tensor manifest. Tensor paths resolve against the manifest's
// directory.
//
// # Safety
// Strings must be NUL-terminated; `out` must be valid.
enum CsadStatus csad_anomaly_map_from_tensors(const char *manifest,
                                              const char *id,
                                              struct CsadAnomalyMap **out);

// # Safety
// `map` must be a live handle or NULL.
size_t csad_anomaly_map_width(const struct CsadAnomalyMap *map);

// # Safety
// `map` must be a live handle or NULL.
size_t csad_anomaly_map_height(const struct CsadAnomalyMap *map);

// Row-major values, `width * height` doubles owned by the map.
//
// # Safety
// `map` must be a live handle or NULL.
const double *csad_anomaly_map_values(const struct CsadAnomalyMap *map);

// Writes the map as a 16-bit PGM plus its JSON range sidecar.
//
// # Safety
// `map` must be live; `path` must be NUL-terminated.
enum CsadStatus csad_anomaly_map_write16(const struct CsadAnomalyMap *map, const char *path);

// # Safety
// `map` must come from this library or be NULL.
void csad_anomaly_map_free(struct CsadAnomalyMap *map);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSAD_H */
