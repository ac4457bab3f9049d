#ifndef LEARNET_H
#define LEARNET_H

/* Generated by cbindgen from learnet-capi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible function.
typedef enum LearnetStatus {
  LEARNET_STATUS_OK = 0,
  LEARNET_STATUS_NULL_ARGUMENT = 1,
  LEARNET_STATUS_INVALID_UTF8 = 2,
  LEARNET_STATUS_IO_ERROR = 3,
  LEARNET_STATUS_BAD_MODEL_FILE = 4,
  LEARNET_STATUS_BAD_CONFIG = 5,
  LEARNET_STATUS_SHAPE_MISMATCH = 6,
  LEARNET_STATUS_UNSUPPORTED = 7,
  LEARNET_STATUS_INTERNAL_PANIC = 8,
} LearnetStatus;

// Opaque handle to a loaded model.
typedef struct LearnetModel LearnetModel;

// Opaque handle to a pupil network induced by one bound exemplar.
typedef struct LearnetPupil LearnetPupil;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *learnet_version(void);

// Message describing the most recent error on this thread. The pointer is
// valid until the next failing call on the same thread.
const char *learnet_last_error_message(void);

// Load a model file. On success `*out` owns the handle; release it with
// [`learnet_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum LearnetStatus learnet_model_load(const char *path, struct LearnetModel **out);

// Write the model back out (byte-identical for identical models).
//
// # Safety
// `model` must come from [`learnet_model_load`]; `path` must be a
// NUL-terminated string.
enum LearnetStatus learnet_model_save(const struct LearnetModel *model, const char *path);

// Release a model handle (NULL is a no-op).
//
// # Safety
// `model` must come from [`learnet_model_load`] and not be freed twice.
void learnet_model_free(struct LearnetModel *model);

// Exemplar/candidate input dimensions of the model.
//
// # Safety
// All pointers must be valid.
enum LearnetStatus learnet_model_input_dims(const struct LearnetModel *model,
                                            size_t *out_h,
                                            size_t *out_w,
                                            size_t *out_c);

// Similarity score of an (exemplar, candidate) pair; both images must be
// `h x w x c` doubles matching the model's input dimensions.
//
// # Safety
// Pointers must be valid and the image buffers at least `h*w*c` long.
enum LearnetStatus learnet_model_score(const struct LearnetModel *model,
                                       const double *exemplar,
                                       const double *candidate,
                                       size_t h,
                                       size_t w,
                                       size_t c,
                                       double *out_score);

// Bind an exemplar once: for meta-network models this runs the parameter
// prediction a single time; the returned pupil then scores any number of
// candidates. Release with [`learnet_pupil_free`].
//
// # Safety
// Pointers must be valid; the exemplar buffer must hold `h*w*c` doubles.
enum LearnetStatus learnet_bind_exemplar(const struct LearnetModel *model,
                                         const double *exemplar,
                                         size_t h,
                                         size_t w,
                                         size_t c,
                                         struct LearnetPupil **out);

// Score one candidate against a bound exemplar.
//
// # Safety
// Pointers must be valid; the candidate buffer must hold `h*w*c` doubles.
enum LearnetStatus learnet_pupil_score(const struct LearnetPupil *pupil,
                                       const double *candidate,
                                       size_t h,
                                       size_t w,
                                       size_t c,
                                       double *out_score);

// Index of the best-scoring candidate among `count` images laid out
// consecutively (each `h*w*c` doubles). Ties break to the lowest index.
//
// # Safety
// `candidates` must hold `count*h*w*c` doubles.
enum LearnetStatus learnet_pupil_best_match(const struct LearnetPupil *pupil,
                                            const double *candidates,
                                            size_t count,
                                            size_t h,
                                            size_t w,
                                            size_t c,
                                            size_t *out_index);

// Dimensions of the score map a `search_h x search_w` input would produce
// (dot-product models only).
//
// # Safety
// Pointers must be valid.
enum LearnetStatus learnet_model_map_dims(const struct LearnetModel *model,
                                          size_t search_h,
                                          size_t search_w,
                                          size_t *out_mh,
                                          size_t *out_mw);

// Cross-correlate the bound exemplar over a larger search image, writing
// the `mh x mw` score map into `out_map` (row-major; capacity `map_cap`).
// Requires the dot-product comparison.
//
// # Safety
// `search` must hold `h*w*c` doubles and `out_map` at least `map_cap`.
enum LearnetStatus learnet_pupil_score_map(const struct LearnetPupil *pupil,
                                           const double *search,
                                           size_t h,
                                           size_t w,
                                           size_t c,
                                           double *out_map,
                                           size_t map_cap,
                                           size_t *out_mh,
                                           size_t *out_mw);

// Release a pupil handle (NULL is a no-op).
//
// # Safety
// `pupil` must come from [`learnet_bind_exemplar`] and not be freed twice.
void learnet_pupil_free(struct LearnetPupil *pupil);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* LEARNET_H */
