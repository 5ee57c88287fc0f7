#ifndef RETSEG_H
#define RETSEG_H

/* Generated by cbindgen from the retseg-ffi crate. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RetsegStatus {
  RETSEG_STATUS_OK = 0,
  RETSEG_STATUS_NULL_POINTER = 1,
  RETSEG_STATUS_INVALID_ARGUMENT = 2,
  RETSEG_STATUS_IO = 3,
  RETSEG_STATUS_FORMAT = 4,
  RETSEG_STATUS_DIMENSION_MISMATCH = 5,
  RETSEG_STATUS_EMPTY_DATABASE = 6,
  RETSEG_STATUS_BUFFER_TOO_SMALL = 7,
  RETSEG_STATUS_INTERNAL = 8,
  RETSEG_STATUS_PANIC = 9,
} RetsegStatus;

/**
 * Loaded feature database with its search index.
 */
typedef struct RetsegDatabase RetsegDatabase;

/**
 * Loaded class vocabulary.
 */
typedef struct RetsegVocabulary RetsegVocabulary;

typedef struct RetsegParams {
  double alpha;
  double beta;
  double gamma;
  size_t k;
  double temperature;
} RetsegParams;

typedef struct RetsegNeighbor {
  float distance;
  uint32_t label_id;
  uint64_t record_index;
} RetsegNeighbor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *retseg_last_error(void);

/**
 * Default blend weights, k and temperature.
 */
struct RetsegParams retseg_params_default(void);

/**
 * Loads a vocabulary JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RetsegStatus retseg_vocabulary_load(const char *path, struct RetsegVocabulary **out);

/**
 * # Safety
 * `vocab` must be a handle from [`retseg_vocabulary_load`] or null.
 */
size_t retseg_vocabulary_len(const struct RetsegVocabulary *vocab);

/**
 * # Safety
 * `vocab` must be a handle from [`retseg_vocabulary_load`] or null, and
 * not used afterwards.
 */
void retseg_vocabulary_free(struct RetsegVocabulary *vocab);

/**
 * Loads an RFDB file and builds an exact (`approximate == false`) or
 * graph index with default parameters.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RetsegStatus retseg_database_load(const char *path,
                                       bool approximate,
                                       struct RetsegDatabase **out);

/**
 * # Safety
 * `db` must be a handle from [`retseg_database_load`] or null.
 */
size_t retseg_database_len(const struct RetsegDatabase *db);

/**
 * # Safety
 * `db` must be a handle from [`retseg_database_load`] or null.
 */
size_t retseg_database_dim(const struct RetsegDatabase *db);

/**
 * # Safety
 * `db` must be a handle from [`retseg_database_load`] or null, and not
 * used afterwards.
 */
void retseg_database_free(struct RetsegDatabase *db);

/**
 * Up to `k` nearest records to `key`, nearest first. Writes at most
 * `capacity` neighbors and their number to `count`.
 *
 * # Safety
 * `key` must hold `key_len` floats, `out` room for `capacity` neighbors,
 * and `count` must be valid.
 */
enum RetsegStatus retseg_database_query(const struct RetsegDatabase *db,
                                        const float *key,
                                        size_t key_len,
                                        size_t k,
                                        struct RetsegNeighbor *out,
                                        size_t capacity,
                                        size_t *count);

/**
 * Pools a row-major feature map (`height_patches * width_patches * dim`
 * floats) under a run-length mask of `run_count` (start, length) pairs into
 * a unit vector of `dim` floats.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum RetsegStatus retseg_mask_pool(const float *features,
                                   size_t height_patches,
                                   size_t width_patches,
                                   size_t dim,
                                   size_t patch_size,
                                   size_t mask_height,
                                   size_t mask_width,
                                   const uint32_t *runs,
                                   size_t run_count,
                                   float *out);

/**
 * Blends `n` per-class path scores into `out_oov` and `out_final`.
 *
 * # Safety
 * Score arrays and `seen` must hold `n` values; outputs room for `n`.
 */
enum RetsegStatus retseg_ensemble(const double *s_clip,
                                  const double *s_ret,
                                  const double *s_iv,
                                  const bool *seen,
                                  size_t n,
                                  struct RetsegParams params,
                                  double *out_oov,
                                  double *out_final);

/**
 * Final per-class scores of one pooled segment feature, with the identity
 * projection. `out` must have room for one score per vocabulary class.
 *
 * # Safety
 * Handles must be live; `feature` must hold `feature_len` floats and `out`
 * room for `out_len` doubles.
 */
enum RetsegStatus retseg_classify(const struct RetsegDatabase *db,
                                  const struct RetsegVocabulary *vocab,
                                  const float *feature,
                                  size_t feature_len,
                                  struct RetsegParams params,
                                  double *out,
                                  size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RETSEG_H */
