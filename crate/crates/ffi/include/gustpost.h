#ifndef GUSTPOST_H
#define GUSTPOST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Mode bits for `gp_model_train`.
 */
#define GP_MODE_PERSISTENCE 1

#define GP_MODE_ERA_FLAGS 2

#define GP_MODE_JOINT 4

#define GP_MODE_POST_CHANGE 8

typedef enum GpStatus {
  GP_STATUS_OK = 0,
  GP_STATUS_NULL_POINTER = 1,
  GP_STATUS_INVALID_ARGUMENT = 2,
  GP_STATUS_IO = 3,
  GP_STATUS_PARSE = 4,
  GP_STATUS_INSUFFICIENT_DATA = 5,
  GP_STATUS_MISSING_INPUT = 6,
  GP_STATUS_MODEL = 7,
  GP_STATUS_NUMERIC = 8,
  GP_STATUS_PANIC = 9,
} GpStatus;

/**
 * Loaded forecast archive.
 */
typedef struct GpDataset GpDataset;

/**
 * Trained postprocessing model.
 */
typedef struct GpModel GpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *gp_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next gp_ call on the same thread.
 */
const char *gp_last_error(void);

/**
 * Loads an archive directory (archive.csv + manifest.toml) or an archive CSV
 * with manifest.toml beside it.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GpStatus gp_dataset_load(const char *path, struct GpDataset **out);

/**
 * Number of accepted cases and rejected rows.
 *
 * # Safety
 * `dataset` must come from `gp_dataset_load`; out pointers may be null.
 */
enum GpStatus gp_dataset_size(const struct GpDataset *dataset, size_t *cases, size_t *rejected);

/**
 * # Safety
 * `dataset` must come from `gp_dataset_load` or be null.
 */
void gp_dataset_free(struct GpDataset *dataset);

/**
 * Trains `method` ("mosref", "emos", "emos_gb", "drn", "bqn") on every case
 * of the dataset. `mode` is a combination of the GP_MODE_ bits.
 *
 * # Safety
 * `dataset` must be a valid handle, `method` a NUL-terminated string and
 * `out` a valid pointer.
 */
enum GpStatus gp_model_train(const struct GpDataset *dataset,
                             const char *method,
                             uint32_t mode,
                             uint64_t seed,
                             struct GpModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GpStatus gp_model_load(const char *path, struct GpModel **out);

/**
 * # Safety
 * `model` must be a valid handle and `path` a NUL-terminated string.
 */
enum GpStatus gp_model_save(const struct GpModel *model, const char *path);

/**
 * # Safety
 * `model` must come from `gp_model_train` or `gp_model_load`, or be null.
 */
void gp_model_free(struct GpModel *model);

/**
 * Exceedance probabilities P(gust > t) of dataset case `case_index` for the
 * `n` increasing thresholds, written to `probs` (length `n`).
 *
 * # Safety
 * Handles must be valid; `thresholds` and `probs` must hold `n` values.
 */
enum GpStatus gp_model_predict(const struct GpModel *model,
                               const struct GpDataset *dataset,
                               size_t case_index,
                               const double *thresholds,
                               size_t n,
                               double *probs);

/**
 * Mean Brier score of `n` probability forecasts against 0/1 outcomes.
 *
 * # Safety
 * `forecasts` and `outcomes` must hold `n` values; `out` must be valid.
 */
enum GpStatus gp_brier_score(const double *forecasts,
                             const double *outcomes,
                             size_t n,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GUSTPOST_H */
