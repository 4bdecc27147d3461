#ifndef CHAIR_H
#define CHAIR_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum ChairStatus {
  CHAIR_STATUS_OK = 0,
  CHAIR_STATUS_NULL_POINTER = 1,
  CHAIR_STATUS_INVALID_ARGUMENT = 2,
  CHAIR_STATUS_DIMENSION = 3,
  CHAIR_STATUS_IO = 4,
  CHAIR_STATUS_CHECKPOINT = 5,
  CHAIR_STATUS_STATE = 6,
  CHAIR_STATUS_BUFFER_TOO_SMALL = 7,
  CHAIR_STATUS_PANIC = 8,
} ChairStatus;

/**
 * Normalized embedding index.
 */
typedef struct ChairGallery ChairGallery;

/**
 * Loaded checkpoint: model plus intervention values.
 */
typedef struct ChairModel ChairModel;

typedef struct ChairDims {
  size_t input_dim;
  size_t hidden;
  size_t embed_dim;
  size_t num_concepts;
  size_t num_classes;
} ChairDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *chair_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *chair_version(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ChairStatus chair_model_load(const char *path, struct ChairModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`chair_model_load`] and not be used afterwards.
 */
void chair_model_free(struct ChairModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum ChairStatus chair_model_dims(const struct ChairModel *model, struct ChairDims *out);

/**
 * Writes whether the model has a concept layer (1) or not (0).
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum ChairStatus chair_model_has_concepts(const struct ChairModel *model, uint8_t *out);

/**
 * Per-concept intervention values (`num_concepts` each).
 *
 * # Safety
 * Buffers must hold `len` doubles.
 */
enum ChairStatus chair_model_intervention_values(const struct ChairModel *model,
                                                 double *high,
                                                 double *low,
                                                 size_t len);

/**
 * Concept logits and activations for one input.
 *
 * # Safety
 * `x` must hold `x_len` doubles; outputs must hold `k_len` doubles.
 */
enum ChairStatus chair_model_concepts(const struct ChairModel *model,
                                      const double *x,
                                      size_t x_len,
                                      double *logits_out,
                                      double *activations_out,
                                      size_t k_len);

/**
 * Explicit intervention: `forced[i]` is -1 to keep `c_pred[i]`, 0 to force
 * absent, 1 to force present.
 *
 * # Safety
 * `c_pred`, `forced` and `out` must hold `k_len` elements.
 */
enum ChairStatus chair_intervene_explicit(const struct ChairModel *model,
                                          const double *c_pred,
                                          const int8_t *forced,
                                          size_t k_len,
                                          double *out);

/**
 * Retrieval embedding of `x`. `c_hat` (nullable) overrides the predicted
 * concept activations.
 *
 * # Safety
 * `x` holds `x_len` doubles, `c_hat` `c_len` doubles or is null, `out`
 * holds `out_len` doubles.
 */
enum ChairStatus chair_model_embed(const struct ChairModel *model,
                                   const double *x,
                                   size_t x_len,
                                   const double *c_hat,
                                   size_t c_len,
                                   double *out,
                                   size_t out_len);

/**
 * Predicted class of `x`, optionally with concept override `c_hat`.
 *
 * # Safety
 * As for [`chair_model_embed`]; `out_class` must be writable.
 */
enum ChairStatus chair_model_predict(const struct ChairModel *model,
                                     const double *x,
                                     size_t x_len,
                                     const double *c_hat,
                                     size_t c_len,
                                     size_t *out_class);

/**
 * Gallery from `n` row-major embeddings of width `dim`.
 *
 * # Safety
 * `ids` and `labels` hold `n` elements, `embeddings` `n·dim`; `out` is
 * writable.
 */
enum ChairStatus chair_gallery_from_embeddings(const uint64_t *ids,
                                               const size_t *labels,
                                               const double *embeddings,
                                               size_t n,
                                               size_t dim,
                                               struct ChairGallery **out);

/**
 * Gallery over the unseen-class split of a JSONL dataset, with
 * concepts corrected at `fraction` using RNG `seed`.
 *
 * # Safety
 * `model` is live, `data_path` NUL-terminated, `out` writable.
 */
enum ChairStatus chair_gallery_from_dataset(const struct ChairModel *model,
                                            const char *data_path,
                                            double fraction,
                                            uint64_t seed,
                                            struct ChairGallery **out);

/**
 * Releases a gallery. Null is ignored.
 *
 * # Safety
 * `gallery` must come from a `chair_gallery_*` constructor.
 */
void chair_gallery_free(struct ChairGallery *gallery);

/**
 * # Safety
 * `gallery` is live; `out` writable.
 */
enum ChairStatus chair_gallery_len(const struct ChairGallery *gallery, size_t *out);

/**
 * Cosine-distance top-k. `exclude_id < 0` disables leave-one-out. Writes
 * up to `k` results and their count to `n_out`; `truncated_out`
 * (nullable) receives 1 when fewer than `k` were available.
 *
 * # Safety
 * `query` holds `dim` doubles; each output buffer holds `k` elements.
 */
enum ChairStatus chair_gallery_top_k(const struct ChairGallery *gallery,
                                     const double *query,
                                     size_t dim,
                                     size_t k,
                                     int64_t exclude_id,
                                     uint64_t *ids_out,
                                     double *distances_out,
                                     size_t *labels_out,
                                     size_t *n_out,
                                     uint8_t *truncated_out);

/**
 * Recall@k over `n` queries whose retrieved labels are given row-major
 * (`n·k`).
 *
 * # Safety
 * `retrieved` holds `n·k` labels, `truth` `n`; `out` writable.
 */
enum ChairStatus chair_recall_at_k(const size_t *retrieved,
                                   size_t n,
                                   size_t k,
                                   const size_t *truth,
                                   double *out);

/**
 * RecallAccuracy@k; layout as for [`chair_recall_at_k`].
 *
 * # Safety
 * As for [`chair_recall_at_k`].
 */
enum ChairStatus chair_recall_accuracy_at_k(const size_t *retrieved,
                                            size_t n,
                                            size_t k,
                                            const size_t *truth,
                                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHAIR_H */
