#ifndef DIAE_H
#define DIAE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DiaeStatus {
  DIAE_STATUS_OK = 0,
  DIAE_STATUS_NULL_POINTER = 1,
  DIAE_STATUS_INVALID_ARGUMENT = 2,
  DIAE_STATUS_DIMENSION_MISMATCH = 3,
  DIAE_STATUS_NUMERICAL = 4,
  DIAE_STATUS_FORMAT = 5,
  DIAE_STATUS_IO = 6,
  DIAE_STATUS_PANIC = 7,
} DiaeStatus;

// Opaque handle to a trained stack.
typedef struct DiaeModel DiaeModel;

// Per-layer training settings. `bregman_rule`: 0 paper, 1 standard.
// `activation`: 0 identity, 1 tanh.
typedef struct DiaeTrainConfig {
  double lambda;
  double mu;
  uint32_t max_iter;
  double tol;
  double damping;
  uint64_t seed;
  uint8_t bregman_rule;
  uint8_t activation;
  double tanh_clamp;
} DiaeTrainConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *diae_last_error(void);

struct DiaeTrainConfig diae_train_config_default(void);

// Loads a model file into a new handle written to `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum DiaeStatus diae_model_load(const char *path, struct DiaeModel **out);

// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum DiaeStatus diae_model_save(const struct DiaeModel *model, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void diae_model_free(struct DiaeModel *model);

// # Safety
// `model` must be null or a live handle.
size_t diae_model_num_layers(const struct DiaeModel *model);

// # Safety
// `model` must be null or a live handle.
size_t diae_model_input_dim(const struct DiaeModel *model);

// # Safety
// `model` must be null or a live handle.
size_t diae_model_output_dim(const struct DiaeModel *model);

// Encodes `n_samples` inputs of width `input_dim` into `out`, which must
// hold `n_samples * output_dim` values, samples-major.
//
// # Safety
// `x` must hold `n_samples * input_dim` values and `out` `out_len` values.
enum DiaeStatus diae_model_encode(const struct DiaeModel *model,
                                  const double *x,
                                  size_t n_samples,
                                  size_t input_dim,
                                  double *out,
                                  size_t out_len);

// Trains a greedy stack. `cfg` holds one config shared by all layers, or
// `n_layers` configs when `n_cfg == n_layers`.
//
// # Safety
// `x` must hold `n_samples * dim` values, `labels` `n_samples` values,
// `widths` `n_layers` values and `cfg` `n_cfg` values; `out` must be writable.
enum DiaeStatus diae_train_stack(const double *x,
                                 size_t n_samples,
                                 size_t dim,
                                 const uint32_t *labels,
                                 size_t classes,
                                 const size_t *widths,
                                 size_t n_layers,
                                 const struct DiaeTrainConfig *cfg,
                                 size_t n_cfg,
                                 struct DiaeModel **out);

// k-nearest-neighbour labels for `n_query` queries written to `out`.
//
// # Safety
// Buffers must hold `n_train * dim`, `n_train`, `n_query * dim` and
// `n_query` values respectively.
enum DiaeStatus diae_knn_predict(const double *train,
                                 const uint32_t *train_labels,
                                 size_t n_train,
                                 size_t dim,
                                 const double *query,
                                 size_t n_query,
                                 size_t k,
                                 uint32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIAE_H */
