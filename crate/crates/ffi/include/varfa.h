#ifndef VARFA_H
#define VARFA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible function.
typedef enum VarfaStatus {
  VARFA_STATUS_OK = 0,
  // Invalid configuration or parameter.
  VARFA_STATUS_CONFIG = 2,
  // Malformed or corrupted data.
  VARFA_STATUS_DATA = 3,
  // Non-finite values or undefined metrics.
  VARFA_STATUS_NUMERIC = 4,
  // File system failure.
  VARFA_STATUS_IO = 5,
  // A required pointer argument was null.
  VARFA_STATUS_NULL_ARGUMENT = 10,
  // A string argument was not valid UTF-8.
  VARFA_STATUS_INVALID_UTF8 = 11,
  // A student or question index was out of range.
  VARFA_STATUS_OUT_OF_RANGE = 12,
  // The operation is not available for this model kind.
  VARFA_STATUS_UNSUPPORTED = 13,
  // An internal panic was caught at the boundary.
  VARFA_STATUS_INTERNAL = 14,
} VarfaStatus;

// Packed response matrix.
typedef struct VarfaDataset VarfaDataset;

// Trained model, either point-estimate or variational.
typedef struct VarfaModel VarfaModel;

// Train/test partition of a dataset's observed entries.
typedef struct VarfaSplit VarfaSplit;

// Test-set metrics of a model.
typedef struct VarfaMetrics {
  double accuracy;
  double auc;
  double f1;
  size_t n_test;
  double wall_train_seconds;
} VarfaMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static nul-terminated string.
const char *varfa_version(void);

// Message of the last failure on this thread, or null if none.
//
// The pointer stays valid until the next failing call on this thread.
const char *varfa_last_error_message(void);

// Loads the dataset described by the `[data]` table of a TOML document.
//
// # Safety
// `config_toml` must be a nul-terminated string and `out` a valid pointer.
enum VarfaStatus varfa_dataset_load(const char *config_toml, struct VarfaDataset **out);

// Builds a dataset from row-major `n_students x n_questions` arrays.
// `observed[k] != 0` marks an observed entry whose `values[k]` must be 0 or 1.
//
// # Safety
// `values` and `observed` must point to `n_students * n_questions` elements.
enum VarfaStatus varfa_dataset_from_dense(const double *values,
                                          const uint8_t *observed,
                                          size_t n_students,
                                          size_t n_questions,
                                          struct VarfaDataset **out);

// # Safety
// `dataset` must be null or a handle from this library that is not used afterwards.
void varfa_dataset_free(struct VarfaDataset *dataset);

// Number of students, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle.
size_t varfa_dataset_n_students(const struct VarfaDataset *dataset);

// Number of questions, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle.
size_t varfa_dataset_n_questions(const struct VarfaDataset *dataset);

// Row index of a student id.
//
// # Safety
// `dataset` must be a live handle, `student_id` a nul-terminated string and `out` valid.
enum VarfaStatus varfa_dataset_student_index(const struct VarfaDataset *dataset,
                                             const char *student_id,
                                             size_t *out);

// Splits the observed entries, keeping `train_fraction` of each student's row for training.
//
// # Safety
// `dataset` must be a live handle and `out` valid.
enum VarfaStatus varfa_split_new(const struct VarfaDataset *dataset,
                                 double train_fraction,
                                 uint64_t seed,
                                 struct VarfaSplit **out);

// # Safety
// `split` must be null or a handle from this library that is not used afterwards.
void varfa_split_free(struct VarfaSplit *split);

// Number of training entries, or 0 for a null handle.
//
// # Safety
// `split` must be null or a live handle.
size_t varfa_split_n_train(const struct VarfaSplit *split);

// Number of test entries, or 0 for a null handle.
//
// # Safety
// `split` must be null or a live handle.
size_t varfa_split_n_test(const struct VarfaSplit *split);

// Trains on the training entries. `config_toml` may be null for defaults;
// its `mode`, `hyper` and `train` tables apply.
//
// # Safety
// Handles must be live, `config_toml` null or nul-terminated, `out` valid.
enum VarfaStatus varfa_model_train(const struct VarfaDataset *dataset,
                                   const struct VarfaSplit *split,
                                   const char *config_toml,
                                   struct VarfaModel **out);

// # Safety
// `path` must be nul-terminated and `out` valid.
enum VarfaStatus varfa_model_load(const char *path, struct VarfaModel **out);

// # Safety
// `model` must be a live handle and `path` nul-terminated.
enum VarfaStatus varfa_model_save(const struct VarfaModel *model, const char *path);

// # Safety
// `model` must be null or a handle from this library that is not used afterwards.
void varfa_model_free(struct VarfaModel *model);

// Latent dimension, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t varfa_model_latent_dim(const struct VarfaModel *model);

// 1 for a variational model, 0 for a point-estimate model or a null handle.
//
// # Safety
// `model` must be null or a live handle.
int32_t varfa_model_is_variational(const struct VarfaModel *model);

// Probability that `student` answers `question` correctly. Variational
// models plug in the posterior mean computed from the training entries.
//
// # Safety
// Handles must be live and `out` valid.
enum VarfaStatus varfa_model_predict(const struct VarfaModel *model,
                                     const struct VarfaDataset *dataset,
                                     const struct VarfaSplit *split,
                                     size_t student,
                                     size_t question,
                                     double *out);

// Ability estimate of a student, written to `out[0..len]` with `len` equal
// to the latent dimension.
//
// # Safety
// Handles must be live and `out` must hold `len` doubles.
enum VarfaStatus varfa_model_ability(const struct VarfaModel *model,
                                     const struct VarfaDataset *dataset,
                                     const struct VarfaSplit *split,
                                     size_t student,
                                     double *out,
                                     size_t len);

// Posterior mean and standard deviation of a student's ability. Only
// variational models have a posterior.
//
// # Safety
// Handles must be live; `mean` and `std` must each hold `len` doubles.
enum VarfaStatus varfa_model_posterior(const struct VarfaModel *model,
                                       const struct VarfaDataset *dataset,
                                       const struct VarfaSplit *split,
                                       size_t student,
                                       double *mean,
                                       double *std,
                                       size_t len);

// Accuracy, AUC and F1 on the split's test entries.
//
// # Safety
// Handles must be live and `out` valid.
enum VarfaStatus varfa_model_evaluate(const struct VarfaModel *model,
                                      const struct VarfaDataset *dataset,
                                      const struct VarfaSplit *split,
                                      struct VarfaMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VARFA_H */
