/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef VARSIG_H
#define VARSIG_H

#include <stddef.h>
#include <stdint.h>

typedef enum VarsigStatus {
  VARSIG_STATUS_OK = 0,
  VARSIG_STATUS_NULL_POINTER = 1,
  VARSIG_STATUS_INVALID_ARGUMENT = 2,
  VARSIG_STATUS_SHAPE = 3,
  VARSIG_STATUS_FORMAT = 4,
  VARSIG_STATUS_DOMAIN = 5,
  VARSIG_STATUS_CONFIG = 6,
  VARSIG_STATUS_SYSTEM_MISMATCH = 7,
  VARSIG_STATUS_UNSUPPORTED = 8,
  VARSIG_STATUS_STATE = 9,
  VARSIG_STATUS_NON_FINITE_LOSS = 10,
  VARSIG_STATUS_MISSING_FILE = 11,
  VARSIG_STATUS_IO = 12,
  VARSIG_STATUS_PANIC = 13,
} VarsigStatus;

/*
 PSNR variants: `10 log10(max / MSE)` or `10 log10(max^2 / MSE)`.
 */
typedef enum VarsigPsnrFormula {
  VARSIG_PSNR_FORMULA_LINEAR = 0,
  VARSIG_PSNR_FORMULA_STANDARD = 1,
} VarsigPsnrFormula;

/*
 A forward model built from a JSON physics configuration.
 */
typedef struct VarsigForwardModel VarsigForwardModel;

/*
 A trained model loaded from an artifact directory.
 */
typedef struct VarsigModel VarsigModel;

/*
 An in-memory tensor read from a tensor file.
 */
typedef struct VarsigTensor VarsigTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on this thread.
 */
const char *varsig_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *varsig_version(void);

/*
 Builds a forward model from a JSON physics configuration such as
 `{"system": "hologram", "n": 64}`.

 # Safety
 `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VarsigStatus varsig_forward_model_new(const char *config_json,
                                           struct VarsigForwardModel **out);

/*
 # Safety
 `model` must be null or a handle from [`varsig_forward_model_new`].
 */
void varsig_forward_model_free(struct VarsigForwardModel *model);

/*
 # Safety
 `model` must be a live handle; `signal_len` and `measurement_len` valid pointers.
 */
enum VarsigStatus varsig_forward_model_lengths(const struct VarsigForwardModel *model,
                                               size_t *signal_len,
                                               size_t *measurement_len);

/*
 Computes `g = A(f)`.

 # Safety
 `f` must hold `f_len` doubles and `g` room for `g_len` doubles.
 */
enum VarsigStatus varsig_forward_model_apply(const struct VarsigForwardModel *model,
                                             const double *f,
                                             size_t f_len,
                                             double *g,
                                             size_t g_len);

/*
 Loads a trained model from an artifact directory.

 # Safety
 `dir` must be a NUL-terminated path and `out` a valid pointer.
 */
enum VarsigStatus varsig_model_load(const char *dir, struct VarsigModel **out);

/*
 # Safety
 `model` must be null or a handle from [`varsig_model_load`].
 */
void varsig_model_free(struct VarsigModel *model);

/*
 # Safety
 `model` must be a live handle; `signal_len` and `measurement_len` valid pointers.
 */
enum VarsigStatus varsig_model_lengths(const struct VarsigModel *model,
                                       size_t *signal_len,
                                       size_t *measurement_len);

/*
 Writes `instances` reconstructions of `g`, back to back, into `out`
 (`instances * signal_len` doubles). Point-estimate models repeat their
 single estimate.

 # Safety
 `g` must hold `g_len` doubles and `out` room for `out_len` doubles.
 */
enum VarsigStatus varsig_model_retrieve(const struct VarsigModel *model,
                                        const double *g,
                                        size_t g_len,
                                        size_t instances,
                                        uint64_t seed,
                                        double *out,
                                        size_t out_len);

/*
 Reads a tensor file (f32 values are widened to f64).

 # Safety
 `path` must be a NUL-terminated path and `out` a valid pointer.
 */
enum VarsigStatus varsig_tensor_read(const char *path, struct VarsigTensor **out);

/*
 # Safety
 `tensor` must be null or a handle from [`varsig_tensor_read`].
 */
void varsig_tensor_free(struct VarsigTensor *tensor);

/*
 Rank and element count of a tensor.

 # Safety
 `tensor` must be a live handle; `rank` and `len` valid pointers.
 */
enum VarsigStatus varsig_tensor_info(const struct VarsigTensor *tensor, size_t *rank, size_t *len);

/*
 Copies the dimensions (`dims_len` must equal the rank) and values
 (`data_len` must equal the element count).

 # Safety
 `dims` must have room for `dims_len` entries and `data` for `data_len`.
 */
enum VarsigStatus varsig_tensor_copy(const struct VarsigTensor *tensor,
                                     size_t *dims,
                                     size_t dims_len,
                                     double *data,
                                     size_t data_len);

/*
 Writes an f64 tensor file.

 # Safety
 `path` must be NUL-terminated, `dims` hold `rank` entries and `data` `len` doubles.
 */
enum VarsigStatus varsig_tensor_write(const char *path,
                                      const size_t *dims,
                                      size_t rank,
                                      const double *data,
                                      size_t len);

/*
 PSNR in dB of `f_hat` against `f_true` (99 for an exact match).

 # Safety
 Both arrays must hold `len` doubles; `out` must be valid.
 */
enum VarsigStatus varsig_psnr(const double *f_hat,
                              const double *f_true,
                              size_t len,
                              enum VarsigPsnrFormula formula,
                              double *out);

/*
 PSNR in dB between `A(f_hat)` and the measurement `g`.

 # Safety
 `f_hat` must hold `f_len` doubles, `g` `g_len` doubles; `out` must be valid.
 */
enum VarsigStatus varsig_fidelity(const struct VarsigForwardModel *model,
                                  const double *f_hat,
                                  size_t f_len,
                                  const double *g,
                                  size_t g_len,
                                  enum VarsigPsnrFormula formula,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VARSIG_H */
