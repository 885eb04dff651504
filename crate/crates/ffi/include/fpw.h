#ifndef FPW_H
#define FPW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FpwStatus {
  FPW_STATUS_OK = 0,
  FPW_STATUS_NULL_POINTER = 1,
  FPW_STATUS_INVALID_ARGUMENT = 2,
  FPW_STATUS_NUMERICAL_FAILURE = 3,
  FPW_STATUS_PANIC = 4,
} FpwStatus;

typedef enum FpwMultiplier {
  FPW_MULTIPLIER_NORMAL = 0,
  FPW_MULTIPLIER_RADEMACHER = 1,
  FPW_MULTIPLIER_MAMMEN = 2,
} FpwMultiplier;

// Opaque fitted-model handle.
typedef struct FpwModel FpwModel;

// Opaque sample handle.
typedef struct FpwSample FpwSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length excluding the NUL,
// or 0 if there is no error.
//
// # Safety
// `buf` must be valid for `len` bytes or null.
uintptr_t fpw_last_error_message(char *buf, uintptr_t len);

// Build a sample from `n` observations. `delta[i]` is nonzero when the
// covariate is observed; `x[i]` is ignored otherwise.
//
// # Safety
// The four arrays must hold `n` elements; `out` must be writable.
enum FpwStatus fpw_sample_new(uintptr_t n,
                              const uint8_t *delta,
                              const double *y,
                              const double *x,
                              const double *w,
                              struct FpwSample **out);

// Attach `n_controls` linear controls, given row-major as an
// `n × n_controls` array.
//
// # Safety
// `sample` must come from `fpw_sample_new`; `values` must hold
// `n * n_controls` elements.
enum FpwStatus fpw_sample_set_controls(struct FpwSample *sample,
                                       uintptr_t n_controls,
                                       const double *values);

// # Safety
// `sample` must come from `fpw_sample_new` and not be freed twice.
void fpw_sample_free(struct FpwSample *sample);

// Number of observations, or 0 for a null handle.
//
// # Safety
// `sample` must be a live handle or null.
uintptr_t fpw_sample_len(const struct FpwSample *sample);

// Run both stages with default first-stage settings and a B-spline
// series basis of the given degree and number of quantile knots.
//
// # Safety
// `sample` must be a live handle; `out` must be writable.
enum FpwStatus fpw_fit_new(const struct FpwSample *sample,
                           uintptr_t degree,
                           uintptr_t n_interior,
                           struct FpwModel **out);

// # Safety
// `fit` must come from `fpw_fit_new` and not be freed twice.
void fpw_fit_free(struct FpwModel *fit);

// Number of coefficients: series terms followed by controls.
//
// # Safety
// `fit` must be a live handle or null.
uintptr_t fpw_fit_dim(const struct FpwModel *fit);

// # Safety
// `out` must hold `len` elements and `len` must equal `fpw_fit_dim`.
enum FpwStatus fpw_fit_coefficients(const struct FpwModel *fit, double *out, uintptr_t len);

// `ĝ(x)` plus the control contribution. `controls` may be null when
// `n_controls` is 0.
//
// # Safety
// `controls` must hold `n_controls` elements; `out` must be writable.
enum FpwStatus fpw_fit_predict(const struct FpwModel *fit,
                               double x,
                               const double *controls,
                               uintptr_t n_controls,
                               double *out);

// Plug-in sieve variance at `x`.
//
// # Safety
// `out` must be writable.
enum FpwStatus fpw_fit_sieve_variance(const struct FpwModel *fit, double x, double *out);

// Multiplier-bootstrap uniform band over `grid`. `lower` and `upper`
// receive `n_grid` values each.
//
// # Safety
// All arrays must hold `n_grid` elements; `critical_value` must be
// writable.
enum FpwStatus fpw_fit_uniform_band(const struct FpwModel *fit,
                                    const double *grid,
                                    uintptr_t n_grid,
                                    double alpha,
                                    uintptr_t n_boot,
                                    enum FpwMultiplier multiplier,
                                    uint64_t seed,
                                    double *lower,
                                    double *upper,
                                    double *critical_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FPW_H */
