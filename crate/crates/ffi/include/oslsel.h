#ifndef OSLSEL_H
#define OSLSEL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OslselStatus {
  OSLSEL_STATUS_OK = 0,
  OSLSEL_STATUS_NULL_POINTER = 1,
  OSLSEL_STATUS_INVALID_ARGUMENT = 2,
  OSLSEL_STATUS_SOLVER_FAILURE = 3,
  OSLSEL_STATUS_PANIC = 4,
} OslselStatus;

// Labelled training rows plus an unlabelled test block.
typedef struct OslselDataset OslselDataset;

// A fitted model together with the data it was fitted on.
typedef struct OslselFit OslselFit;

// Settings for [`oslsel_fit`]; start from [`oslsel_fit_options_default`].
typedef struct OslselFitOptions {
  double tol;
  uintptr_t max_iter;
  uintptr_t n_starts;
  uint64_t seed;
  // Polynomial degree of the basis; 1 is the identity basis.
  uintptr_t degree;
} OslselFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *oslsel_last_error(void);

// Library version as a static NUL-terminated string.
const char *oslsel_version(void);

struct OslselFitOptions oslsel_fit_options_default(void);

// Builds a dataset from `n x d` training rows with labels in `0..k_known`
// and `m x d` test rows. On success `*out` owns a new handle.
//
// # Safety
// Array arguments must point to at least the stated number of elements.
enum OslselStatus oslsel_dataset_new(const double *train_x,
                                     const uint32_t *train_y,
                                     uintptr_t n,
                                     const double *test_x,
                                     uintptr_t m,
                                     uintptr_t d,
                                     uintptr_t k_known,
                                     struct OslselDataset **out);

// # Safety
// `ds` must be null or a handle from [`oslsel_dataset_new`] not yet freed.
void oslsel_dataset_free(struct OslselDataset *ds);

// Fits the model by EM with multiple starts.
//
// # Safety
// `ds` must be a live dataset handle and `out` writable.
enum OslselStatus oslsel_fit(const struct OslselDataset *ds,
                             struct OslselFitOptions options,
                             struct OslselFit **out);

// # Safety
// `fit` must be null or a handle from [`oslsel_fit`] not yet freed.
void oslsel_fit_free(struct OslselFit *fit);

// Number of known classes `K`; proportions have `K + 1` entries.
//
// # Safety
// `fit` must be a live fit handle or null (returns 0).
uintptr_t oslsel_fit_known_classes(const struct OslselFit *fit);

// Length of each tilt vector (intercept plus basis terms).
//
// # Safety
// `fit` must be a live fit handle or null (returns 0).
uintptr_t oslsel_fit_tilt_len(const struct OslselFit *fit);

// Writes the profile log empirical likelihood to `*out`.
//
// # Safety
// `fit` must be a live fit handle and `out` writable.
enum OslselStatus oslsel_fit_log_el(const struct OslselFit *fit, double *out);

// Writes `(pi_0, .., pi_K)`; `len` must equal `K + 1`.
//
// # Safety
// `fit` must be a live fit handle and `out` hold `len` doubles.
enum OslselStatus oslsel_fit_proportions(const struct OslselFit *fit, double *out, uintptr_t len);

// Writes the tilts `gamma_1, .., gamma_K` back to back; `len` must equal
// `K * oslsel_fit_tilt_len(fit)`.
//
// # Safety
// `fit` must be a live fit handle and `out` hold `len` doubles.
enum OslselStatus oslsel_fit_tilts(const struct OslselFit *fit, double *out, uintptr_t len);

// Posterior class probabilities of one row `x` of length `d`; `out` holds
// `K + 1` values.
//
// # Safety
// `x` must hold `d` doubles and `out` `K + 1`.
enum OslselStatus oslsel_posterior(const struct OslselFit *fit,
                                   const double *x,
                                   uintptr_t d,
                                   double *out);

// Labels `rows x d` feature rows under 0-1 loss; `out` receives `rows`
// class indices where `K` is the novel class.
//
// # Safety
// `x` must hold `rows * d` doubles and `out` `rows` integers.
enum OslselStatus oslsel_classify(const struct OslselFit *fit,
                                  const double *x,
                                  uintptr_t rows,
                                  uintptr_t d,
                                  uint32_t *out);

// Likelihood ratio interval for `pi_k` (`k = 0` is the baseline class).
//
// # Safety
// `fit` must be a live fit handle; `lower` and `upper` writable.
enum OslselStatus oslsel_interval(const struct OslselFit *fit,
                                  uintptr_t k,
                                  double level,
                                  double *lower,
                                  double *upper);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OSLSEL_H */
