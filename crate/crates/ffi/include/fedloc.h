#ifndef FEDLOC_H
#define FEDLOC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum FlStatus {
  FL_STATUS_OK = 0,
  FL_STATUS_NULL_POINTER = 1,
  FL_STATUS_INVALID_ARGUMENT = 2,
  FL_STATUS_DIMENSION_MISMATCH = 3,
  FL_STATUS_INFEASIBLE = 4,
  FL_STATUS_BUDGET_HYPOTHESIS = 5,
  FL_STATUS_NUMERICAL = 6,
  FL_STATUS_IO = 7,
  FL_STATUS_BUFFER_TOO_SMALL = 8,
  FL_STATUS_PANIC = 9,
} FlStatus;

// Which driver `fl_run` executes.
typedef enum FlAlgorithm {
  FL_ALGORITHM_SMOOTH = 0,
  FL_ALGORITHM_SUBGRADIENT = 1,
  FL_ALGORITHM_CONVOLUTION = 2,
  FL_ALGORITHM_NESTEROV = 3,
  FL_ALGORITHM_ONE_PASS_BASELINE = 4,
} FlAlgorithm;

// Opaque federated problem.
typedef struct FlProblem FlProblem;

// Counters and metrics of one run. Metrics a problem cannot evaluate are NaN.
typedef struct FlRunStats {
  uint64_t comm_rounds;
  uint64_t grad_calls;
  double excess_risk;
  double test_error;
} FlRunStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *fl_last_error(void);

// Library version as a static NUL-terminated string.
const char *fl_version(void);

// Synthetic heterogeneous quadratic problem.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum FlStatus fl_problem_quadratic_new(size_t n_silos,
                                       size_t n_per_silo,
                                       size_t dim,
                                       double centers_spread,
                                       uint64_t seed,
                                       struct FlProblem **out);

// Synthetic binary classification problem with per-silo label sets.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum FlStatus fl_problem_heterolabel_new(size_t n_silos,
                                         size_t n_per_silo,
                                         size_t dim,
                                         uint64_t seed,
                                         struct FlProblem **out);

// Releases a problem. NULL is ignored.
//
// # Safety
// `problem` must come from a `fl_problem_*_new` call and not be freed twice.
void fl_problem_free(struct FlProblem *problem);

// Model dimension, or 0 for NULL.
//
// # Safety
// `problem` must be NULL or a live handle.
size_t fl_problem_dim(const struct FlProblem *problem);

// Runs one driver and writes the output model into `w_out[0..w_len]`.
// `epsilon` may be `INFINITY` for a non-private run. `stats` may be NULL.
//
// # Safety
// `problem` must be a live handle; `w_out` must point to `w_len` writable
// doubles; `stats` must be NULL or writable.
enum FlStatus fl_run(const struct FlProblem *problem,
                     enum FlAlgorithm algorithm,
                     double epsilon,
                     double delta,
                     size_t m_available,
                     uint64_t seed,
                     double multiplier,
                     double *w_out,
                     size_t w_len,
                     struct FlRunStats *stats);

// Per-coordinate Gaussian noise variance for `rounds` releases on a phase
// of `n_phase` samples.
//
// # Safety
// `out` must be a valid pointer to one writable double.
enum FlStatus fl_calibrate_sigma2(double lipschitz,
                                  uint64_t rounds,
                                  size_t n_phase,
                                  double epsilon,
                                  double delta,
                                  double *out);

// Base regularization of the smooth localized schedule.
//
// # Safety
// `out` must be a valid pointer to one writable double.
enum FlStatus fl_smooth_lambda(double lipschitz,
                               double diameter,
                               size_t m_available,
                               size_t n,
                               size_t dim,
                               double epsilon,
                               double delta,
                               double *out);

// Runs the built-in invariant checks; returns the number that failed.
uint32_t fl_selftest(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDLOC_H */
