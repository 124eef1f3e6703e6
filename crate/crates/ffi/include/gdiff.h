#ifndef GDIFF_H
#define GDIFF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GdiffStatus {
  GDIFF_STATUS_OK = 0,
  GDIFF_STATUS_NULL_POINTER = 1,
  GDIFF_STATUS_DIMENSION = 2,
  GDIFF_STATUS_NON_FINITE = 3,
  GDIFF_STATUS_INVALID = 4,
  GDIFF_STATUS_CONFIG = 5,
  GDIFF_STATUS_STABILITY = 6,
  GDIFF_STATUS_OUT_OF_RANGE = 7,
  GDIFF_STATUS_IO = 8,
  GDIFF_STATUS_PANIC = 9,
} GdiffStatus;

/**
 * A solved PDE on its grid.
 */
typedef struct GdiffSolution GdiffSolution;

/**
 * A compact covariance set.
 */
typedef struct GdiffTheta GdiffTheta;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *gdiff_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void gdiff_string_free(char *s);

/**
 * Runs a named experiment on a TOML (or JSON) config. `out_json` receives the
 * report and `out_exit_code` the CLI exit code. Experiment outcomes,
 * including violated hypotheses, return `GDIFF_STATUS_OK`; only an unusable
 * config or argument fails.
 *
 * # Safety
 * `name` and `config` must be NUL-terminated strings; the out-pointers must
 * be writable.
 */
enum GdiffStatus gdiff_run(const char *name,
                           const char *config,
                           char **out_json,
                           int32_t *out_exit_code);

/**
 * Variances in `[lo, hi]` for one-dimensional noise.
 *
 * # Safety
 * `out` must be writable.
 */
enum GdiffStatus gdiff_theta_interval(double lo, double hi, struct GdiffTheta **out);

/**
 * Set generated by `count` volatility matrices `gamma`, each row-major
 * `dim x dim` and laid out consecutively; covariances are `gamma gamma^T`.
 *
 * # Safety
 * `generators` must hold `count * dim * dim` doubles; `out` must be writable.
 */
enum GdiffStatus gdiff_theta_new(size_t dim,
                                 const double *generators,
                                 size_t count,
                                 struct GdiffTheta **out);

/**
 * # Safety
 * `theta` must come from this library and not have been freed. Null is ignored.
 */
void gdiff_theta_free(struct GdiffTheta *theta);

/**
 * Noise dimension of the set, or 0 for null.
 *
 * # Safety
 * `theta` must be null or a live handle.
 */
size_t gdiff_theta_dim(const struct GdiffTheta *theta);

/**
 * `G(A)` for a symmetric row-major `dim x dim` matrix `a`.
 *
 * # Safety
 * `theta` must be a live handle, `a` must hold `dim * dim` doubles and `out`
 * must be writable.
 */
enum GdiffStatus gdiff_theta_eval_g(const struct GdiffTheta *theta,
                                    const double *a,
                                    size_t dim,
                                    double *out);

/**
 * Solves the PDE for the config's system, datum and grid.
 *
 * # Safety
 * `config` must be a NUL-terminated string and `out` writable.
 */
enum GdiffStatus gdiff_solve_pde(const char *config, struct GdiffSolution **out);

/**
 * # Safety
 * `sol` must come from this library and not have been freed. Null is ignored.
 */
void gdiff_solution_free(struct GdiffSolution *sol);

/**
 * State dimension of the solution grid, or 0 for null.
 *
 * # Safety
 * `sol` must be null or a live handle.
 */
size_t gdiff_solution_dim(const struct GdiffSolution *sol);

/**
 * `u(t, x)` interpolated from the stored levels.
 *
 * # Safety
 * `sol` must be a live handle, `x` must hold `n` doubles and `out` must be
 * writable.
 */
enum GdiffStatus gdiff_solution_value(const struct GdiffSolution *sol,
                                      double t,
                                      const double *x,
                                      size_t n,
                                      double *out);

/**
 * Writes the solution as CSV (`t,x_1..,u`) into a new string.
 *
 * # Safety
 * `sol` must be a live handle and `out` writable.
 */
enum GdiffStatus gdiff_solution_csv(const struct GdiffSolution *sol, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GDIFF_H */
