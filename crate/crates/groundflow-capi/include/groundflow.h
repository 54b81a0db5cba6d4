#ifndef GROUNDFLOW_H
#define GROUNDFLOW_H

/* Generated by cbindgen from the groundflow-capi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes returned by every fallible call.
 */
typedef enum GfStatus {
  GF_STATUS_OK = 0,
  /*
   Invalid spec, config, or argument values.
   */
  GF_STATUS_SPEC = 2,
  /*
   Numerical failure (solver, root finding, diverged training).
   */
  GF_STATUS_NUMERIC = 3,
  /*
   Filesystem or parse failure.
   */
  GF_STATUS_IO = 4,
  /*
   A required pointer argument was NULL.
   */
  GF_STATUS_NULL_ARG = 5,
  /*
   A string argument was not valid UTF-8.
   */
  GF_STATUS_UTF8 = 6,
  /*
   An internal panic was caught at the boundary.
   */
  GF_STATUS_PANIC = 7,
} GfStatus;

/*
 Opaque handle to a conductivity-field realization.
 */
typedef struct GfField GfField;

/*
 Opaque handle to a trained surrogate loaded from a checkpoint.
 */
typedef struct GfNetwork GfNetwork;

/*
 Opaque handle to a simulated head trajectory.
 */
typedef struct GfSolution GfSolution;

/*
 Overall metrics of one scenario run, guided model vs data-only baseline.
 */
typedef struct GfPairMetrics {
  double guided_relative_l2;
  double guided_r2;
  double baseline_relative_l2;
  double baseline_r2;
} GfPairMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Last error message raised on this thread (empty string if none).
 The pointer stays valid until the next failing call on the same thread.
 */
const char *gf_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *gf_version(void);

/*
 Creates a field realization from covariance parameters and a seed.

 # Safety
 `out` must be a valid pointer; the result must be freed with
 [`gf_field_free`].
 */
enum GfStatus gf_field_create(double variance,
                              double corr_len_x,
                              double corr_len_y,
                              double domain_len_x,
                              double domain_len_y,
                              double mean_logk,
                              size_t n_terms,
                              uint64_t seed,
                              struct GfField **out);

/*
 Loads a field document written by the CLI or [`gf_field_save`].

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GfStatus gf_field_load(const char *path, struct GfField **out);

/*
 Writes the field document (header, xi vector) to `path`.

 # Safety
 `field` must be a live handle and `path` a NUL-terminated string.
 */
enum GfStatus gf_field_save(const struct GfField *field, const char *path);

/*
 Number of retained expansion terms.

 # Safety
 `field` must be a live handle (returns 0 on NULL).
 */
size_t gf_field_n_terms(const struct GfField *field);

/*
 Log-conductivity and its gradient at a point: `out = [Z, dZ/dx, dZ/dy]`.

 # Safety
 `field` must be a live handle and `out` must point to 3 doubles.
 */
enum GfStatus gf_field_logk(const struct GfField *field, double x, double y, double *out);

/*
 Conductivity and its gradient at a point: `out = [K, dK/dx, dK/dy]`.

 # Safety
 `field` must be a live handle and `out` must point to 3 doubles.
 */
enum GfStatus gf_field_conductivity(const struct GfField *field, double x, double y, double *out);

/*
 Frees a field handle (NULL is a no-op).

 # Safety
 `field` must come from this library and not be freed twice.
 */
void gf_field_free(struct GfField *field);

/*
 Simulates the base transient problem on `nx x ny` cells: prescribed heads
 on the left/right columns, no-flow laterals, sharp initial front.

 # Safety
 `field` must be a live handle and `out` a valid pointer; free the result
 with [`gf_solution_free`].
 */
enum GfStatus gf_simulate(const struct GfField *field,
                          size_t nx,
                          size_t ny,
                          double dt,
                          size_t n_steps,
                          double left_head,
                          double right_head,
                          double specific_storage,
                          struct GfSolution **out);

/*
 Number of time steps (the trajectory stores `n_steps + 1` slices).

 # Safety
 `solution` must be a live handle (returns 0 on NULL).
 */
size_t gf_solution_n_steps(const struct GfSolution *solution);

/*
 Copies the head field of one stored step into `buf` (row-major, ny rows
 of nx values). `len` must be at least `nx * ny`.

 # Safety
 `solution` must be a live handle and `buf` must point to `len` doubles.
 */
enum GfStatus gf_solution_heads(const struct GfSolution *solution,
                                size_t step,
                                double *buf,
                                size_t len);

/*
 Frees a solution handle (NULL is a no-op).

 # Safety
 `solution` must come from this library and not be freed twice.
 */
void gf_solution_free(struct GfSolution *solution);

/*
 Loads a checkpoint document written during training.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer; free
 the result with [`gf_network_free`].
 */
enum GfStatus gf_network_load(const char *path, struct GfNetwork **out);

/*
 Physical-unit head prediction at `(t, x, y)`.

 # Safety
 `network` must be a live handle and `out` must point to a double.
 */
enum GfStatus gf_network_predict(const struct GfNetwork *network,
                                 double t,
                                 double x,
                                 double y,
                                 double *out);

/*
 Physical-unit jet at `(t, x, y)`:
 `out = [h, dh/dt, dh/dx, dh/dy, d2h/dt2, d2h/dx2, d2h/dy2]`.

 # Safety
 `network` must be a live handle and `out` must point to 7 doubles.
 */
enum GfStatus gf_network_jet(const struct GfNetwork *network,
                             double t,
                             double x,
                             double y,
                             double *out);

/*
 Frees a network handle (NULL is a no-op).

 # Safety
 `network` must come from this library and not be freed twice.
 */
void gf_network_free(struct GfNetwork *network);

/*
 Executes a scenario spec file end to end (training included) and reports
 the headline metrics. Artifacts are written under `out_dir` when it is
 non-NULL. Transfer-kind specs are rejected here; they report three models
 and are served by the CLI instead.

 # Safety
 `spec_path` must be a NUL-terminated string; `out_dir` may be NULL;
 `metrics` must be a valid pointer.
 */
enum GfStatus gf_run_scenario(const char *spec_path,
                              const char *out_dir,
                              struct GfPairMetrics *metrics);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GROUNDFLOW_H */
