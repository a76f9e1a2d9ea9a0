#ifndef NDDE_H
#define NDDE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum NddeStatus {
  NDDE_STATUS_OK = 0,
  NDDE_STATUS_NULL_POINTER = 1,
  NDDE_STATUS_DIMENSION = 2,
  NDDE_STATUS_DOMAIN = 3,
  NDDE_STATUS_DIVERGENCE = 4,
  NDDE_STATUS_INPUT = 5,
  NDDE_STATUS_NUMERICAL = 6,
  NDDE_STATUS_STATE = 7,
  NDDE_STATUS_CONFIG = 8,
  NDDE_STATUS_PARSE = 9,
  NDDE_STATUS_IO = 10,
  NDDE_STATUS_INVALID_UTF8 = 11,
  NDDE_STATUS_PANIC = 12,
} NddeStatus;

// A vector field together with its current parameter vector.
typedef struct NddeField NddeField;

// A solved trajectory and the constant history it started from.
typedef struct NddeTrajectory NddeTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ndde_version(void);

// Length in bytes of the calling thread's last error message, 0 if none.
size_t ndde_last_error_length(void);

// Copies the last error message into `buf` (truncated, always
// NUL-terminated when `len > 0`) and returns its full length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t ndde_last_error_message(char *buf, size_t len);

// Neural delay field `f(h(t), h(t - tau))` with tanh hidden layers of the
// given widths and parameters drawn from `seed`.
//
// # Safety
// `hidden` must point to `n_hidden` values; `out` must be writable.
enum NddeStatus ndde_field_neural(size_t dim,
                                  const size_t *hidden,
                                  size_t n_hidden,
                                  uint64_t seed,
                                  struct NddeField **out);

// Mackey-Glass field `beta x(t-tau) / (1 + x(t-tau)^n) - gamma x(t)`.
//
// # Safety
// `out` must be writable.
enum NddeStatus ndde_field_mackey_glass(double beta,
                                        double n,
                                        double gamma,
                                        struct NddeField **out);

// Delayed logistic field `r x(t) (1 - x(t-tau))`.
//
// # Safety
// `out` must be writable.
enum NddeStatus ndde_field_population(double r, struct NddeField **out);

// Linear delay field `x' = a x(t-tau)` in `dim` independent components.
//
// # Safety
// `out` must be writable.
enum NddeStatus ndde_field_scalar_delay(size_t dim, double a, struct NddeField **out);

// Releases a field. Null is ignored.
//
// # Safety
// `f` must come from an `ndde_field_*` constructor and not be used afterwards.
void ndde_field_free(struct NddeField *f);

// State dimension, or 0 for a null handle.
//
// # Safety
// `f` must be null or a live field.
size_t ndde_field_dim(const struct NddeField *f);

// Number of parameters, or 0 for a null handle.
//
// # Safety
// `f` must be null or a live field.
size_t ndde_field_param_count(const struct NddeField *f);

// # Safety
// `f` must be a live field and `buf` must hold `len` values.
enum NddeStatus ndde_field_get_params(const struct NddeField *f, double *buf, size_t len);

// Replaces the parameter vector; `len` must equal the parameter count and
// every value must be finite.
//
// # Safety
// `f` must be a live field and `buf` must hold `len` values.
enum NddeStatus ndde_field_set_params(struct NddeField *f, const double *buf, size_t len);

// Solves from the constant history `x0` on `[-tau, 0]` over `segments`
// delay intervals with `steps_per_segment` RK4 steps each.
//
// # Safety
// `f` must be a live field, `x0` must hold `dim` values, `out` must be writable.
enum NddeStatus ndde_integrate(const struct NddeField *f,
                               const double *x0,
                               size_t dim,
                               double tau,
                               size_t segments,
                               size_t steps_per_segment,
                               struct NddeTrajectory **out);

// Releases a trajectory. Null is ignored.
//
// # Safety
// `t` must come from [`ndde_integrate`] and not be used afterwards.
void ndde_trajectory_free(struct NddeTrajectory *t);

// Number of grid points, or 0 for a null handle.
//
// # Safety
// `t` must be null or a live trajectory.
size_t ndde_trajectory_len(const struct NddeTrajectory *t);

// # Safety
// `t` must be null or a live trajectory.
size_t ndde_trajectory_dim(const struct NddeTrajectory *t);

// # Safety
// `t` must be null or a live trajectory.
size_t ndde_trajectory_segments(const struct NddeTrajectory *t);

// Time and state of grid point `j`.
//
// # Safety
// `t` must be a live trajectory, `time` writable, `state` must hold `len` values.
enum NddeStatus ndde_trajectory_point(const struct NddeTrajectory *t,
                                      size_t j,
                                      double *time,
                                      double *state,
                                      size_t len);

// State at `k tau` for `k = 0..=segments`.
//
// # Safety
// `t` must be a live trajectory and `state` must hold `len` values.
enum NddeStatus ndde_trajectory_checkpoint(const struct NddeTrajectory *t,
                                           size_t k,
                                           double *state,
                                           size_t len);

// Gradients of `L = cotangent . h(T)` from the adjoint pass: the parameter
// gradient into `grad_w`, the initial-state gradient into `grad_h0`, and the
// delay and terminal-time derivatives into `grad_tau` and `grad_t`.
//
// # Safety
// Handles must be live and every buffer must hold its stated length.
enum NddeStatus ndde_terminal_gradient(const struct NddeField *f,
                                       const struct NddeTrajectory *t,
                                       const double *cotangent,
                                       size_t dim,
                                       double *grad_w,
                                       size_t n_w,
                                       double *grad_h0,
                                       size_t n_h0,
                                       double *grad_tau,
                                       double *grad_t);

// Runs a named experiment with its defaults, writing to `out_dir`, and
// stores the process exit code it maps to (0 passed, 2 bad config, 3 checks
// failed) in `exit_code`. A null `out_dir` uses the default location.
//
// # Safety
// `name` must be a NUL-terminated string, `out_dir` null or one, and
// `exit_code` writable.
enum NddeStatus ndde_run_experiment(const char *name,
                                    const char *out_dir,
                                    bool quiet,
                                    int32_t *exit_code);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NDDE_H */
