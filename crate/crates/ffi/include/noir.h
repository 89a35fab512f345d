#ifndef NOIR_H
#define NOIR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NoirStatus {
  NOIR_STATUS_OK = 0,
  NOIR_STATUS_NULL_ARGUMENT = 1,
  NOIR_STATUS_INVALID_ARGUMENT = 2,
  NOIR_STATUS_PARSE_ERROR = 3,
  NOIR_STATUS_RUN_ABORTED = 4,
  NOIR_STATUS_IO_ERROR = 5,
  NOIR_STATUS_BUFFER_TOO_SMALL = 6,
  NOIR_STATUS_PANIC = 7,
} NoirStatus;

typedef enum NoirQpStatus {
  NOIR_QP_STATUS_OPTIMAL = 0,
  NOIR_QP_STATUS_INFEASIBLE = 1,
  NOIR_QP_STATUS_ITERATION_LIMIT = 2,
  NOIR_QP_STATUS_INACCURATE = 3,
} NoirQpStatus;

/**
 * Opaque network graph.
 */
typedef struct NoirNetwork NoirNetwork;

/**
 * Opaque resolved scenario.
 */
typedef struct NoirScenario NoirScenario;

/**
 * Opaque run result.
 */
typedef struct NoirTrace NoirTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *noir_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *noir_version(void);

/**
 * Parses and resolves a scenario document.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NoirStatus noir_scenario_from_json(const char *json, struct NoirScenario **out);

/**
 * The bundled 64-element reference scenario.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum NoirStatus noir_scenario_reference(struct NoirScenario **out);

/**
 * # Safety
 * `s` must come from a scenario constructor and not be freed twice.
 */
void noir_scenario_free(struct NoirScenario *s);

/**
 * Interior element count, inlet count and run length.
 *
 * # Safety
 * `s` must be a live scenario; output pointers may be null.
 */
enum NoirStatus noir_scenario_dims(const struct NoirScenario *s,
                                   size_t *n_interior,
                                   size_t *n_in,
                                   size_t *steps);

/**
 * Runs the closed loop. A trace is produced even when the run aborts; the
 * status is then `RunAborted`.
 *
 * # Safety
 * `s` must be a live scenario and `out` a valid pointer.
 */
enum NoirStatus noir_run(const struct NoirScenario *s, struct NoirTrace **out);

/**
 * # Safety
 * `t` must come from [`noir_run`] and not be freed twice.
 */
void noir_trace_free(struct NoirTrace *t);

/**
 * Number of completed steps and monitor violations.
 *
 * # Safety
 * `t` must be a live trace; output pointers may be null.
 */
enum NoirStatus noir_trace_counts(const struct NoirTrace *t, size_t *steps, size_t *violations);

/**
 * Copies the densities at state `step` (0 is the initial state) into `out`.
 *
 * # Safety
 * `t` must be a live trace and `out` must hold `len` doubles.
 */
enum NoirStatus noir_trace_densities(const struct NoirTrace *t,
                                     size_t step,
                                     double *out,
                                     size_t len);

/**
 * Copies the inflows applied at `step` into `out`.
 *
 * # Safety
 * `t` must be a live trace and `out` must hold `len` doubles.
 */
enum NoirStatus noir_trace_inputs(const struct NoirTrace *t, size_t step, double *out, size_t len);

/**
 * Summary as JSON. Call with a null buffer to learn the size in `needed`.
 *
 * # Safety
 * `t` must be a live trace; `buf` must hold `len` bytes or be null.
 */
enum NoirStatus noir_trace_summary_json(const struct NoirTrace *t,
                                        char *buf,
                                        size_t len,
                                        size_t *needed);

/**
 * Writes the CSV trace files and `summary.json` into `dir`.
 *
 * # Safety
 * `t` must be a live trace and `dir` a NUL-terminated path.
 */
enum NoirStatus noir_trace_write(const struct NoirTrace *t, const char *dir);

/**
 * Parses a graph document `{"n_in", "n_out_end", "n_total", "edges"}`.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NoirStatus noir_graph_from_json(const char *json, struct NoirNetwork **out);

/**
 * # Safety
 * `g` must come from [`noir_graph_from_json`] and not be freed twice.
 */
void noir_graph_free(struct NoirNetwork *g);

/**
 * Path conditions: every interior element reachable from an inlet, and
 * every interior element reaching an outlet. Flags are 1 or 0.
 *
 * # Safety
 * `g` must be a live graph; output pointers may be null.
 */
enum NoirStatus noir_graph_check_paths(const struct NoirNetwork *g,
                                       int32_t *inlet_ok,
                                       int32_t *outlet_ok);

/**
 * Spectral radius of a nonnegative `n × n` row-major matrix.
 *
 * # Safety
 * `m` must hold `n * n` doubles and `out` be a valid pointer.
 */
enum NoirStatus noir_spectral_radius(const double *m, size_t n, double *out);

/**
 * Solves `min ½ zᵀHz + gᵀz` s.t. `G z ≤ h`, `E z = f`.
 *
 * `H` is `n × n`, `G` is `m_ineq × n`, `E` is `m_eq × n`, all row-major.
 * On return `z` (length `n`) and `objective` hold the final iterate
 * whatever the QP status; the status lands in `qp_status`.
 *
 * # Safety
 * Every array must hold the number of doubles its dimensions imply and the
 * output pointers must be valid.
 */
enum NoirStatus noir_qp_solve(size_t n,
                              const double *h,
                              const double *g,
                              size_t m_ineq,
                              const double *ineq,
                              const double *ineq_rhs,
                              size_t m_eq,
                              const double *eq,
                              const double *eq_rhs,
                              double *z,
                              double *objective,
                              enum NoirQpStatus *qp_status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NOIR_H */
