#ifndef QOC_CODESIGN_H
#define QOC_CODESIGN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum QocStatus {
  QOC_STATUS_OK = 0,
  QOC_STATUS_NULL_POINTER = 1,
  QOC_STATUS_INVALID_UTF8 = 2,
  QOC_STATUS_CONFIG = 3,
  QOC_STATUS_DIMENSION = 4,
  QOC_STATUS_CONSTRAINT = 5,
  QOC_STATUS_INVALID_ARGUMENT = 6,
  QOC_STATUS_IO = 7,
  QOC_STATUS_BUFFER_TOO_SMALL = 8,
  QOC_STATUS_PANIC = 9,
} QocStatus;

/**
 * Opaque optimizer report.
 */
typedef struct QocReport QocReport;

/**
 * Opaque simulator bound to one resolved config and run seed.
 */
typedef struct QocSimulator QocSimulator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *qoc_last_error(void);

/**
 * Library version, static storage.
 */
const char *qoc_version(void);

/**
 * Simulator for the task of `seed` under a TOML experiment config.
 */
enum QocStatus qoc_simulator_from_config(const char *config_toml,
                                         uint64_t seed,
                                         struct QocSimulator **out);

/**
 * Simulator for a named preset; `index` selects among expanded configs (pitch sweep).
 */
enum QocStatus qoc_simulator_from_preset(const char *name,
                                         size_t index,
                                         uint64_t seed,
                                         struct QocSimulator **out);

void qoc_simulator_free(struct QocSimulator *sim);

/**
 * Channel count, or 0 for a null handle.
 */
size_t qoc_simulator_n_channels(const struct QocSimulator *sim);

size_t qoc_simulator_t_steps(const struct QocSimulator *sim);

/**
 * Number of doubles in a schedule with `n_segments` segments.
 */
size_t qoc_simulator_schedule_len(const struct QocSimulator *sim, size_t n_segments);

/**
 * Gate fidelity of a voltage schedule.
 */
enum QocStatus qoc_simulator_fidelity(const struct QocSimulator *sim,
                                      const double *volts,
                                      size_t len,
                                      size_t n_segments,
                                      double *fidelity);

/**
 * Cost `1 - F` and its gradient with respect to every voltage; `grad` holds `len` doubles.
 */
enum QocStatus qoc_simulator_cost_grad(const struct QocSimulator *sim,
                                       const double *volts,
                                       size_t len,
                                       size_t n_segments,
                                       double *cost,
                                       double *grad);

/**
 * Runs the configured optimizer for one seed. Nothing is written to disk.
 */
enum QocStatus qoc_optimize(const char *config_toml, uint64_t seed, struct QocReport **out);

void qoc_report_free(struct QocReport *report);

/**
 * Final gate error, or NaN for a null handle.
 */
double qoc_report_final_error(const struct QocReport *report);

size_t qoc_report_n_segments(const struct QocReport *report);

/**
 * Copies the best schedule into `out`. With `*len` too small, writes the
 * needed length and returns `BufferTooSmall`.
 */
enum QocStatus qoc_report_best_schedule(const struct QocReport *report, double *out, size_t *len);

/**
 * JSON of the full report, owned by the handle.
 */
const char *qoc_report_json(const struct QocReport *report);

/**
 * Canonical TOML of a resolved config. Free with [`qoc_string_free`].
 */
enum QocStatus qoc_config_resolve(const char *config_toml, char **out);

void qoc_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QOC_CODESIGN_H */
