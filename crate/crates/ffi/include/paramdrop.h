#ifndef PARAMDROP_H
#define PARAMDROP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PdStatus {
  PD_STATUS_OK = 0,
  PD_STATUS_NULL_POINTER = 1,
  PD_STATUS_INVALID_ARGUMENT = 2,
  PD_STATUS_CONFIG = 3,
  PD_STATUS_IO = 4,
  PD_STATUS_INSUFFICIENT_DATA = 5,
  PD_STATUS_INVALID_STATE = 6,
  PD_STATUS_PANIC = 99,
} PdStatus;

typedef struct PdCostModel PdCostModel;

typedef struct PdDropPlan PdDropPlan;

typedef struct PdSimulation PdSimulation;

typedef struct PdStats {
  uint64_t now_us;
  uint64_t requests;
  uint64_t finished;
  uint64_t evictions;
  uint64_t drop_events;
  uint64_t restores;
  uint64_t swaps;
  uint64_t migrations;
  uint64_t fallbacks;
  uint64_t autoscale_events;
  uint64_t faults;
} PdStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *pd_last_error(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void pd_string_free(char *s);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum PdStatus pd_cost_model_new(double alpha, double beta, double gamma, struct PdCostModel **out);

/**
 * Fits coefficients to profile rows `(c[i], p[i], batch_id[i], measured_us[i])`.
 * Rows sharing a batch id form one batch and must agree on `measured_us`.
 * A nonzero `tokens_only` forces alpha to zero.
 *
 * # Safety
 * The four arrays must hold `n` elements each; `out` must be valid.
 */
enum PdStatus pd_cost_model_fit(const uint64_t *c,
                                const uint64_t *p,
                                const uint64_t *batch_id,
                                const double *measured_us,
                                size_t n,
                                int tokens_only,
                                struct PdCostModel **out);

/**
 * # Safety
 * `model` must be a live handle; the out pointers may be null.
 */
enum PdStatus pd_cost_model_coefficients(const struct PdCostModel *model,
                                         double *alpha,
                                         double *beta,
                                         double *gamma);

/**
 * Seconds to process one chunk of `c` new tokens after `p` cached ones.
 *
 * # Safety
 * `model` must be a live handle; `out_seconds` must be valid.
 */
enum PdStatus pd_cost_model_chunk_cost(const struct PdCostModel *model,
                                       uint64_t c,
                                       uint64_t p,
                                       double *out_seconds);

/**
 * # Safety
 * `model` must come from this library and not be freed twice.
 */
void pd_cost_model_free(struct PdCostModel *model);

/**
 * Plans parameter drops for `instances` unmerged instances until
 * `demand_bytes` of KVCache are freed.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PdStatus pd_drop_plan_new(uint32_t instances,
                               uint32_t num_layers,
                               uint64_t bytes_per_layer,
                               uint64_t demand_bytes,
                               struct PdDropPlan **out);

/**
 * # Safety
 * `plan` must be a live handle; the out pointers may be null.
 */
enum PdStatus pd_drop_plan_summary(const struct PdDropPlan *plan,
                                   uint64_t *merges,
                                   uint64_t *freed_bytes,
                                   int *fallback);

/**
 * Text form of the plan; free it with [`pd_string_free`].
 *
 * # Safety
 * `plan` must be a live handle; `out` must be valid.
 */
enum PdStatus pd_drop_plan_to_string(const struct PdDropPlan *plan, char **out);

/**
 * # Safety
 * `plan` must come from this library and not be freed twice.
 */
void pd_drop_plan_free(struct PdDropPlan *plan);

/**
 * Loads a TOML config file. `policy` overrides the config's policy unless
 * null.
 *
 * # Safety
 * `path` must be a C string, `policy` a C string or null, `out` valid.
 */
enum PdStatus pd_simulation_from_file(const char *path,
                                      const char *policy,
                                      struct PdSimulation **out);

/**
 * Parses TOML config text; relative trace paths resolve against `base_dir`
 * (the working directory if null).
 *
 * # Safety
 * `toml` must be a C string, `base_dir` and `policy` C strings or null,
 * `out` valid.
 */
enum PdStatus pd_simulation_from_toml(const char *toml,
                                      const char *base_dir,
                                      const char *policy,
                                      struct PdSimulation **out);

/**
 * Advances to `until_us`. `more` is set to 1 while events remain.
 *
 * # Safety
 * `sim` must be a live handle; `more` may be null.
 */
enum PdStatus pd_simulation_run_until(struct PdSimulation *sim, uint64_t until_us, int *more);

/**
 * Runs the simulation to the end. Later stepping calls fail.
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum PdStatus pd_simulation_run(struct PdSimulation *sim);

/**
 * # Safety
 * `sim` must be a live handle; `out` must be valid.
 */
enum PdStatus pd_simulation_stats(const struct PdSimulation *sim, struct PdStats *out);

/**
 * The event log, running the simulation to the end first if needed. Free
 * the string with [`pd_string_free`].
 *
 * # Safety
 * `sim` must be a live handle; `out` must be valid.
 */
enum PdStatus pd_simulation_event_log(struct PdSimulation *sim, char **out);

/**
 * Writes `report.csv`, `events.log` and `timeline.csv` into `dir`, running
 * the simulation to the end first if needed.
 *
 * # Safety
 * `sim` must be a live handle; `dir` a C string.
 */
enum PdStatus pd_simulation_write_outputs(struct PdSimulation *sim, const char *dir);

/**
 * # Safety
 * `sim` must come from this library and not be freed twice.
 */
void pd_simulation_free(struct PdSimulation *sim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PARAMDROP_H */
