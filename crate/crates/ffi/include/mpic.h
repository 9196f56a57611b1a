#ifndef MPIC_H
#define MPIC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MpicStatus {
  MPIC_STATUS_OK = 0,
  MPIC_STATUS_NULL_POINTER = 1,
  MPIC_STATUS_INVALID_ARGUMENT = 2,
  MPIC_STATUS_PARSE = 3,
  MPIC_STATUS_IO = 4,
  MPIC_STATUS_NUMERICAL = 5,
  MPIC_STATUS_OFF_ROAD = 6,
  MPIC_STATUS_OUT_OF_RANGE = 7,
  MPIC_STATUS_PLANNING_FAILED = 8,
  MPIC_STATUS_TRAINING = 9,
  MPIC_STATUS_PANIC = 10,
} MpicStatus;

// Closed-loop controller bound to one model and scenario.
typedef struct MpicController MpicController;

// Discrete-time vehicle model.
typedef struct MpicModel MpicModel;

// Scenario description (road, obstacles, weights, bounds).
typedef struct MpicScenario MpicScenario;

typedef struct MpicSummary {
  size_t steps;
  double total_cost;
  double min_ov_dist;
  double max_violation;
  double mean_plan_ms;
  double final_speed;
} MpicSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Owned by the
// library and valid until the next failing call on this thread.
const char *mpic_last_error(void);

// Library version as a static NUL-terminated string.
const char *mpic_version(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must come from this library and not have been freed.
void mpic_string_free(char *s);

// Parses a neural model weight file held in memory.
//
// # Safety
// `json` must point to `len` readable bytes; `out` must be writable.
enum MpicStatus mpic_model_from_json(const uint8_t *json, size_t len, struct MpicModel **out);

// Loads a neural model weight file from disk.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MpicStatus mpic_model_load(const char *path, struct MpicModel **out);

// Exact kinematic bicycle with sample time `dt` and the given wheelbase.
//
// # Safety
// `out` must be writable.
enum MpicStatus mpic_model_bicycle(double dt, double wheelbase, struct MpicModel **out);

// One model step from state `x[4]` under control `u[2]` into `x_next[4]`.
//
// # Safety
// Pointers must reference arrays of the stated lengths.
enum MpicStatus mpic_model_step(const struct MpicModel *model,
                                const double *x,
                                const double *u,
                                double *x_next);

// # Safety
// `model` must come from this library and not have been freed.
void mpic_model_free(struct MpicModel *model);

// Built-in scenario by name: `overtaking` or `braking`.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum MpicStatus mpic_scenario_fixture(const char *name, struct MpicScenario **out);

// Parses and validates a scenario document.
//
// # Safety
// `json` must point to `len` readable bytes; `out` must be writable.
enum MpicStatus mpic_scenario_from_json(const uint8_t *json, size_t len, struct MpicScenario **out);

// Number of closed-loop steps the scenario runs for.
//
// # Safety
// `scenario` must be a live handle.
size_t mpic_scenario_steps(const struct MpicScenario *scenario);

// # Safety
// `scenario` must come from this library and not have been freed.
void mpic_scenario_free(struct MpicScenario *scenario);

// Builds a controller. `config_json` may be null for defaults; otherwise it
// is a controller settings object where omitted fields keep their defaults.
// The model and scenario are copied, so their handles may be freed after.
//
// # Safety
// Handles must be live; `config_json` null or NUL-terminated; `out` writable.
enum MpicStatus mpic_controller_new(const struct MpicModel *model,
                                    const struct MpicScenario *scenario,
                                    const char *config_json,
                                    struct MpicController **out);

// Plans step `k` from planning-frame state `x[4]` = (s, d, heading error,
// speed) given the previous control `u_prev[2]`, writing the control to
// apply into `u_out[2]`.
//
// # Safety
// Pointers must reference arrays of the stated lengths.
enum MpicStatus mpic_controller_plan(struct MpicController *ctrl,
                                     size_t k,
                                     const double *x,
                                     const double *u_prev,
                                     double *u_out);

// Forgets the warm-start state.
//
// # Safety
// `ctrl` must be a live handle.
enum MpicStatus mpic_controller_reset(struct MpicController *ctrl);

// Runs the scenario in closed loop against the true plant. The summary and,
// when `csv` is non-null, the trace CSV (free with [`mpic_string_free`]) are
// written even when planning fails part way.
//
// # Safety
// `ctrl` must be a live handle; `summary` writable; `csv` null or writable.
enum MpicStatus mpic_controller_run(struct MpicController *ctrl,
                                    struct MpicSummary *summary,
                                    char **csv);

// # Safety
// `ctrl` must come from this library and not have been freed.
void mpic_controller_free(struct MpicController *ctrl);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPIC_H */
