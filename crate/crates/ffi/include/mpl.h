#ifndef MPL_H
#define MPL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define MPL_ABI_VERSION 1

typedef enum MplStatus {
  MPL_STATUS_OK = 0,
  MPL_STATUS_NULL_POINTER = 1,
  MPL_STATUS_INVALID_ARGUMENT = 2,
  MPL_STATUS_IO = 3,
  MPL_STATUS_CORRUPT_MODEL = 4,
  MPL_STATUS_NOT_RUNNING = 5,
  MPL_STATUS_NUMERIC = 6,
  MPL_STATUS_PANIC = 7,
} MplStatus;

typedef enum MplEnvStatus {
  MPL_ENV_STATUS_RUNNING = 0,
  MPL_ENV_STATUS_REACHED_GOAL = 1,
  MPL_ENV_STATUS_DONE = 2,
} MplEnvStatus;

typedef enum MplCondition {
  MPL_CONDITION_NOBP = 0,
  MPL_CONDITION_BPU = 1,
  MPL_CONDITION_BPP = 2,
  MPL_CONDITION_BPUP = 3,
} MplCondition;

typedef enum MplTerminal {
  MPL_TERMINAL_REACHED_GOAL = 0,
  MPL_TERMINAL_TIMED_OUT = 1,
  MPL_TERMINAL_ABORTED = 2,
} MplTerminal;

// One environment episode.
typedef struct MplEnv MplEnv;

// Trained dynamics model.
typedef struct MplModel MplModel;

// Result of one input optimization (normalized units).
typedef struct MplOptResult {
  // Predicted control to execute (normalized).
  double u[2];
  // Optimized input the prediction was made from.
  double input[2];
  double p_pred;
  double first_loss;
  double final_loss;
  uint32_t updates;
} MplOptResult;

// Result of one closed-loop episode.
typedef struct MplEpisodeSummary {
  enum MplTerminal terminal;
  bool collided_ever;
  uint64_t steps;
} MplEpisodeSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// ABI version of this library.
uint32_t mpl_abi_version(void);

// Message for the last failed call on this thread. Valid until the next
// failing call on the same thread; empty if none failed.
const char *mpl_last_error(void);

// Loads a model file into `*out`.
enum MplStatus mpl_model_load(const char *path, struct MplModel **out);

// Releases a model. Null is ignored.
void mpl_model_free(struct MplModel *model);

enum MplStatus mpl_model_hidden_dim(const struct MplModel *model, uint32_t *out);

// Creates an environment. `config_json` may be null for defaults; `seed`
// always overrides the configured seed.
enum MplStatus mpl_env_new(const char *config_json, uint64_t seed, struct MplEnv **out);

// Releases an environment. Null is ignored.
void mpl_env_free(struct MplEnv *env);

// Writes `(agent_x, agent_y, obstacle_x, obstacle_y)` into `out[4]`.
enum MplStatus mpl_env_observe(const struct MplEnv *env, double *out);

// Applies velocity `(ux, uy)` for one step. `status` and `collided_ever`
// may be null.
enum MplStatus mpl_env_step(struct MplEnv *env,
                            double ux,
                            double uy,
                            enum MplEnvStatus *status,
                            bool *collided_ever);

// Straight-line velocity toward the goal for the current state.
enum MplStatus mpl_env_nominal_input(const struct MplEnv *env, double *out);

// Optimizes one input from a fresh recurrent state. `s_t[4]`, `u_init[2]`
// and `u_ref[2]` are normalized; `u_ref` may be null.
enum MplStatus mpl_optimize_input(const struct MplModel *model,
                                  enum MplCondition cond,
                                  const double *s_t,
                                  const double *u_init,
                                  double p_init,
                                  const double *u_ref,
                                  double p_ref,
                                  struct MplOptResult *out);

// Runs one closed-loop episode. A negative `abort_threshold` disables
// aborting.
enum MplStatus mpl_run_episode(const struct MplModel *model,
                               const char *env_config_json,
                               enum MplCondition cond,
                               uint64_t seed,
                               double abort_threshold,
                               struct MplEpisodeSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPL_H */
