#ifndef SKIPDEPTH_H
#define SKIPDEPTH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum SkipdepthStatus {
  SKIPDEPTH_STATUS_OK = 0,
  SKIPDEPTH_STATUS_NULL_POINTER = 1,
  SKIPDEPTH_STATUS_INVALID_ARGUMENT = 2,
  SKIPDEPTH_STATUS_IO = 3,
  SKIPDEPTH_STATUS_PARSE = 4,
  SKIPDEPTH_STATUS_SHAPE = 5,
  SKIPDEPTH_STATUS_NUMERIC = 6,
  SKIPDEPTH_STATUS_INTERNAL = 7,
} SkipdepthStatus;

/**
 * Opaque trained policy.
 */
typedef struct SkipdepthModel SkipdepthModel;

/**
 * Opaque per-episode inference state.
 */
typedef struct SkipdepthSession SkipdepthSession;

/**
 * Opaque adapters and controllers with their static layer set.
 */
typedef struct SkipdepthSkipModules SkipdepthSkipModules;

/**
 * Guidance parameters of a session.
 */
typedef struct SkipdepthRuntimeConfig {
  /**
   * Number of action differences in the continuity window.
   */
  uint32_t k;
  /**
   * Allow-point dead band.
   */
  double eta;
  /**
   * Verification threshold; a negative value reuses `eta`.
   */
  double eta_verify;
  /**
   * Constant allow-point stride, or 0 for the adaptive stride.
   */
  uint32_t delta_l_const;
  /**
   * Per-layer bypass probability in random-skip mode.
   */
  double random_prob;
} SkipdepthRuntimeConfig;

/**
 * What one session step did.
 */
typedef struct SkipdepthStepInfo {
  uint32_t executed_layers;
  uint32_t controllers_evaluated;
  uint32_t skipped_segments;
  uint64_t flops;
  double continuity;
  /**
   * 1 when the step was re-predicted without skipping.
   */
  uint8_t verified;
  /**
   * 1 while the continuity window is still filling.
   */
  uint8_t warmup;
} SkipdepthStepInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call into this library on the same
 * thread.
 */
const char *skipdepth_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *skipdepth_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SkipdepthStatus skipdepth_model_load(const char *path, struct SkipdepthModel **out);

/**
 * # Safety
 * `model` must come from [`skipdepth_model_load`] and not be used afterwards.
 */
void skipdepth_model_free(struct SkipdepthModel *model);

/**
 * Observation, instruction and action widths and the block count.
 *
 * # Safety
 * `model` must be a live handle; the output pointers may be null.
 */
enum SkipdepthStatus skipdepth_model_dims(const struct SkipdepthModel *model,
                                          size_t *obs_dim,
                                          size_t *instr_dim,
                                          size_t *action_dim,
                                          size_t *depth);

/**
 * Full-depth forward pass; writes `action_dim` unit-scale values.
 *
 * # Safety
 * Buffers must hold the stated number of values.
 */
enum SkipdepthStatus skipdepth_model_forward(const struct SkipdepthModel *model,
                                             const double *obs,
                                             size_t obs_len,
                                             const double *instr,
                                             size_t instr_len,
                                             double *action_out,
                                             size_t action_len);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SkipdepthStatus skipdepth_skip_load(const char *path, struct SkipdepthSkipModules **out);

/**
 * # Safety
 * `mods` must come from [`skipdepth_skip_load`] and not be used afterwards.
 */
void skipdepth_skip_free(struct SkipdepthSkipModules *mods);

/**
 * Number of static layers; their ids go to `layers_out` when it is non-null
 * and holds at least that many entries.
 *
 * # Safety
 * `count` must be writable; `layers_out` may be null.
 */
enum SkipdepthStatus skipdepth_skip_static_layers(const struct SkipdepthSkipModules *mods,
                                                  size_t *layers_out,
                                                  size_t capacity,
                                                  size_t *count);

/**
 * Defaults used by the benchmark pipeline.
 */
struct SkipdepthRuntimeConfig skipdepth_runtime_config_default(void);

/**
 * Start an episode. `mode` is one of `full`, `dysl`, `controllers-only` or
 * `random-skip`; `config` may be null for the defaults.
 *
 * # Safety
 * Handles must be live, `mode` NUL-terminated and `out` writable.
 */
enum SkipdepthStatus skipdepth_session_new(const struct SkipdepthModel *model,
                                           const struct SkipdepthSkipModules *mods,
                                           const char *mode,
                                           const struct SkipdepthRuntimeConfig *config,
                                           uint64_t seed,
                                           struct SkipdepthSession **out);

/**
 * # Safety
 * `session` must come from [`skipdepth_session_new`] and not be used
 * afterwards.
 */
void skipdepth_session_free(struct SkipdepthSession *session);

/**
 * Predict one action and advance the guidance state. `info` may be null.
 *
 * # Safety
 * Buffers must hold the stated number of values.
 */
enum SkipdepthStatus skipdepth_session_step(struct SkipdepthSession *session,
                                            const double *obs,
                                            size_t obs_len,
                                            const double *instr,
                                            size_t instr_len,
                                            double *action_out,
                                            size_t action_len,
                                            struct SkipdepthStepInfo *info);

/**
 * Current allow points, one per segment.
 *
 * # Safety
 * `count` must be writable; `points_out` may be null.
 */
enum SkipdepthStatus skipdepth_session_allow_points(const struct SkipdepthSession *session,
                                                    size_t *points_out,
                                                    size_t capacity,
                                                    size_t *count);

/**
 * Continuity of a window of `n_actions` row-major actions of width
 * `action_dim`, over its last `k` differences. `warmup` (nullable) is set to
 * 1 when fewer than `k` differences were available.
 *
 * # Safety
 * `actions` must hold `n_actions * action_dim` values.
 */
enum SkipdepthStatus skipdepth_continuity(const double *actions,
                                          size_t n_actions,
                                          size_t action_dim,
                                          size_t k,
                                          double *value_out,
                                          uint8_t *warmup);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKIPDEPTH_H */
