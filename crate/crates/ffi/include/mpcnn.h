#ifndef MPCNN_H
#define MPCNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MpcnnStatus {
  MPCNN_STATUS_OK = 0,
  MPCNN_STATUS_NULL_POINTER = 1,
  MPCNN_STATUS_INVALID_ARGUMENT = 2,
  MPCNN_STATUS_IO = 3,
  MPCNN_STATUS_MALFORMED = 4,
  MPCNN_STATUS_NUMERICAL = 5,
  MPCNN_STATUS_PANIC = 6,
} MpcnnStatus;

/**
 * Network policy with the control box its outputs are clamped into.
 */
typedef struct MpcnnModel MpcnnModel;

/**
 * MPC expert with a fixed configuration.
 */
typedef struct MpcnnMpc MpcnnMpc;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mpcnn_version(void);

/**
 * Message for the last failed call on this thread, or an empty string.
 *
 * The pointer stays valid until the next call into the library on the same
 * thread.
 */
const char *mpcnn_last_error(void);

/**
 * One RK4 step of the plant. `state` and `out_state` hold 4 values, `control`
 * holds 2. The control is applied as given, without clamping.
 *
 * # Safety
 * Pointers must be null or valid for the stated number of doubles.
 */
enum MpcnnStatus mpcnn_plant_step(const double *state,
                                  const double *control,
                                  double dt,
                                  double *out_state);

/**
 * RMSE over both channels of `n` control pairs. `expert` and `predicted`
 * hold `2 * n` interleaved values `(u1, u2)`.
 *
 * # Safety
 * `expert` and `predicted` must be valid for `2 * n` doubles.
 */
enum MpcnnStatus mpcnn_rmse(const double *expert, const double *predicted, size_t n, double *out);

/**
 * Freshly initialized network for `seed`, clamped to the default control box.
 *
 * # Safety
 * `out` must be null or valid for one pointer write.
 */
enum MpcnnStatus mpcnn_model_init(uint64_t seed, struct MpcnnModel **out);

/**
 * Loads a weight file written by `mpcnn_model_save` or the `mpcnn` CLI.
 *
 * # Safety
 * `path` must be null or a NUL-terminated string; `out` must be null or
 * valid for one pointer write.
 */
enum MpcnnStatus mpcnn_model_load(const char *path, struct MpcnnModel **out);

/**
 * # Safety
 * `model` must be null or a live handle; `path` a NUL-terminated string.
 */
enum MpcnnStatus mpcnn_model_save(const struct MpcnnModel *model, const char *path);

/**
 * Clamped network output for one state. `state` holds 4 values, `out_control` 2.
 *
 * # Safety
 * `model` must be null or a live handle; arrays as stated.
 */
enum MpcnnStatus mpcnn_model_forward(const struct MpcnnModel *model,
                                     const double *state,
                                     double *out_control);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void mpcnn_model_free(struct MpcnnModel *model);

/**
 * MPC expert with the default configuration.
 *
 * # Safety
 * `out` must be null or valid for one pointer write.
 */
enum MpcnnStatus mpcnn_mpc_new(struct MpcnnMpc **out);

/**
 * MPC expert from a JSON object; missing fields take their defaults.
 *
 * # Safety
 * `json` must be null or a NUL-terminated string; `out` must be null or
 * valid for one pointer write.
 */
enum MpcnnStatus mpcnn_mpc_from_json(const char *json, struct MpcnnMpc **out);

/**
 * Cold-started solve from `state` (4 values); writes the first control (2 values).
 *
 * # Safety
 * `mpc` must be null or a live handle; arrays as stated.
 */
enum MpcnnStatus mpcnn_mpc_solve(const struct MpcnnMpc *mpc,
                                 const double *state,
                                 double *out_control);

/**
 * # Safety
 * `mpc` must be null or a handle not yet freed.
 */
void mpcnn_mpc_free(struct MpcnnMpc *mpc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPCNN_H */
