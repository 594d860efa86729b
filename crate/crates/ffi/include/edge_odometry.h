#ifndef EDGE_ODOMETRY_H
#define EDGE_ODOMETRY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EoStatus {
  EO_STATUS_OK = 0,
  EO_STATUS_NULL_POINTER = 1,
  EO_STATUS_INVALID_ARGUMENT = 2,
  EO_STATUS_DATA_ERROR = 3,
  EO_STATUS_TRACKING_LOST = 4,
  EO_STATUS_PANIC = 5,
} EoStatus;

/**
 * Opaque odometry session.
 */
typedef struct EoOdometry EoOdometry;

/**
 * Opaque list of poses.
 */
typedef struct EoTrajectory EoTrajectory;

typedef struct EoOptions {
  /**
   * Run mapping on the calling thread.
   */
  bool single_thread;
  /**
   * Track a selected edge subset instead of every edge with depth.
   */
  bool selection;
  uint32_t edges_k;
  uint32_t window_size;
  uint64_t seed;
} EoOptions;

/**
 * Pinhole camera.
 */
typedef struct EoCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} EoCamera;

/**
 * Camera-to-world pose; quaternion order is x, y, z, w.
 */
typedef struct EoPose {
  double timestamp;
  double translation[3];
  double quaternion[4];
} EoPose;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Defaults matching the command-line tool.
 */
struct EoOptions eo_options_default(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *eo_last_error(void);

const char *eo_version(void);

/**
 * Creates a session. `options` may be null for defaults.
 *
 * # Safety
 * `camera` must point to a valid camera, `options` to valid options or be
 * null, and `out` to writable storage for a handle.
 */
enum EoStatus eo_odometry_create(const struct EoCamera *camera,
                                 const struct EoOptions *options,
                                 struct EoOdometry **out);

/**
 * Releases a session; null is ignored.
 *
 * # Safety
 * `handle` must come from [`eo_odometry_create`] and not be used afterwards.
 */
void eo_odometry_destroy(struct EoOdometry *handle);

/**
 * Tracks one frame. `gray` holds `width * height` 8-bit intensities and
 * `depth` the same number of 16-bit values; meters are `depth / depth_scale`
 * and 0 marks a missing measurement. `pose_out` may be null.
 *
 * # Safety
 * `handle` must be a live session; `gray` and `depth` must point to
 * `width * height` elements of the camera size.
 */
enum EoStatus eo_odometry_push_frame(struct EoOdometry *handle,
                                     double timestamp,
                                     const uint8_t *gray,
                                     const uint16_t *depth,
                                     double depth_scale,
                                     struct EoPose *pose_out);

/**
 * Number of frames tracked so far.
 *
 * # Safety
 * `handle` must be a live session or null.
 */
size_t eo_odometry_frame_count(const struct EoOdometry *handle);

/**
 * Stops the session and returns the per-frame and refined keyframe
 * trajectories. Either output may be null. The session accepts no more
 * frames afterwards but must still be destroyed.
 *
 * # Safety
 * `handle` must be a live session; non-null outputs must be writable.
 */
enum EoStatus eo_odometry_finish(struct EoOdometry *handle,
                                 struct EoTrajectory **frames_out,
                                 struct EoTrajectory **keyframes_out);

/**
 * # Safety
 * `trajectory` must be a live trajectory or null.
 */
size_t eo_trajectory_len(const struct EoTrajectory *trajectory);

/**
 * # Safety
 * `trajectory` must be a live trajectory and `out` writable.
 */
enum EoStatus eo_trajectory_get(const struct EoTrajectory *trajectory,
                                size_t index,
                                struct EoPose *out);

/**
 * # Safety
 * `trajectory` must come from this library and not be used afterwards.
 */
void eo_trajectory_destroy(struct EoTrajectory *trajectory);

/**
 * Translational absolute trajectory error (RMSE, meters) after rigid
 * alignment of `estimated` onto `ground_truth`.
 *
 * # Safety
 * The pose arrays must hold the given number of elements; `rmse_out` must
 * be writable.
 */
enum EoStatus eo_ate_rmse(const struct EoPose *estimated,
                          size_t estimated_len,
                          const struct EoPose *ground_truth,
                          size_t ground_truth_len,
                          double *rmse_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDGE_ODOMETRY_H */
