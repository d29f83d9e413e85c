#ifndef DEPTHADAPT_H
#define DEPTHADAPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DaStatus {
  DA_STATUS_OK = 0,
  DA_STATUS_NULL_POINTER = 1,
  DA_STATUS_INVALID_ARGUMENT = 2,
  DA_STATUS_FORMAT = 3,
  DA_STATUS_IO = 4,
  DA_STATUS_DEGENERATE_GEOMETRY = 5,
  DA_STATUS_CHEIRALITY = 6,
  DA_STATUS_EMPTY_INPUT = 7,
  DA_STATUS_PANIC = 99,
} DaStatus;

// Opaque handle to a loaded depth network.
typedef struct DaNet DaNet;

typedef struct DaIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  size_t width;
  size_t height;
} DaIntrinsics;

// Rigid transform `x -> R x + t` with `R` stored row-major.
typedef struct DaPose {
  double rotation[9];
  double translation[3];
} DaPose;

typedef struct DaDepthMetrics {
  double abs_rel;
  double sq_rel;
  double rmse;
  double delta1;
  double delta2;
  double delta3;
  size_t count;
} DaDepthMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null if the last call
// succeeded. The pointer stays valid until the next call on this thread.
const char *da_last_error(void);

const char *da_version(void);

// Loads a network from a NET1 file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DaStatus da_net_load(const char *path, struct DaNet **out);

// Loads a network from an in-memory NET1 buffer.
//
// # Safety
// `data` must point to `len` readable bytes and `out` must be valid.
enum DaStatus da_net_load_bytes(const uint8_t *data, size_t len, struct DaNet **out);

// # Safety
// `net` must be null or a handle from a `da_net_load*` call not yet freed.
void da_net_free(struct DaNet *net);

// Predicts a depth map for a grayscale image with finite intensities,
// nominally in `[0, 1]`.
//
// # Safety
// `image` and `depth_out` must each hold `width * height` doubles.
enum DaStatus da_net_predict(const struct DaNet *net,
                             const double *image,
                             size_t width,
                             size_t height,
                             double *depth_out);

// Triangulates one match. `t_ab` maps frame-a coordinates into frame b and
// the point is written in frame-b coordinates.
//
// # Safety
// `k`, `t_ab` and `point_out` (three doubles) must be valid.
enum DaStatus da_triangulate(const struct DaIntrinsics *k,
                             const struct DaPose *t_ab,
                             double u_a,
                             double v_a,
                             double u_b,
                             double v_b,
                             double *point_out);

// Solves the camera pose from `count` world points (xyz triples) and their
// observed pixels (uv pairs), starting at `init` (identity when null).
//
// # Safety
// `points` holds `3 * count` doubles, `pixels` holds `2 * count` doubles.
enum DaStatus da_solve_pose(const struct DaIntrinsics *k,
                            const double *points,
                            const double *pixels,
                            size_t count,
                            const struct DaPose *init,
                            struct DaPose *pose_out);

// Densifies `count` sparse samples (u, v, depth triples) into a dense map
// using the segmentation labels and a `divisions x divisions` grid. Label 0
// marks unlabeled pixels.
//
// # Safety
// `samples` holds `3 * count` doubles; `labels` and `depth_out` hold
// `width * height` elements.
enum DaStatus da_densify(const double *samples,
                         size_t count,
                         const uint16_t *labels,
                         size_t width,
                         size_t height,
                         size_t divisions,
                         double *depth_out);

// Depth error metrics over pixels where both maps are positive and the
// ground truth is at most `max_depth`.
//
// # Safety
// `pred` and `gt` hold `width * height` doubles; `out` must be valid.
enum DaStatus da_depth_metrics(const double *pred,
                               const double *gt,
                               size_t width,
                               size_t height,
                               double max_depth,
                               struct DaDepthMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEPTHADAPT_H */
