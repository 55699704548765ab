#ifndef MODALSHAPE_H
#define MODALSHAPE_H

#pragma once

/* This file is generated by cbindgen from modalshape-ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum {
  MS_OK = 0,
  MS_ERR_NULL_POINTER = 1,
  MS_ERR_UTF8 = 2,
  MS_ERR_INVALID_INPUT = 3,
  MS_ERR_RANK_DEFICIENT = 4,
  MS_ERR_NUMERIC = 5,
  MS_ERR_IO = 6,
  MS_ERR_PANIC = 7,
} MsStatus;

/**
 * Opaque truncated modal basis.
 */
typedef struct MsBasis MsBasis;

/**
 * Opaque solid tetrahedral mesh.
 */
typedef struct MsMesh MsMesh;

/**
 * Opaque feature projector bound to a mesh/basis pair.
 */
typedef struct MsProjector MsProjector;

/**
 * Summary of a scenario run.
 */
typedef struct {
  double initial_error_norm;
  double final_error_norm;
  double final_mesh_error;
  double final_manip_distance;
  uint64_t ticks;
  int converged;
  int stalled;
} MsRunSummary;

/**
 * Copy the last error message into `buf` (NUL-terminated, truncated to
 * `cap`). Returns the full message length including the terminator.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes, or be null (query mode).
 */
uintptr_t ms_last_error_message(char *buf, uintptr_t cap);

/**
 * Generate a solid ellipsoid mesh.
 *
 * # Safety
 * `out` must be a valid pointer; on success it receives an owned handle that
 * must be released with [`ms_mesh_free`].
 */
MsStatus ms_mesh_generate(double ax,
                          double ay,
                          double az,
                          uintptr_t lat,
                          uintptr_t lon,
                          uintptr_t rad,
                          MsMesh **out);

/**
 * Load a mesh from the plain-text mesh format.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` as in [`ms_mesh_generate`].
 */
MsStatus ms_mesh_load(const char *path, MsMesh **out);

/**
 * Write a mesh in the plain-text mesh format.
 *
 * # Safety
 * `mesh` must be a live handle; `path` a NUL-terminated string.
 */
MsStatus ms_mesh_save(const MsMesh *mesh, const char *path);

/**
 * Number of nodes; zero for a null handle.
 *
 * # Safety
 * `mesh` must be null or a live handle.
 */
uintptr_t ms_mesh_node_count(const MsMesh *mesh);

/**
 * Release a mesh handle (null is a no-op).
 *
 * # Safety
 * `mesh` must be null or an owned handle not yet freed.
 */
void ms_mesh_free(MsMesh *mesh);

/**
 * Assemble the FEM system of `mesh` and solve for the `m` lowest modes.
 *
 * # Safety
 * `mesh` must be a live handle; `out` receives an owned handle to release
 * with [`ms_basis_free`].
 */
MsStatus ms_basis_compute(const MsMesh *mesh,
                          double youngs_modulus,
                          double poisson_ratio,
                          double total_mass,
                          uintptr_t m,
                          MsBasis **out);

/**
 * Number of retained modes; zero for a null handle.
 *
 * # Safety
 * `basis` must be null or a live handle.
 */
uintptr_t ms_basis_mode_count(const MsBasis *basis);

/**
 * Copy the squared natural frequencies (ascending) into `out`.
 *
 * # Safety
 * `out` must point to at least `len` doubles; `basis` must be live.
 */
MsStatus ms_basis_frequencies(const MsBasis *basis, double *out, uintptr_t len);

/**
 * Write the basis dump format (reload is bit-identical).
 *
 * # Safety
 * `basis` must be a live handle; `path` a NUL-terminated string.
 */
MsStatus ms_basis_save(const MsBasis *basis, const char *path);

/**
 * Release a basis handle (null is a no-op).
 *
 * # Safety
 * `basis` must be null or an owned handle not yet freed.
 */
void ms_basis_free(MsBasis *basis);

/**
 * Build the feature projector for `sample_count` rest points given as
 * interleaved xyz coordinates in the base-mesh frame.
 *
 * # Safety
 * `rest_points` must hold `3 * sample_count` doubles; handles must be live;
 * `out` receives an owned handle for [`ms_projector_free`].
 */
MsStatus ms_projector_build(const MsBasis *basis,
                            const MsMesh *mesh,
                            const double *rest_points,
                            uintptr_t sample_count,
                            MsProjector **out);

/**
 * Release a projector handle (null is a no-op).
 *
 * # Safety
 * `projector` must be null or an owned handle not yet freed.
 */
void ms_projector_free(MsProjector *projector);

/**
 * Compute the modal deformation features of one measurement. `positions`
 * holds the measured sample coordinates (interleaved xyz, base frame) in the
 * projector's sample order; `out_features` receives `feature_dim` values.
 *
 * # Safety
 * `positions` must hold `3 * sample_count` doubles matching the projector;
 * `out_features` must hold `feature_dim` doubles.
 */
MsStatus ms_features_compute(const MsProjector *projector,
                             const double *positions,
                             uintptr_t sample_count,
                             double *out_features,
                             uintptr_t feature_dim);

/**
 * Load and execute a scenario file; optionally run the point-based baseline
 * controller and write the per-tick CSV.
 *
 * # Safety
 * `scenario_path` must be a NUL-terminated string; `csv_path` may be null;
 * `out` must point to a writable summary struct.
 */
MsStatus ms_scenario_run(const char *scenario_path,
                         int baseline,
                         const char *csv_path,
                         MsRunSummary *out);

#endif  /* MODALSHAPE_H */
