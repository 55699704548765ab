//! Object-mesh mapping: radial projection of points onto the base-mesh
//! surface, shape-function allocation, and the deformation feature projector.
//!
//! Every object point is projected along the ray from the mesh center through
//! its rest position; the hit surface triangle's barycentric coordinates act
//! as FE shape-function weights. Stacking those weights gives the sparse
//! allocating matrix whose transpose distributes measured displacements onto
//! mesh nodes as virtual forces.

use nalgebra::{DMatrix, DVector, Point3, Vector3};
use nalgebra_sparse::{CooMatrix, CscMatrix};

use crate::error::{Error, Result};
use crate::linalg::csc_to_dense;
use crate::mesh::SolidMesh;
use crate::modal::ModalBasis;

/// Radial projection of one object point onto a surface triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceProjection {
    /// Index of the source point in the projected set.
    pub point_index: usize,
    /// Surface triangle hit by the center ray.
    pub tri: usize,
    /// Barycentric weights on that triangle's three nodes.
    pub weights: [f64; 3],
    /// Projected position on the mesh surface (base frame).
    pub eta: Point3<f64>,
}

/// Sparse allocating matrix for a point set, with the matching block of mode
/// shape rows.
#[derive(Debug, Clone)]
pub struct AllocationMap {
    pub projections: Vec<SurfaceProjection>,
    /// 3l x 3n allocating matrix; each 3-row block repeats a triangle's
    /// barycentric weights on the coordinate diagonals.
    pub weights: CscMatrix<f64>,
    /// The n allocation nodes (ascending), i.e. the columns of `weights`.
    pub node_ids: Vec<usize>,
    /// 3n x m block of mode-shape rows for `node_ids`.
    pub phi_rows: DMatrix<f64>,
}

/// Projects measured point displacements into the modal feature space.
#[derive(Debug, Clone)]
pub struct FeatureProjector {
    /// 3n x 3l mesh projection (transpose of the allocating matrix).
    pub mesh_projection: CscMatrix<f64>,
    /// m x 3n modal projection: rectifier times the mode-shape rows.
    pub modal_projection: DMatrix<f64>,
    /// Rest positions of the surface projections, stacked (3l).
    pub rest_eta: DVector<f64>,
    /// Cached m x 3l product of the two projections.
    combined: DMatrix<f64>,
}

impl FeatureProjector {
    pub fn feature_dim(&self) -> usize {
        self.combined.nrows()
    }

    pub fn sample_dim(&self) -> usize {
        self.combined.ncols()
    }

    /// The combined m x 3l feature computation matrix.
    pub fn combined(&self) -> &DMatrix<f64> {
        &self.combined
    }
}

/// Intersect the ray `origin + t*dir` (t > 0) with a triangle
/// (Moller-Trumbore). Returns (t, barycentric weights).
fn ray_triangle(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Option<(f64, [f64; 3])> {
    const EPS: f64 = 1e-12;
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    // Scale-aware degeneracy guard.
    let scale = e1.norm() * e2.norm() * dir.norm();
    if det.abs() <= EPS * scale.max(f64::MIN_POSITIVE) {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(&pvec) * inv_det;
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv_det;
    let t = e2.dot(&qvec) * inv_det;
    let tol = 1e-10;
    if u >= -tol && v >= -tol && u + v <= 1.0 + tol && t > 0.0 {
        Some((t, [1.0 - u - v, u, v]))
    } else {
        None
    }
}

/// Project rest points radially onto the mesh surface.
///
/// Rays that graze an edge or vertex can hit several triangles; the lowest
/// triangle id wins, which keeps the assignment deterministic.
pub fn project_points(
    mesh: &SolidMesh,
    rest_points: &[Point3<f64>],
) -> Result<Vec<SurfaceProjection>> {
    let mut out = Vec::with_capacity(rest_points.len());
    let scale = mesh
        .nodes
        .iter()
        .map(|p| (p - mesh.center).norm())
        .fold(0.0f64, f64::max);
    for (pi, p) in rest_points.iter().enumerate() {
        let dir = p - mesh.center;
        if dir.norm() <= 1e-12 * scale.max(1.0) {
            return Err(Error::InvalidPoint(format!(
                "point {pi} coincides with the mesh center"
            )));
        }
        let mut hit: Option<(usize, [f64; 3], f64)> = None;
        for (ti, tri) in mesh.surface_tris.iter().enumerate() {
            if let Some((t, w)) = ray_triangle(
                &mesh.center,
                &dir,
                &mesh.nodes[tri[0]],
                &mesh.nodes[tri[1]],
                &mesh.nodes[tri[2]],
            ) {
                if hit.is_none() {
                    hit = Some((ti, w, t));
                }
            }
        }
        let (ti, mut w, _t) =
            hit.ok_or_else(|| Error::InvalidPoint(format!("ray of point {pi} misses the surface")))?;
        // Clamp tolerance-level negatives and renormalize to a partition of unity.
        for wi in w.iter_mut() {
            if *wi < 0.0 {
                *wi = 0.0;
            }
        }
        let sum: f64 = w.iter().sum();
        for wi in w.iter_mut() {
            *wi /= sum;
        }
        let tri = mesh.surface_tris[ti];
        let eta = Point3::from(
            w[0] * mesh.nodes[tri[0]].coords
                + w[1] * mesh.nodes[tri[1]].coords
                + w[2] * mesh.nodes[tri[2]].coords,
        );
        out.push(SurfaceProjection {
            point_index: pi,
            tri: ti,
            weights: w,
            eta,
        });
    }
    Ok(out)
}

/// Assemble the sparse allocating matrix and the matching mode-shape rows.
pub fn build_allocation(
    mesh: &SolidMesh,
    basis: &ModalBasis,
    projections: &[SurfaceProjection],
) -> Result<AllocationMap> {
    if projections.is_empty() {
        return Err(Error::InvalidRequest("no projections to allocate".into()));
    }
    if basis.dof_count() != mesh.dof_count() {
        return Err(Error::InvalidInput(format!(
            "basis has {} DOFs but mesh has {}",
            basis.dof_count(),
            mesh.dof_count()
        )));
    }
    let mut node_ids: Vec<usize> = projections
        .iter()
        .flat_map(|p| mesh.surface_tris[p.tri].iter().copied())
        .collect();
    node_ids.sort_unstable();
    node_ids.dedup();
    let slot_of = |node: usize| node_ids.binary_search(&node).expect("allocation node present");

    let l = projections.len();
    let n = node_ids.len();
    let mut coo = CooMatrix::new(3 * l, 3 * n);
    for (row_block, proj) in projections.iter().enumerate() {
        let tri = mesh.surface_tris[proj.tri];
        for (corner, &node) in tri.iter().enumerate() {
            let w = proj.weights[corner];
            if w == 0.0 {
                continue;
            }
            let col_block = slot_of(node);
            for c in 0..3 {
                coo.push(3 * row_block + c, 3 * col_block + c, w);
            }
        }
    }
    let weights = CscMatrix::from(&coo);

    let m = basis.mode_count();
    let mut phi_rows = DMatrix::zeros(3 * n, m);
    for (slot, &node) in node_ids.iter().enumerate() {
        for j in 0..m {
            for c in 0..3 {
                phi_rows[(3 * slot + c, j)] = basis.mode_shapes()[(3 * node + c, j)];
            }
        }
    }
    Ok(AllocationMap {
        projections: projections.to_vec(),
        weights,
        node_ids,
        phi_rows,
    })
}

/// Build the feature projector from a basis and an allocation.
///
/// Fails when the sampling dimension is below m/3 or when the combined
/// projector loses rank (its smallest retained singular value must exceed
/// 1e-10 of the largest).
pub fn build_feature_projector(
    basis: &ModalBasis,
    alloc: &AllocationMap,
) -> Result<FeatureProjector> {
    let m = basis.mode_count();
    let l = alloc.projections.len();
    if 3 * l < m {
        return Err(Error::InvalidRequest(format!(
            "need at least ceil(m/3) = {} samples for m = {m}, got {l}",
            m.div_ceil(3)
        )));
    }
    let mesh_projection = alloc.weights.transpose();

    let n3 = alloc.phi_rows.nrows();
    let mut modal_projection = DMatrix::zeros(m, n3);
    for j in 0..m {
        for i in 0..n3 {
            modal_projection[(j, i)] = basis.rectifier()[j] * alloc.phi_rows[(i, j)];
        }
    }
    let combined = &modal_projection * csc_to_dense(&mesh_projection);

    // Rank certificate on the combined projector.
    let svd = combined.clone().svd(false, false);
    let max_sv = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * max_sv)
        .count();
    if rank < m {
        return Err(Error::RankDeficient {
            deficiency: m - rank,
            expected: m,
            detail: format!("combined projector rank {rank} over {l} samples"),
        });
    }

    let mut rest_eta = DVector::zeros(3 * l);
    for (i, proj) in alloc.projections.iter().enumerate() {
        rest_eta[3 * i] = proj.eta.x;
        rest_eta[3 * i + 1] = proj.eta.y;
        rest_eta[3 * i + 2] = proj.eta.z;
    }
    Ok(FeatureProjector {
        mesh_projection,
        modal_projection,
        rest_eta,
        combined,
    })
}

/// Rebuild the projector after the sampled point set changed (occlusion,
/// sampling loss, recovery). Desired features must be recomputed by the
/// caller against the new projector.
pub fn reassemble_on_sampling_change(
    basis: &ModalBasis,
    mesh: &SolidMesh,
    new_rest_points: &[Point3<f64>],
) -> Result<FeatureProjector> {
    let projections = project_points(mesh, new_rest_points)?;
    let alloc = build_allocation(mesh, basis, &projections)?;
    build_feature_projector(basis, &alloc)
}
