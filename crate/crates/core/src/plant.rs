//! Quasi-static deformable-object plant.
//!
//! The plant owns the ground-truth deformation model: a linear (or optionally
//! co-rotational) FEM solid with zero-displacement constraints on fixed nodes
//! and position-driven manipulation nodes. Each step advances the
//! manipulation targets and re-solves the elastic equilibrium of the free
//! nodes; the constrained-system factorization is computed once at load time
//! for the linear model because the Dirichlet pattern never changes.

use nalgebra::{DMatrix, DVector, Matrix3, Point3, Vector3};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};

use crate::error::{Error, Result};
use crate::fem::{assemble_system, element_stiffness_tet};
use crate::linalg::csc_mul_vec;
use crate::mesh::{MaterialParams, SolidMesh};

/// Elasticity model of the plant solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ElasticityModel {
    #[default]
    Linear,
    /// Per-element rotation extraction; used for large-deformation scenarios.
    Corotational,
}

/// Snapshot of the plant visible to the harness. Only `sample_positions` and
/// `manip_positions` may feed the controller; `full_state` exists for result
/// metrics.
#[derive(Debug, Clone)]
pub struct PlantObservation {
    pub sample_positions: Vec<Point3<f64>>,
    pub manip_positions: DVector<f64>,
    pub full_state: DVector<f64>,
}

/// Ground-truth deformable object under quasi-static manipulation.
pub struct Plant {
    pub mesh: SolidMesh,
    pub material: MaterialParams,
    pub model: ElasticityModel,
    pub fixed: Vec<usize>,
    pub manip: Vec<usize>,
    pub sample_ids: Vec<usize>,
    stiffness: CscMatrix<f64>,
    rest: DVector<f64>,
    state: DVector<f64>,
    manip_targets: DVector<f64>,
    free_dofs: Vec<usize>,
    constrained_dofs: Vec<usize>,
    dof_slot: Vec<isize>,
    k_fc: CscMatrix<f64>,
    factorization: CscCholesky<f64>,
    element_stiffness: Vec<nalgebra::SMatrix<f64, 12, 12>>,
    rest_shape_inv: Vec<Matrix3<f64>>,
}

impl Plant {
    pub fn new(
        mesh: SolidMesh,
        material: MaterialParams,
        model: ElasticityModel,
        fixed: Vec<usize>,
        manip: Vec<usize>,
        sample_ids: Vec<usize>,
    ) -> Result<Self> {
        mesh.validate()?;
        let n = mesh.node_count();
        for (label, ids) in [("fixed", &fixed), ("manip", &manip), ("sample", &sample_ids)] {
            for &id in ids.iter() {
                if id >= n {
                    return Err(Error::Config(format!(
                        "{label} node {id} out of range ({n} nodes)"
                    )));
                }
            }
        }
        if manip.is_empty() {
            return Err(Error::Config("no manipulation nodes".into()));
        }
        if fixed.iter().any(|f| manip.contains(f)) {
            return Err(Error::Config("fixed and manipulation nodes overlap".into()));
        }
        if fixed.len() < 3 {
            return Err(Error::Config(format!(
                "need at least 3 fixed nodes, got {}",
                fixed.len()
            )));
        }
        // Non-collinearity of the fixed set.
        let pa = mesh.nodes[fixed[0]];
        let mut collinear = true;
        'outer: for &b in &fixed[1..] {
            for &c in &fixed[1..] {
                let cross = (mesh.nodes[b] - pa).cross(&(mesh.nodes[c] - pa));
                if cross.norm() > 1e-12 {
                    collinear = false;
                    break 'outer;
                }
            }
        }
        if collinear {
            return Err(Error::Config("fixed nodes are collinear".into()));
        }

        let sys = assemble_system(&mesh, &material)?;
        let stiffness = sys.stiffness;

        let mut constrained_nodes: Vec<usize> = fixed.iter().chain(manip.iter()).copied().collect();
        constrained_nodes.sort_unstable();
        constrained_nodes.dedup();
        let mut dof_slot = vec![0isize; 3 * n];
        let mut free_dofs = Vec::new();
        let mut constrained_dofs = Vec::new();
        for node in 0..n {
            let constrained = constrained_nodes.binary_search(&node).is_ok();
            for c in 0..3 {
                let dof = 3 * node + c;
                if constrained {
                    dof_slot[dof] = -(constrained_dofs.len() as isize) - 1;
                    constrained_dofs.push(dof);
                } else {
                    dof_slot[dof] = free_dofs.len() as isize;
                    free_dofs.push(dof);
                }
            }
        }

        let (k_ff, k_fc) = split_stiffness(&stiffness, &dof_slot, free_dofs.len(), constrained_dofs.len());
        let factorization = CscCholesky::factor(&k_ff).map_err(|e| {
            Error::Config(format!(
                "constrained stiffness is singular (check fixed nodes): {e:?}"
            ))
        })?;

        let mut rest = DVector::zeros(3 * n);
        for (i, p) in mesh.nodes.iter().enumerate() {
            rest[3 * i] = p.x;
            rest[3 * i + 1] = p.y;
            rest[3 * i + 2] = p.z;
        }
        let mut manip_targets = DVector::zeros(3 * manip.len());
        for (slot, &node) in manip.iter().enumerate() {
            for c in 0..3 {
                manip_targets[3 * slot + c] = rest[3 * node + c];
            }
        }

        // Per-element data for the co-rotational solve.
        let mut element_stiffness = Vec::new();
        let mut rest_shape_inv = Vec::new();
        if model == ElasticityModel::Corotational {
            for tet in &mesh.tets {
                let verts = [
                    mesh.nodes[tet[0]],
                    mesh.nodes[tet[1]],
                    mesh.nodes[tet[2]],
                    mesh.nodes[tet[3]],
                ];
                let (ke, _) =
                    element_stiffness_tet(&verts, material.youngs_modulus, material.poisson_ratio)?;
                element_stiffness.push(ke);
                let dm = Matrix3::from_columns(&[
                    verts[1] - verts[0],
                    verts[2] - verts[0],
                    verts[3] - verts[0],
                ]);
                rest_shape_inv.push(dm.try_inverse().ok_or_else(|| {
                    Error::InvalidMesh("degenerate rest tetrahedron".into())
                })?);
            }
        }

        let state = rest.clone();
        Ok(Self {
            mesh,
            material,
            model,
            fixed,
            manip,
            sample_ids,
            stiffness,
            rest,
            state,
            manip_targets,
            free_dofs,
            constrained_dofs,
            dof_slot,
            k_fc,
            factorization,
            element_stiffness,
            rest_shape_inv,
        })
    }

    pub fn manip_count(&self) -> usize {
        self.manip.len()
    }

    pub fn rest_positions(&self) -> &DVector<f64> {
        &self.rest
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }

    pub fn manip_targets(&self) -> &DVector<f64> {
        &self.manip_targets
    }

    /// Elastic energy 1/2 u^T K u of the current state.
    pub fn elastic_energy(&self) -> f64 {
        let u = &self.state - &self.rest;
        0.5 * u.dot(&csc_mul_vec(&self.stiffness, &u))
    }

    pub fn observe(&self) -> PlantObservation {
        let sample_positions = self
            .sample_ids
            .iter()
            .map(|&id| {
                Point3::new(
                    self.state[3 * id],
                    self.state[3 * id + 1],
                    self.state[3 * id + 2],
                )
            })
            .collect();
        let mut manip_positions = DVector::zeros(3 * self.manip.len());
        for (slot, &node) in self.manip.iter().enumerate() {
            for c in 0..3 {
                manip_positions[3 * slot + c] = self.state[3 * node + c];
            }
        }
        PlantObservation {
            sample_positions,
            manip_positions,
            full_state: self.state.clone(),
        }
    }

    /// Advance manipulation targets by v*dt and re-solve the equilibrium.
    pub fn step(&mut self, v: &DVector<f64>, dt: f64) -> Result<PlantObservation> {
        if v.len() != 3 * self.manip.len() {
            return Err(Error::InvalidInput(format!(
                "command has {} entries for {} manipulation nodes",
                v.len(),
                self.manip.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) || !dt.is_finite() {
            return Err(Error::Numeric("non-finite velocity command".into()));
        }
        if v.iter().all(|&x| x == 0.0) {
            // Same Dirichlet data: the state is already the equilibrium.
            return Ok(self.observe());
        }
        self.manip_targets += v * dt;
        self.solve_equilibrium()?;
        Ok(self.observe())
    }

    /// Set manipulation targets directly (desired-deformation generation and
    /// Jacobian probing).
    pub fn set_manip_targets(&mut self, targets: &DVector<f64>) -> Result<PlantObservation> {
        if targets.len() != 3 * self.manip.len() {
            return Err(Error::InvalidInput("bad target dimension".into()));
        }
        if targets.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite manipulation targets".into()));
        }
        self.manip_targets = targets.clone();
        self.solve_equilibrium()?;
        Ok(self.observe())
    }

    fn constrained_values(&self) -> DVector<f64> {
        let mut u_c = DVector::zeros(self.constrained_dofs.len());
        for (slot, &dof) in self.constrained_dofs.iter().enumerate() {
            let node = dof / 3;
            let c = dof % 3;
            if let Some(mslot) = self.manip.iter().position(|&m| m == node) {
                u_c[slot] = self.manip_targets[3 * mslot + c] - self.rest[dof];
            }
            // Fixed nodes stay at zero displacement.
        }
        u_c
    }

    fn solve_equilibrium(&mut self) -> Result<()> {
        match self.model {
            ElasticityModel::Linear => self.solve_linear(),
            ElasticityModel::Corotational => self.solve_corotational(),
        }
    }

    fn solve_linear(&mut self) -> Result<()> {
        let u_c = self.constrained_values();
        let rhs = -csc_mul_vec(&self.k_fc, &u_c);
        let rhs_mat = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
        let u_f = self.factorization.solve(&rhs_mat);
        for (slot, &dof) in self.free_dofs.iter().enumerate() {
            self.state[dof] = self.rest[dof] + u_f[(slot, 0)];
        }
        for (slot, &dof) in self.constrained_dofs.iter().enumerate() {
            self.state[dof] = self.rest[dof] + u_c[slot];
        }
        Ok(())
    }

    /// Co-rotational equilibrium by Newton iteration: per-element rotations
    /// from the polar decomposition of the deformation gradient, tangent
    /// R K_e R^T, residual R K_e (R^T x - x_rest).
    fn solve_corotational(&mut self) -> Result<()> {
        let u_c = self.constrained_values();
        // Start from the previous state with constraints applied.
        for (slot, &dof) in self.constrained_dofs.iter().enumerate() {
            self.state[dof] = self.rest[dof] + u_c[slot];
        }
        let max_iters = 60;
        let tol_scale = {
            // Fall back to a mesh-scale floor when the Dirichlet data is at
            // rest, where the displacement norm alone collapses to zero.
            let disp_norm = u_c.norm().max(1e-9 * self.rest.norm());
            crate::linalg::csc_inf_norm(&self.stiffness) * disp_norm
        };
        for iter in 0..max_iters {
            let (residual, tangent) = self.corotational_residual_and_tangent();
            let mut r_f = DVector::zeros(self.free_dofs.len());
            for (slot, &dof) in self.free_dofs.iter().enumerate() {
                r_f[slot] = residual[dof];
            }
            let r_norm = r_f.norm();
            if r_norm <= 1e-9 * tol_scale {
                return Ok(());
            }
            let (k_ff, _) = split_stiffness(
                &tangent,
                &self.dof_slot,
                self.free_dofs.len(),
                self.constrained_dofs.len(),
            );
            let chol = CscCholesky::factor(&k_ff).map_err(|e| {
                Error::Numeric(format!(
                    "co-rotational tangent factorization failed at iter {iter}: {e:?}"
                ))
            })?;
            let rhs = DMatrix::from_column_slice(r_f.len(), 1, r_f.as_slice());
            let du = chol.solve(&rhs);
            // Backtracking on the residual norm: the rotated tangent ignores
            // rotation derivatives, so a full step can overshoot at large
            // rotations.
            let saved = self.state.clone();
            let mut alpha = 1.0;
            for _ in 0..6 {
                for (slot, &dof) in self.free_dofs.iter().enumerate() {
                    self.state[dof] = saved[dof] - alpha * du[(slot, 0)];
                }
                let trial = self.corotational_residual();
                let trial_norm: f64 = self
                    .free_dofs
                    .iter()
                    .map(|&dof| trial[dof] * trial[dof])
                    .sum::<f64>()
                    .sqrt();
                if trial_norm < r_norm {
                    break;
                }
                alpha *= 0.5;
            }
        }
        // Accept the last iterate if the residual is small relative to the
        // linear-solve scale; otherwise report non-convergence.
        let residual = self.corotational_residual();
        let r_f_norm: f64 = self
            .free_dofs
            .iter()
            .map(|&dof| residual[dof] * residual[dof])
            .sum::<f64>()
            .sqrt();
        if r_f_norm <= 1e-5 * tol_scale {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "co-rotational solve did not converge: residual {r_f_norm:.3e} vs scale {tol_scale:.3e}"
            )))
        }
    }

    fn corotational_residual_and_tangent(&self) -> (DVector<f64>, CscMatrix<f64>) {
        let (residual, tangent) = self.corotational_assemble(true);
        (residual, tangent.expect("tangent requested"))
    }

    fn corotational_residual(&self) -> DVector<f64> {
        self.corotational_assemble(false).0
    }

    fn corotational_assemble(&self, with_tangent: bool) -> (DVector<f64>, Option<CscMatrix<f64>>) {
        let n = self.mesh.node_count();
        let mut residual = DVector::zeros(3 * n);
        let mut coo = CooMatrix::new(3 * n, 3 * n);
        for (e, tet) in self.mesh.tets.iter().enumerate() {
            let x = |i: usize| {
                Vector3::new(
                    self.state[3 * tet[i]],
                    self.state[3 * tet[i] + 1],
                    self.state[3 * tet[i] + 2],
                )
            };
            let ds = Matrix3::from_columns(&[x(1) - x(0), x(2) - x(0), x(3) - x(0)]);
            let f = ds * self.rest_shape_inv[e];
            let rot = polar_rotation(&f);
            let ke = &self.element_stiffness[e];
            // Rotated rest positions vs current: f_int = R K (R^T x - x0).
            let mut local = nalgebra::SVector::<f64, 12>::zeros();
            for i in 0..4 {
                let xi = x(i);
                let back = rot.transpose() * xi;
                let rest = self.mesh.nodes[tet[i]].coords;
                for c in 0..3 {
                    local[3 * i + c] = back[c] - rest[c];
                }
            }
            let forces = ke * local;
            for i in 0..4 {
                let fi = rot * Vector3::new(forces[3 * i], forces[3 * i + 1], forces[3 * i + 2]);
                for c in 0..3 {
                    residual[3 * tet[i] + c] += fi[c];
                }
            }
            if !with_tangent {
                continue;
            }
            // Tangent blocks R K_ab R^T.
            for a in 0..4 {
                for b in 0..4 {
                    let mut kab = Matrix3::zeros();
                    for r in 0..3 {
                        for c in 0..3 {
                            kab[(r, c)] = ke[(3 * a + r, 3 * b + c)];
                        }
                    }
                    let rot_kab = rot * kab * rot.transpose();
                    for r in 0..3 {
                        for c in 0..3 {
                            coo.push(3 * tet[a] + r, 3 * tet[b] + c, rot_kab[(r, c)]);
                        }
                    }
                }
            }
        }
        let tangent = with_tangent.then(|| CscMatrix::from(&coo));
        (residual, tangent)
    }

    /// Mesh error sum and manipulation errors against a desired state.
    pub fn metrics(&self, desired_full_state: &DVector<f64>, desired_manip: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        if desired_full_state.len() != self.state.len() {
            return Err(Error::InvalidInput(format!(
                "desired state has {} entries, plant has {}",
                desired_full_state.len(),
                self.state.len()
            )));
        }
        if desired_manip.len() != 3 * self.manip.len() {
            return Err(Error::InvalidInput("bad desired manipulation dimension".into()));
        }
        let diff = &self.state - desired_full_state;
        let e_x = diff.dot(&diff);
        let mut e_d = DVector::zeros(3 * self.manip.len());
        for (slot, &node) in self.manip.iter().enumerate() {
            for c in 0..3 {
                e_d[3 * slot + c] = self.state[3 * node + c] - desired_manip[3 * slot + c];
            }
        }
        Ok((e_x, e_d))
    }
}

fn split_stiffness(
    stiffness: &CscMatrix<f64>,
    dof_slot: &[isize],
    n_free: usize,
    n_constrained: usize,
) -> (CscMatrix<f64>, CscMatrix<f64>) {
    let mut ff = CooMatrix::new(n_free, n_free);
    let mut fc = CooMatrix::new(n_free, n_constrained);
    for (i, j, v) in stiffness.triplet_iter() {
        let si = dof_slot[i];
        let sj = dof_slot[j];
        if si >= 0 && sj >= 0 {
            ff.push(si as usize, sj as usize, *v);
        } else if si >= 0 && sj < 0 {
            fc.push(si as usize, (-sj - 1) as usize, *v);
        }
    }
    (CscMatrix::from(&ff), CscMatrix::from(&fc))
}

/// Rotation factor of the polar decomposition F = R S via SVD with a
/// determinant fix for reflections.
fn polar_rotation(f: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = f.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u_fixed = u;
        for i in 0..3 {
            u_fixed[(i, 2)] = -u_fixed[(i, 2)];
        }
        r = u_fixed * v_t;
    }
    r
}

/// Desired deformation produced by ramping the manipulation nodes.
#[derive(Debug, Clone)]
pub struct DesiredState {
    pub full_state: DVector<f64>,
    /// Desired positions of the scenario's sample nodes, by slot.
    pub sample_positions: Vec<Point3<f64>>,
    /// Desired positions of the manipulation nodes, stacked (3k).
    pub manip_positions: DVector<f64>,
}

/// Ramp the manipulation nodes linearly by `manip_displacement` over `steps`
/// quasi-static solves and record the final configuration. The plant is
/// restored to rest afterwards.
pub fn generate_desired(
    plant: &mut Plant,
    manip_displacement: &DVector<f64>,
    steps: usize,
) -> Result<DesiredState> {
    if manip_displacement.len() != 3 * plant.manip.len() {
        return Err(Error::InvalidInput(format!(
            "displacement has {} entries for {} manipulation nodes",
            manip_displacement.len(),
            plant.manip.len()
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidRequest("ramp needs at least one step".into()));
    }
    let rest_targets = {
        let mut t = DVector::zeros(3 * plant.manip.len());
        for (slot, &node) in plant.manip.iter().enumerate() {
            for c in 0..3 {
                t[3 * slot + c] = plant.rest[3 * node + c];
            }
        }
        t
    };
    let mut obs = plant.observe();
    for s in 1..=steps {
        let frac = s as f64 / steps as f64;
        let targets = &rest_targets + manip_displacement * frac;
        obs = plant.set_manip_targets(&targets)?;
    }
    let desired = DesiredState {
        full_state: obs.full_state,
        sample_positions: obs.sample_positions,
        manip_positions: obs.manip_positions,
    };
    // Restore rest directly; the rest configuration is an equilibrium of the
    // rest Dirichlet data, so no solve is needed.
    plant.manip_targets = rest_targets;
    plant.state = plant.rest.clone();
    Ok(desired)
}
