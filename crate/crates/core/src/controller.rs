//! Adaptive deformation controller: constant manipulation projection,
//! parameterized Jacobian, transpose control law, regression matrix, and the
//! online parameter update with its Lyapunov-decrement monitor.
//!
//! The Jacobian maps manipulation-point velocity to feature velocity through
//! a fixed base-mesh projection G scaled row-wise by the estimated modal
//! parameters. Because the parameter matrix is diagonal the regression matrix
//! is diagonal too, which keeps the update O(m) per tick.

use nalgebra::{DMatrix, DVector, Point3};

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::mesh::SolidMesh;
use crate::modal::ModalBasis;
use crate::object_map::{build_allocation, project_points};

/// Constant projection of manipulation-point displacement into the modal
/// space: G = (K~+I6)^-1 \[Phi_n\]_r^T N_r^T, of shape m x 3k.
#[derive(Debug, Clone)]
pub struct ManipProjection {
    pub g: DMatrix<f64>,
    /// Rest positions of the manipulation-point projections (3k).
    pub rest_eta: DVector<f64>,
}

impl ManipProjection {
    pub fn feature_dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn manip_count(&self) -> usize {
        self.g.ncols() / 3
    }

    /// Modal displacement of the base mesh under the measured manipulation
    /// positions: G (x(p_r, t) - rest_eta).
    pub fn modal_displacement(&self, manip_positions: &DVector<f64>) -> Result<DVector<f64>> {
        if manip_positions.len() != self.g.ncols() {
            return Err(Error::InvalidInput(format!(
                "expected {} manipulation coordinates, got {}",
                self.g.ncols(),
                manip_positions.len()
            )));
        }
        Ok(&self.g * (manip_positions - &self.rest_eta))
    }
}

/// Mutable controller state: parameter estimate, gains, and control period.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub theta_hat: DVector<f64>,
    /// Positive-definite feedback gain (3k x 3k).
    pub feedback_gain: DMatrix<f64>,
    /// Positive scalar updating gain.
    pub update_gain: f64,
    /// Control period in seconds.
    pub dt: f64,
    /// Optional per-axis command clamp (absolute value), off by default.
    pub command_clamp: Option<f64>,
    /// Optional clamp interval for the parameter estimate, off by default.
    pub theta_clamp: Option<(f64, f64)>,
}

impl ControllerState {
    /// Parameters initialize to ones: no prior knowledge of the object.
    pub fn new(m: usize, feedback_gain: DMatrix<f64>, update_gain: f64, dt: f64) -> Result<Self> {
        if feedback_gain.nrows() != feedback_gain.ncols() {
            return Err(Error::InvalidInput("feedback gain must be square".into()));
        }
        if !(update_gain > 0.0) {
            return Err(Error::InvalidInput(format!(
                "updating gain must be positive, got {update_gain}"
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        // Symmetry + positive definiteness via Cholesky.
        let sym_err = (&feedback_gain - feedback_gain.transpose()).abs().max();
        if sym_err > 1e-12 * feedback_gain.abs().max().max(1.0) {
            return Err(Error::InvalidInput("feedback gain must be symmetric".into()));
        }
        if feedback_gain.clone().cholesky().is_none() {
            return Err(Error::InvalidInput(
                "feedback gain must be positive definite".into(),
            ));
        }
        Ok(Self {
            theta_hat: DVector::from_element(m, 1.0),
            feedback_gain,
            update_gain,
            dt,
            command_clamp: None,
            theta_clamp: None,
        })
    }

    pub fn uniform_gains(m: usize, k: usize, k_s: f64, gamma: f64, dt: f64) -> Result<Self> {
        Self::new(m, DMatrix::identity(3 * k, 3 * k) * k_s, gamma, dt)
    }
}

/// The deformation Jacobian J = diag(theta_hat) G.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    pub j: DMatrix<f64>,
}

/// Diagonal regression matrix Y relating parameter errors to the estimation
/// term of the closed-loop error dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionMatrix {
    pub diag: DVector<f64>,
}

impl RegressionMatrix {
    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.diag)
    }
}

/// Build the manipulation projection for the rest positions of the
/// manipulation points (base frame).
pub fn build_manip_projection(
    basis: &ModalBasis,
    mesh: &SolidMesh,
    manip_rest_points: &[Point3<f64>],
) -> Result<ManipProjection> {
    let k = manip_rest_points.len();
    let m = basis.mode_count();
    if k == 0 {
        return Err(Error::InvalidRequest("no manipulation points".into()));
    }
    if 3 * k > m {
        return Err(Error::InvalidRequest(format!(
            "3k = {} exceeds the feature dimension m = {m}",
            3 * k
        )));
    }
    let projections = project_points(mesh, manip_rest_points)?;
    let alloc = build_allocation(mesh, basis, &projections)?;
    // G = (rectifier * Phi_rows^T) N_r^T, assembled densely (k is tiny).
    let n3 = alloc.phi_rows.nrows();
    let mut rectified = DMatrix::zeros(m, n3);
    for j in 0..m {
        for i in 0..n3 {
            rectified[(j, i)] = basis.rectifier()[j] * alloc.phi_rows[(i, j)];
        }
    }
    let dense_nt = crate::linalg::csc_to_dense(&alloc.weights.transpose());
    let g = &rectified * dense_nt;
    let mut rest_eta = DVector::zeros(3 * k);
    for (i, proj) in alloc.projections.iter().enumerate() {
        rest_eta[3 * i] = proj.eta.x;
        rest_eta[3 * i + 1] = proj.eta.y;
        rest_eta[3 * i + 2] = proj.eta.z;
    }
    Ok(ManipProjection { g, rest_eta })
}

/// J(theta_hat) = diag(theta_hat) G; row j is exactly theta_hat\[j\] times the
/// corresponding row of G.
pub fn jacobian(mp: &ManipProjection, state: &ControllerState) -> Result<JacobianMatrix> {
    let m = mp.feature_dim();
    if state.theta_hat.len() != m {
        return Err(Error::InvalidInput(format!(
            "theta_hat has {} entries for feature dimension {m}",
            state.theta_hat.len()
        )));
    }
    let mut j = mp.g.clone();
    for r in 0..m {
        let th = state.theta_hat[r];
        for c in 0..j.ncols() {
            j[(r, c)] *= th;
        }
    }
    Ok(JacobianMatrix { j })
}

/// Transpose control law: v = -K_s J^T e_s (optionally clamped per axis).
pub fn control_command(
    jac: &JacobianMatrix,
    e_s: &FeatureVector,
    state: &ControllerState,
) -> Result<DVector<f64>> {
    if e_s.dim() != jac.j.nrows() {
        return Err(Error::InvalidInput(format!(
            "feature error dimension {} vs Jacobian rows {}",
            e_s.dim(),
            jac.j.nrows()
        )));
    }
    if e_s.0.iter().any(|v| !v.is_finite()) || state.theta_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite controller inputs".into()));
    }
    let mut v = -(&state.feedback_gain * (jac.j.transpose() * &e_s.0));
    if let Some(clamp) = state.command_clamp {
        for x in v.iter_mut() {
            *x = x.clamp(-clamp, clamp);
        }
    }
    Ok(v)
}

/// Regression matrix Y = diag(G K_s J^T(theta_hat) e_s): for any parameter
/// error dtheta, Y dtheta equals (J(theta_hat) - J(theta)) K_s J^T(theta_hat) e_s.
pub fn regression_matrix(
    mp: &ManipProjection,
    jac: &JacobianMatrix,
    e_s: &FeatureVector,
    state: &ControllerState,
) -> Result<RegressionMatrix> {
    if e_s.dim() != mp.feature_dim() {
        return Err(Error::InvalidInput(format!(
            "feature error dimension {} vs projection rows {}",
            e_s.dim(),
            mp.feature_dim()
        )));
    }
    let w = &mp.g * (&state.feedback_gain * (jac.j.transpose() * &e_s.0));
    Ok(RegressionMatrix { diag: w })
}

/// Explicit-Euler step of the updating law:
/// theta_hat <- theta_hat - dt Gamma^-1 Y^T e_s.
pub fn update_parameters(
    state: &ControllerState,
    y: &RegressionMatrix,
    e_s: &FeatureVector,
) -> Result<DVector<f64>> {
    if y.diag.len() != e_s.dim() || y.diag.len() != state.theta_hat.len() {
        return Err(Error::InvalidInput("regression/parameter dimension mismatch".into()));
    }
    let mut theta = state.theta_hat.clone();
    let scale = state.dt / state.update_gain;
    for i in 0..theta.len() {
        theta[i] -= scale * y.diag[i] * e_s.0[i];
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "parameter update produced non-finite estimates".into(),
        ));
    }
    if let Some((lo, hi)) = state.theta_clamp {
        for v in theta.iter_mut() {
            *v = v.clamp(lo, hi);
        }
    }
    Ok(theta)
}

/// The computable Lyapunov decrement -e_s^T J K_s J^T e_s (always <= 0 up to
/// rounding).
pub fn lyapunov_decrement(
    jac: &JacobianMatrix,
    e_s: &FeatureVector,
    state: &ControllerState,
) -> Result<f64> {
    if e_s.dim() != jac.j.nrows() {
        return Err(Error::InvalidInput(format!(
            "feature error dimension {} vs Jacobian rows {}",
            e_s.dim(),
            jac.j.nrows()
        )));
    }
    let w = jac.j.transpose() * &e_s.0;
    Ok(-(w.dot(&(&state.feedback_gain * &w))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{compute_features, SamplingSet};
    use crate::fem::assemble_system;
    use crate::mesh::{generate_ellipsoid_mesh, EllipsoidSpec, MaterialParams, MeshResolution};
    use crate::modal::solve_modes;
    use crate::object_map::{build_allocation, build_feature_projector, project_points};
    use crate::rng::SplitMix64;
    use nalgebra::{Isometry3, Vector3};

    fn setup(m: usize) -> (crate::mesh::SolidMesh, ModalBasis) {
        let spec = EllipsoidSpec::new(
            Vector3::new(1.0, 0.8, 0.6),
            Isometry3::identity(),
            MeshResolution::new(4, 6, 2),
        );
        let mesh = generate_ellipsoid_mesh(&spec).unwrap();
        let sys = assemble_system(&mesh, &MaterialParams::new(50.0, 0.45, 20.0)).unwrap();
        let basis = solve_modes(&sys, m).unwrap();
        (mesh, basis)
    }

    fn manip_point() -> Point3<f64> {
        Point3::new(1.3, 0.15, 0.1)
    }

    #[test]
    fn single_point_projection_dimensions() {
        let (mesh, basis) = setup(9);
        let mp = build_manip_projection(&basis, &mesh, &[manip_point()]).unwrap();
        assert_eq!(mp.g.nrows(), 9);
        assert_eq!(mp.g.ncols(), 3);
        assert_eq!(mp.manip_count(), 1);
    }

    #[test]
    fn too_many_manip_points_rejected() {
        let (mesh, basis) = setup(6);
        let points = vec![
            Point3::new(1.3, 0.15, 0.1),
            Point3::new(-1.3, 0.2, 0.1),
            Point3::new(0.2, 1.2, 0.1),
        ];
        assert!(matches!(
            build_manip_projection(&basis, &mesh, &points),
            Err(Error::InvalidRequest(_))
        ));
    }

    #[test]
    fn modal_displacement_matches_feature_pipeline() {
        // Treating the manipulation point as a sampling must reproduce the
        // same projection of its displacement. The feature pipeline needs
        // l >= m/3, so pad with extra samples left at rest: by linearity
        // their contribution is zero.
        let (mesh, basis) = setup(9);
        let p = manip_point();
        let extras = [Point3::new(-1.2, 0.3, 0.4), Point3::new(0.2, -1.1, 0.6)];
        let mp = build_manip_projection(&basis, &mesh, &[p]).unwrap();
        let all_points = vec![p, extras[0], extras[1]];
        let projs = project_points(&mesh, &all_points).unwrap();
        let alloc = build_allocation(&mesh, &basis, &projs).unwrap();
        let feat = build_feature_projector(&basis, &alloc).unwrap();
        let mut rng = SplitMix64::new(2);
        let moved_manip = DVector::from_fn(3, |i, _| mp.rest_eta[i] + rng.uniform(-0.3, 0.3));
        let u_tilde = mp.modal_displacement(&moved_manip).unwrap();
        let mut measured = feat.rest_eta.clone();
        for i in 0..3 {
            measured[i] = moved_manip[i];
        }
        let s = compute_features(
            &feat,
            &SamplingSet::new(measured, vec![0, 1, 2], 0.0).unwrap(),
        )
        .unwrap();
        assert!((u_tilde - s.0).norm() < 1e-12);
        // At rest the modal displacement vanishes.
        let zero = mp.modal_displacement(&mp.rest_eta).unwrap();
        assert_eq!(zero.norm(), 0.0);
    }

    #[test]
    fn jacobian_row_scaling_is_exact() {
        let (mesh, basis) = setup(9);
        let mp = build_manip_projection(&basis, &mesh, &[manip_point()]).unwrap();
        let mut state = ControllerState::uniform_gains(9, 1, 80.0, 500.0, 0.02).unwrap();
        // theta = ones -> J = G bit-for-bit.
        let jac = jacobian(&mp, &state).unwrap();
        assert_eq!(jac.j, mp.g);
        // theta = 0 -> J = 0.
        state.theta_hat.fill(0.0);
        let jac = jacobian(&mp, &state).unwrap();
        assert!(jac.j.iter().all(|&v| v == 0.0));
        // Random theta: row r equals theta[r] * G row r exactly.
        let mut rng = SplitMix64::new(4);
        state.theta_hat = DVector::from_fn(9, |_, _| rng.uniform(-2.0, 2.0));
        let jac = jacobian(&mp, &state).unwrap();
        for r in 0..9 {
            for c in 0..3 {
                assert_eq!(jac.j[(r, c)], state.theta_hat[r] * mp.g[(r, c)]);
            }
        }
    }

    #[test]
    fn finite_difference_probe_of_modal_displacement_matches_g() {
        // Central differences of the displacement-to-modal map recover the
        // columns of G (the map is exactly linear).
        let (mesh, basis) = setup(9);
        let mp = build_manip_projection(&basis, &mesh, &[manip_point()]).unwrap();
        let x0 = mp.rest_eta.clone();
        let delta = 1e-4;
        for col in 0..3 {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus[col] += delta;
            minus[col] -= delta;
            let fd = (mp.modal_displacement(&plus).unwrap()
                - mp.modal_displacement(&minus).unwrap())
                / (2.0 * delta);
            for r in 0..9 {
                assert!(
                    (fd[r] - mp.g[(r, col)]).abs() <= 1e-9 * mp.g[(r, col)].abs().max(1.0),
                    "column {col} row {r}: {} vs {}",
                    fd[r],
                    mp.g[(r, col)]
                );
            }
        }
    }

    #[test]
    fn command_law_and_benchmark_magnitude() {
        let (mesh, basis) = setup(30);
        let mp = build_manip_projection(&basis, &mesh, &[manip_point()]).unwrap();
        let state = ControllerState::uniform_gains(30, 1, 80.0, 500.0, 0.02).unwrap();
        let jac = jacobian(&mp, &state).unwrap();
        // e_s = 0 -> v = 0.
        let zero = FeatureVector(DVector::zeros(30));
        let v = control_command(&jac, &zero, &state).unwrap();
        assert_eq!(v.norm(), 0.0);
        // K_s = 80 I: command magnitude is 80 ||J^T e_s||.
        let mut rng = SplitMix64::new(6);
        let e = FeatureVector(DVector::from_fn(30, |_, _| rng.uniform(-1.0, 1.0)));
        let v = control_command(&jac, &e, &state).unwrap();
        let jte = jac.j.transpose() * &e.0;
        assert!((v.norm() - 80.0 * jte.norm()).abs() <= 1e-9 * v.norm().max(1.0));
        // Instantaneous decrement is nonpositive.
        let dec = lyapunov_decrement(&jac, &e, &state).unwrap();
        assert!(dec <= 1e-12);
    }

    #[test]
    fn regression_identity_against_direct_difference() {
        // Y (theta_hat - theta) must equal
        // (J(theta_hat) - J(theta)) K_s J^T(theta_hat) e_s for random draws.
        let (mesh, basis) = setup(12);
        let mp = build_manip_projection(&basis, &mesh, &[manip_point()]).unwrap();
        let mut rng = SplitMix64::new(8);
        for _ in 0..20 {
            let mut state = ControllerState::uniform_gains(12, 1, 7.5, 100.0, 0.02).unwrap();
            state.theta_hat = DVector::from_fn(12, |_, _| rng.uniform(-2.0, 2.0));
            let theta_true = DVector::from_fn(12, |_, _| rng.uniform(-2.0, 2.0));
            let e = FeatureVector(DVector::from_fn(12, |_, _| rng.uniform(-1.0, 1.0)));

            let jac_hat = jacobian(&mp, &state).unwrap();
            let y = regression_matrix(&mp, &jac_hat, &e, &state).unwrap();
            let dtheta = &state.theta_hat - &theta_true;
            let lhs = y.as_matrix() * &dtheta;

            let mut true_state = state.clone();
            true_state.theta_hat = theta_true;
            let jac_true = jacobian(&mp, &true_state).unwrap();
            let rhs = (&jac_hat.j - &jac_true.j)
                * (&state.feedback_gain * (jac_hat.j.transpose() * &e.0));
            assert!(
                (lhs - rhs).norm() <= 1e-12 * jac_hat.j.abs().max().max(1.0),
                "regression identity violated"
            );
        }
        // e_s = 0 -> Y = 0.
        let state = ControllerState::uniform_gains(12, 1, 7.5, 100.0, 0.02).unwrap();
        let jac = jacobian(&mp, &state).unwrap();
        let y = regression_matrix(&mp, &jac, &FeatureVector(DVector::zeros(12)), &state).unwrap();
        assert_eq!(y.diag.norm(), 0.0);
    }

    #[test]
    fn update_freezes_on_zero_error_and_shrinks_with_gamma() {
        let (mesh, basis) = setup(9);
        let mp = build_manip_projection(&basis, &mesh, &[manip_point()]).unwrap();
        let state = ControllerState::uniform_gains(9, 1, 10.0, 50.0, 0.02).unwrap();
        let jac = jacobian(&mp, &state).unwrap();
        let zero = FeatureVector(DVector::zeros(9));
        let y = regression_matrix(&mp, &jac, &zero, &state).unwrap();
        let theta = update_parameters(&state, &y, &zero).unwrap();
        assert_eq!(theta, state.theta_hat);

        let mut rng = SplitMix64::new(10);
        let e = FeatureVector(DVector::from_fn(9, |_, _| rng.uniform(-1.0, 1.0)));
        let y = regression_matrix(&mp, &jac, &e, &state).unwrap();
        let step_small_gamma = (update_parameters(&state, &y, &e).unwrap() - &state.theta_hat).norm();
        let mut big = state.clone();
        big.update_gain = 1e9;
        let step_big_gamma = (update_parameters(&big, &y, &e).unwrap() - &state.theta_hat).norm();
        assert!(step_big_gamma < 1e-6 * step_small_gamma.max(1e-30));
    }

    #[test]
    fn lyapunov_decrement_matches_cholesky_oracle() {
        let (mesh, basis) = setup(12);
        let mp = build_manip_projection(&basis, &mesh, &[manip_point()]).unwrap();
        let mut rng = SplitMix64::new(12);
        // A non-trivial symmetric PD gain.
        let mut gain = DMatrix::identity(3, 3) * 5.0;
        gain[(0, 1)] = 1.0;
        gain[(1, 0)] = 1.0;
        gain[(2, 0)] = -0.5;
        gain[(0, 2)] = -0.5;
        let mut state = ControllerState::new(12, gain.clone(), 100.0, 0.02).unwrap();
        state.theta_hat = DVector::from_fn(12, |_, _| rng.uniform(-2.0, 2.0));
        let jac = jacobian(&mp, &state).unwrap();
        for _ in 0..20 {
            let e = FeatureVector(DVector::from_fn(12, |_, _| rng.uniform(-1.0, 1.0)));
            let dec = lyapunov_decrement(&jac, &e, &state).unwrap();
            // Oracle: -||L^T J^T e||^2 with K_s = L L^T.
            let chol = gain.clone().cholesky().unwrap();
            let w = jac.j.transpose() * &e.0;
            let z = chol.l().transpose() * &w;
            let oracle = -z.norm_squared();
            assert!((dec - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
            assert!(dec <= 1e-12);
        }
        // Zero error and kernel directions give exactly zero.
        let dec = lyapunov_decrement(&jac, &FeatureVector(DVector::zeros(12)), &state).unwrap();
        assert_eq!(dec, 0.0);
    }

    #[test]
    fn invalid_gains_rejected() {
        assert!(ControllerState::uniform_gains(6, 1, -1.0, 10.0, 0.02).is_err());
        assert!(ControllerState::uniform_gains(6, 1, 10.0, 0.0, 0.02).is_err());
        assert!(ControllerState::uniform_gains(6, 1, 10.0, 10.0, 0.0).is_err());
    }
}
