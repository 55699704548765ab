//! Generalized eigenproblem on the base mesh, modal truncation, and the
//! force-displacement rectifier.
//!
//! With a lumped (diagonal) mass the generalized problem K phi = w^2 M phi is
//! symmetrized to A y = w^2 y with A = M^-1/2 K M^-1/2 and phi = M^-1/2 y,
//! which keeps the retained modes M-orthonormal by construction. Small
//! systems are solved densely; larger ones use shift-invert Lanczos with full
//! reorthogonalization on (A + sigma I)^-1, whose extreme eigenvalues are the
//! lowest-frequency modes. The near-null rigid block of an unconstrained mesh
//! is replaced by the canonical mass-orthonormal rigid-motion basis so that
//! degenerate eigenvectors are deterministic and independent of the requested
//! mode count.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};

use crate::error::{Error, Result};
use crate::fem::AssembledSystem;
use crate::linalg::{csc_add_diag, csc_inf_norm, csc_mul_dense, csc_mul_vec};
use crate::rng::SplitMix64;

/// Problems at or below this DOF count are solved with a dense eigensolver.
pub const DENSE_FALLBACK_DOFS: usize = 600;

/// Relative threshold below which an eigenvalue counts as a rigid (zero) mode.
const RIGID_EIGENVALUE_REL: f64 = 1e-9;

/// Relative eigenpair residual accepted from the solver.
const RESIDUAL_REL: f64 = 1e-8;

/// Truncated, frequency-ordered modal basis of a base mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalBasis {
    mode_shapes: DMatrix<f64>,
    freqs: DVector<f64>,
    k_tilde: DVector<f64>,
    rectifier: DVector<f64>,
}

impl ModalBasis {
    /// Number of retained modes.
    pub fn mode_count(&self) -> usize {
        self.mode_shapes.ncols()
    }

    /// Total DOF count (3N) of the underlying mesh.
    pub fn dof_count(&self) -> usize {
        self.mode_shapes.nrows()
    }

    /// The 3N x m matrix of retained mode shapes (M-orthonormal columns).
    pub fn mode_shapes(&self) -> &DMatrix<f64> {
        &self.mode_shapes
    }

    /// Squared natural frequencies, ascending.
    pub fn freqs(&self) -> &DVector<f64> {
        &self.freqs
    }

    /// Diagonal of the normalized modal stiffness.
    pub fn k_tilde(&self) -> &DVector<f64> {
        &self.k_tilde
    }

    /// Diagonal of the force-displacement rectifier: 1/(K~_jj + 1) for the
    /// first six entries, 1/K~_jj afterwards.
    pub fn rectifier(&self) -> &DVector<f64> {
        &self.rectifier
    }

    /// Keep only the leading `m` modes.
    pub fn truncate_to(&self, m: usize) -> Result<ModalBasis> {
        if m == 0 || m > self.mode_count() {
            return Err(Error::InvalidRequest(format!(
                "cannot truncate basis of {} modes to {m}",
                self.mode_count()
            )));
        }
        let k_tilde = DVector::from_iterator(m, self.k_tilde.iter().take(m).copied());
        let rectifier = build_rectifier(&k_tilde)?;
        Ok(ModalBasis {
            mode_shapes: self.mode_shapes.columns(0, m).into_owned(),
            freqs: DVector::from_iterator(m, self.freqs.iter().take(m).copied()),
            k_tilde,
            rectifier,
        })
    }

    /// The reusable left factor of the feature computation and manipulation
    /// projections: (K~ + I6)^-1 \[Phi_n\]_rows^T, of shape m x 3|rows|.
    pub fn rectified_projection(&self, rows: &[usize]) -> Result<DMatrix<f64>> {
        if rows.is_empty() {
            return Err(Error::InvalidRequest("empty row set".into()));
        }
        let n_nodes = self.dof_count() / 3;
        let m = self.mode_count();
        let mut out = DMatrix::zeros(m, 3 * rows.len());
        for (slot, &node) in rows.iter().enumerate() {
            if node >= n_nodes {
                return Err(Error::InvalidRequest(format!(
                    "node {node} out of range ({n_nodes} nodes)"
                )));
            }
            for j in 0..m {
                for c in 0..3 {
                    out[(j, 3 * slot + c)] =
                        self.rectifier[j] * self.mode_shapes[(3 * node + c, j)];
                }
            }
        }
        Ok(out)
    }

    /// Serialize to the documented text dump (reload is bit-identical).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "modalbasis 1");
        let _ = writeln!(out, "{} {}", self.dof_count(), self.mode_count());
        for line in [&self.freqs, &self.k_tilde] {
            let mut first = true;
            for v in line.iter() {
                if !first {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
                first = false;
            }
            out.push('\n');
        }
        for i in 0..self.dof_count() {
            let mut first = true;
            for j in 0..self.mode_count() {
                if !first {
                    out.push(' ');
                }
                let _ = write!(out, "{}", self.mode_shapes[(i, j)]);
                first = false;
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let magic = tokens.next().ok_or_else(|| Error::Parse("empty basis dump".into()))?;
        let version = tokens.next().unwrap_or_default();
        if magic != "modalbasis" || version != "1" {
            return Err(Error::Parse(format!("bad basis header: {magic} {version}")));
        }
        let mut next = |what: &str| -> Result<f64> {
            tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("unexpected end reading {what}")))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
        };
        let dofs = next("dof count")? as usize;
        let m = next("mode count")? as usize;
        if dofs == 0 || m == 0 {
            return Err(Error::Parse("empty basis".into()));
        }
        let mut freqs = DVector::zeros(m);
        for j in 0..m {
            freqs[j] = next("frequency")?;
        }
        let mut k_tilde = DVector::zeros(m);
        for j in 0..m {
            k_tilde[j] = next("modal stiffness")?;
        }
        let mut mode_shapes = DMatrix::zeros(dofs, m);
        for i in 0..dofs {
            for j in 0..m {
                mode_shapes[(i, j)] = next("mode entry")?;
            }
        }
        let rectifier = build_rectifier(&k_tilde)?;
        Ok(ModalBasis {
            mode_shapes,
            freqs,
            k_tilde,
            rectifier,
        })
    }

    pub fn write_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn build_rectifier(k_tilde: &DVector<f64>) -> Result<DVector<f64>> {
    let m = k_tilde.len();
    let mut rect = DVector::zeros(m);
    for j in 0..m {
        let denom = k_tilde[j] + if j < 6 { 1.0 } else { 0.0 };
        if !(denom > 0.0) {
            return Err(Error::Numeric(format!(
                "non-invertible rectifier entry {j}: modal stiffness {}",
                k_tilde[j]
            )));
        }
        rect[j] = 1.0 / denom;
    }
    Ok(rect)
}

/// Solve the generalized eigenproblem of `sys` and truncate to the `m`
/// lowest-frequency modes.
pub fn solve_modes(sys: &AssembledSystem, m: usize) -> Result<ModalBasis> {
    let dim = sys.dim();
    if m == 0 {
        return Err(Error::InvalidRequest("mode count must be positive".into()));
    }
    if m > dim {
        return Err(Error::InvalidRequest(format!(
            "requested {m} modes but the system has only {dim} DOFs"
        )));
    }

    // Symmetrize: A = M^-1/2 K M^-1/2.
    let inv_sqrt: DVector<f64> = sys.mass.map(|v| 1.0 / v.sqrt());
    let mut coo = CooMatrix::new(dim, dim);
    for (i, j, v) in sys.stiffness.triplet_iter() {
        coo.push(i, j, *v * inv_sqrt[i] * inv_sqrt[j]);
    }
    let a = CscMatrix::from(&coo);
    let a_scale = csc_inf_norm(&a).max(f64::MIN_POSITIVE);

    let (mut eigvals, y) = if dim <= DENSE_FALLBACK_DOFS {
        dense_lowest_pairs(&a, m)?
    } else {
        shift_invert_lanczos(&a, m, a_scale)?
    };

    // Back-transform to mode shapes (M-orthonormal since y is orthonormal).
    let mut phi = y;
    for i in 0..dim {
        for j in 0..m {
            phi[(i, j)] *= inv_sqrt[i];
        }
    }

    // Deterministic degenerate-subspace convention: the near-null rigid block
    // of an unconstrained mesh is replaced with the canonical rigid basis.
    let rigid_count = eigvals.iter().take_while(|&&l| l < RIGID_EIGENVALUE_REL * a_scale).count();
    if let Some(rigid) = &sys.rigid_basis {
        let expected = m.min(6);
        if rigid_count == expected && rigid_count > 0 {
            for j in 0..expected {
                phi.set_column(j, &rigid.column(j));
                eigvals[j] = 0.0;
            }
            // Re-orthogonalize the flexible block against the canonical one.
            for j in expected..m {
                for r in 0..expected {
                    let mut dot = 0.0;
                    for i in 0..dim {
                        dot += sys.mass[i] * phi[(i, r)] * phi[(i, j)];
                    }
                    for i in 0..dim {
                        let rv = phi[(i, r)];
                        phi[(i, j)] -= dot * rv;
                    }
                }
                let mut norm2 = 0.0;
                for i in 0..dim {
                    norm2 += sys.mass[i] * phi[(i, j)] * phi[(i, j)];
                }
                let inv = 1.0 / norm2.sqrt();
                for i in 0..dim {
                    phi[(i, j)] *= inv;
                }
            }
        }
    }

    // Sign convention: the entry of largest magnitude is positive (first
    // occurrence wins ties).
    for j in 0..m {
        let mut best = 0usize;
        let mut best_abs = 0.0f64;
        for i in 0..dim {
            let a = phi[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if phi[(best, j)] < 0.0 {
            for i in 0..dim {
                phi[(i, j)] = -phi[(i, j)];
            }
        }
    }

    // Normalized modal stiffness, checked for diagonality then hardened.
    let k_norm = csc_inf_norm(&sys.stiffness).max(f64::MIN_POSITIVE);
    let k_phi = csc_mul_dense(&sys.stiffness, &phi);
    let k_tilde_full = phi.transpose() * &k_phi;
    let mut max_diag = 0.0f64;
    let mut max_off = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let v = k_tilde_full[(i, j)].abs();
            if i == j {
                max_diag = max_diag.max(v);
            } else {
                max_off = max_off.max(v);
            }
        }
    }
    // Rounding floor: when only rigid modes are retained the whole matrix is
    // numerically zero, which counts as diagonal.
    let phi_sq = (0..m)
        .map(|j| phi.column(j).norm_squared())
        .fold(0.0f64, f64::max);
    let floor = 1e-8 * k_norm * phi_sq;
    if max_off > 1e-6 * max_diag.max(floor) {
        return Err(Error::Numeric(format!(
            "modal stiffness off-diagonal leakage {max_off:.3e} exceeds 1e-6 of diagonal {max_diag:.3e}"
        )));
    }
    let mut k_tilde = DVector::zeros(m);
    for j in 0..m {
        k_tilde[j] = k_tilde_full[(j, j)].max(0.0);
        if eigvals[j] == 0.0 {
            k_tilde[j] = 0.0;
        }
    }

    // Eigenpair residuals in the original (K, M) problem.
    for j in 0..m {
        let col = DVector::from_column_slice(phi.column(j).as_slice());
        let mut r = csc_mul_vec(&sys.stiffness, &col);
        for i in 0..dim {
            r[i] -= eigvals[j] * sys.mass[i] * col[i];
        }
        let rel = r.norm() / (k_norm * col.norm());
        if rel > RESIDUAL_REL {
            return Err(Error::Numeric(format!(
                "eigenpair {j} residual {rel:.3e} exceeds {RESIDUAL_REL:.0e} (eigenvalue {:.6e})",
                eigvals[j]
            )));
        }
    }

    let rectifier = build_rectifier(&k_tilde)?;
    Ok(ModalBasis {
        mode_shapes: phi,
        freqs: eigvals,
        k_tilde,
        rectifier,
    })
}

/// All-pairs dense solve; returns the `m` lowest eigenpairs sorted ascending.
fn dense_lowest_pairs(a: &CscMatrix<f64>, m: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dim = a.nrows();
    let mut dense = DMatrix::zeros(dim, dim);
    for (i, j, v) in a.triplet_iter() {
        dense[(i, j)] += *v;
    }
    // Exact symmetry for the eigensolver.
    let sym = (&dense + dense.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .total_cmp(&eig.eigenvalues[j])
            .then(i.cmp(&j))
    });
    let mut vals = DVector::zeros(m);
    let mut vecs = DMatrix::zeros(dim, m);
    for (slot, &idx) in order.iter().take(m).enumerate() {
        vals[slot] = eig.eigenvalues[idx].max(0.0);
        vecs.set_column(slot, &eig.eigenvectors.column(idx));
    }
    Ok((vals, vecs))
}

/// Deterministic pseudo-random unit vector for Lanczos starts.
fn start_vector(dim: usize, salt: u64) -> DVector<f64> {
    let mut rng = SplitMix64::new(0x5EED_0000 + salt);
    let mut v = DVector::from_fn(dim, |_, _| rng.uniform(-1.0, 1.0));
    let n = v.norm();
    v /= n;
    v
}

/// Shift-invert Lanczos with full reorthogonalization.
///
/// Factors A + sigma I (positive definite for a small positive sigma) and
/// iterates on its inverse: the largest Ritz values correspond to the lowest
/// eigenvalues of A. The Krylov space is grown until the leading `m` pairs
/// meet the residual tolerance.
fn shift_invert_lanczos(
    a: &CscMatrix<f64>,
    m: usize,
    a_scale: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dim = a.nrows();
    let sigma = 1e-6 * a_scale;
    let shifted = csc_add_diag(a, sigma);
    let chol = CscCholesky::factor(&shifted).map_err(|e| {
        Error::Numeric(format!("shift-invert factorization failed: {e:?}"))
    })?;

    let tol = 1e-11 * a_scale;
    let mut ncv = dim.min((2 * m + 10).max(30));
    let max_attempts = 8;
    let mut last_worst = f64::INFINITY;

    for attempt in 0..max_attempts {
        let (alphas, betas, basis) = lanczos_sweep(&chol, dim, ncv);
        let steps = alphas.len();

        // Eigen decomposition of the tridiagonal Rayleigh matrix.
        let mut t = DMatrix::zeros(steps, steps);
        for i in 0..steps {
            t[(i, i)] = alphas[i];
            if i + 1 < steps {
                t[(i, i + 1)] = betas[i];
                t[(i + 1, i)] = betas[i];
            }
        }
        let eig = t.symmetric_eigen();
        let mut order: Vec<usize> = (0..steps).collect();
        // Largest mu of the inverted operator first = lowest eigenvalues of A.
        order.sort_by(|&i, &j| {
            eig.eigenvalues[j]
                .total_cmp(&eig.eigenvalues[i])
                .then(i.cmp(&j))
        });

        let take = m.min(steps);
        let mut vals = DVector::zeros(take);
        let mut vecs = DMatrix::zeros(dim, take);
        let mut worst_residual = 0.0f64;
        for (slot, &idx) in order.iter().take(take).enumerate() {
            let w = eig.eigenvectors.column(idx);
            let mut y = DVector::zeros(dim);
            for (kv, weight) in w.iter().enumerate() {
                y.axpy(*weight, &basis[kv], 1.0);
            }
            let n = y.norm();
            y /= n;
            // Rayleigh quotient in A gives the eigenvalue directly.
            let ay = csc_mul_vec(a, &y);
            let lambda = y.dot(&ay);
            let mut resid = ay;
            resid.axpy(-lambda, &y, 1.0);
            worst_residual = worst_residual.max(resid.norm());
            vals[slot] = lambda.max(0.0);
            vecs.set_column(slot, &y);
        }

        if take == m && worst_residual <= tol {
            // Re-sort ascending by eigenvalue for the caller.
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]).then(i.cmp(&j)));
            let mut out_vals = DVector::zeros(m);
            let mut out_vecs = DMatrix::zeros(dim, m);
            for (slot, &idx) in order.iter().enumerate() {
                out_vals[slot] = vals[idx];
                out_vecs.set_column(slot, &vecs.column(idx));
            }
            return Ok((out_vals, out_vecs));
        }

        last_worst = worst_residual;
        if ncv == dim {
            break;
        }
        ncv = dim.min(ncv * 8 / 5 + 8);
        let _ = attempt;
    }
    Err(Error::Numeric(format!(
        "shift-invert Lanczos did not converge: worst residual {last_worst:.3e} \
         (tolerance {tol:.3e}) after reaching {ncv} Krylov vectors on a {dim}-DOF system"
    )))
}

/// One full-reorthogonalization Lanczos sweep of `ncv` steps on the inverse
/// of the factored operator. Returns the tridiagonal coefficients and the
/// orthonormal Krylov basis.
fn lanczos_sweep(
    chol: &CscCholesky<f64>,
    dim: usize,
    ncv: usize,
) -> (Vec<f64>, Vec<f64>, Vec<DVector<f64>>) {
    let mut alphas: Vec<f64> = Vec::with_capacity(ncv);
    let mut betas: Vec<f64> = Vec::with_capacity(ncv.saturating_sub(1));
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(ncv);
    let mut salt = 0u64;
    basis.push(start_vector(dim, salt));

    for step in 0..ncv {
        let v = basis[step].clone();
        let mut w = {
            let rhs = DMatrix::from_column_slice(dim, 1, v.as_slice());
            let sol = chol.solve(&rhs);
            DVector::from_column_slice(sol.column(0).as_slice())
        };
        if step > 0 {
            let beta_prev = betas[step - 1];
            w.axpy(-beta_prev, &basis[step - 1], 1.0);
        }
        let alpha = v.dot(&w);
        w.axpy(-alpha, &v, 1.0);
        // Full reorthogonalization, twice for safety.
        for _ in 0..2 {
            for b in basis.iter() {
                let d = b.dot(&w);
                w.axpy(-d, b, 1.0);
            }
        }
        alphas.push(alpha);
        if step + 1 == ncv {
            break;
        }
        let beta = w.norm();
        if beta <= 1e-13 {
            // Invariant subspace exhausted: restart with a fresh direction.
            salt += 1;
            let mut fresh = start_vector(dim, salt);
            for _ in 0..2 {
                for b in basis.iter() {
                    let d = b.dot(&fresh);
                    fresh.axpy(-d, b, 1.0);
                }
            }
            let n = fresh.norm();
            if n <= 1e-13 {
                break;
            }
            fresh /= n;
            betas.push(0.0);
            basis.push(fresh);
        } else {
            betas.push(beta);
            w /= beta;
            basis.push(w);
        }
    }
    (alphas, betas, basis)
}
