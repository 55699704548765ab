//! Linear-elasticity FEM assembly on tetrahedral meshes.
//!
//! Constant-strain (4-node) tetrahedra, isotropic material, lumped diagonal
//! mass scaled so the per-coordinate sums equal the requested total mass.

use nalgebra::{DMatrix, DVector, Point3, SMatrix, Vector3};
use nalgebra_sparse::{CooMatrix, CscMatrix};

use crate::error::{Error, Result};
use crate::mesh::{MaterialParams, SolidMesh};

/// Assembled stiffness and mass of a solid mesh.
///
/// The mass matrix is lumped, stored as its diagonal. `rigid_basis` holds the
/// six M-orthonormalized rigid-motion vectors (translations, then rotations
/// about the mass center) when the system was assembled from a mesh; systems
/// built from explicit matrices carry `None`.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub stiffness: CscMatrix<f64>,
    pub mass: DVector<f64>,
    pub rigid_basis: Option<DMatrix<f64>>,
}

impl AssembledSystem {
    /// Wrap explicit matrices (toy systems, tests).
    pub fn from_parts(stiffness: CscMatrix<f64>, mass: DVector<f64>) -> Result<Self> {
        if stiffness.nrows() != stiffness.ncols() || stiffness.nrows() != mass.len() {
            return Err(Error::InvalidInput(format!(
                "stiffness is {}x{} but mass has {} entries",
                stiffness.nrows(),
                stiffness.ncols(),
                mass.len()
            )));
        }
        if mass.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::InvalidInput("mass diagonal must be positive".into()));
        }
        Ok(Self {
            stiffness,
            mass,
            rigid_basis: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mass.len()
    }

    /// The lumped mass as a sparse diagonal matrix.
    pub fn mass_matrix(&self) -> CscMatrix<f64> {
        let n = self.mass.len();
        let mut coo = CooMatrix::new(n, n);
        for i in 0..n {
            coo.push(i, i, self.mass[i]);
        }
        CscMatrix::from(&coo)
    }
}

/// Isotropic elasticity matrix in engineering (Voigt) notation.
fn elasticity_matrix(e: f64, nu: f64) -> SMatrix<f64, 6, 6> {
    let lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    let mut d = SMatrix::<f64, 6, 6>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            d[(i, j)] = lam;
        }
        d[(i, i)] = lam + 2.0 * mu;
        d[(i + 3, i + 3)] = mu;
    }
    d
}

/// Element stiffness of a constant-strain tet, plus its volume.
///
/// Node DOF order is (x0,y0,z0, x1,y1,z1, ...); strain order is
/// (exx, eyy, ezz, gxy, gyz, gzx).
pub fn element_stiffness_tet(
    verts: &[Point3<f64>; 4],
    e: f64,
    nu: f64,
) -> Result<(SMatrix<f64, 12, 12>, f64)> {
    let d1 = verts[1] - verts[0];
    let d2 = verts[2] - verts[0];
    let d3 = verts[3] - verts[0];
    let vol = d1.cross(&d2).dot(&d3) / 6.0;
    if !(vol > 0.0) {
        return Err(Error::InvalidMesh(format!(
            "tetrahedron with non-positive volume {vol}"
        )));
    }
    let jac = nalgebra::Matrix3::from_columns(&[d1, d2, d3]);
    let jac_inv = jac
        .try_inverse()
        .ok_or_else(|| Error::InvalidMesh("singular tetrahedron geometry".into()))?;
    // Barycentric gradients: rows of J^-1 for nodes 1..3, node 0 closes the sum.
    let mut grads = [Vector3::zeros(); 4];
    for i in 0..3 {
        grads[i + 1] = Vector3::new(jac_inv[(i, 0)], jac_inv[(i, 1)], jac_inv[(i, 2)]);
    }
    grads[0] = -(grads[1] + grads[2] + grads[3]);

    let mut b = SMatrix::<f64, 6, 12>::zeros();
    for (i, g) in grads.iter().enumerate() {
        let c = 3 * i;
        b[(0, c)] = g.x;
        b[(1, c + 1)] = g.y;
        b[(2, c + 2)] = g.z;
        b[(3, c)] = g.y;
        b[(3, c + 1)] = g.x;
        b[(4, c + 1)] = g.z;
        b[(4, c + 2)] = g.y;
        b[(5, c)] = g.z;
        b[(5, c + 2)] = g.x;
    }
    let d = elasticity_matrix(e, nu);
    Ok((b.transpose() * d * b * vol, vol))
}

/// Assemble global stiffness and lumped mass for `mesh` with `mat`.
pub fn assemble_system(mesh: &SolidMesh, mat: &MaterialParams) -> Result<AssembledSystem> {
    mat.validate()?;
    let n = mesh.node_count();
    let dim = 3 * n;
    let mut coo = CooMatrix::new(dim, dim);
    let mut node_volume = vec![0.0f64; n];
    let mut total_volume = 0.0;

    for tet in &mesh.tets {
        let verts = [
            mesh.nodes[tet[0]],
            mesh.nodes[tet[1]],
            mesh.nodes[tet[2]],
            mesh.nodes[tet[3]],
        ];
        let (ke, vol) = element_stiffness_tet(&verts, mat.youngs_modulus, mat.poisson_ratio)?;
        total_volume += vol;
        for (a, &na) in tet.iter().enumerate() {
            node_volume[na] += vol / 4.0;
            for (b, &nb) in tet.iter().enumerate() {
                for r in 0..3 {
                    for c in 0..3 {
                        coo.push(3 * na + r, 3 * nb + c, ke[(3 * a + r, 3 * b + c)]);
                    }
                }
            }
        }
    }
    if !(total_volume > 0.0) {
        return Err(Error::InvalidMesh("mesh has zero volume".into()));
    }

    let density = mat.total_mass / total_volume;
    let mut mass = DVector::zeros(dim);
    for (i, &v) in node_volume.iter().enumerate() {
        let m = density * v;
        mass[3 * i] = m;
        mass[3 * i + 1] = m;
        mass[3 * i + 2] = m;
    }

    let stiffness = CscMatrix::from(&coo);
    let rigid_basis = Some(rigid_motion_basis(mesh, &mass));
    Ok(AssembledSystem {
        stiffness,
        mass,
        rigid_basis,
    })
}

/// Six M-orthonormal rigid-motion vectors: translations along x/y/z, then
/// linearized rotations about the lumped-mass center.
fn rigid_motion_basis(mesh: &SolidMesh, mass: &DVector<f64>) -> DMatrix<f64> {
    let n = mesh.node_count();
    let dim = 3 * n;
    let total: f64 = (0..n).map(|i| mass[3 * i]).sum();
    let mut center = Vector3::zeros();
    for i in 0..n {
        center += mass[3 * i] * mesh.nodes[i].coords;
    }
    center /= total;

    let mut basis = DMatrix::zeros(dim, 6);
    for axis in 0..3 {
        for i in 0..n {
            basis[(3 * i + axis, axis)] = 1.0;
        }
    }
    for (col, axis) in [(3, Vector3::x()), (4, Vector3::y()), (5, Vector3::z())] {
        for i in 0..n {
            let r = mesh.nodes[i].coords - center;
            let u = axis.cross(&r);
            basis[(3 * i, col)] = u.x;
            basis[(3 * i + 1, col)] = u.y;
            basis[(3 * i + 2, col)] = u.z;
        }
    }
    // Modified Gram-Schmidt in the M inner product.
    for j in 0..6 {
        for k in 0..j {
            let mut dot = 0.0;
            for i in 0..dim {
                dot += mass[i] * basis[(i, k)] * basis[(i, j)];
            }
            for i in 0..dim {
                let prev = basis[(i, k)];
                basis[(i, j)] -= dot * prev;
            }
        }
        let mut norm2 = 0.0;
        for i in 0..dim {
            norm2 += mass[i] * basis[(i, j)] * basis[(i, j)];
        }
        let inv = 1.0 / norm2.sqrt();
        for i in 0..dim {
            basis[(i, j)] *= inv;
        }
    }
    basis
}
