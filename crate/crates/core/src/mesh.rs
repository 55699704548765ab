//! Solid tetrahedral meshes: ellipsoid generation, plain-text file IO, and
//! base-frame estimation from rest measurements.
//!
//! The ellipsoid is discretized on a latitude/longitude surface grid with
//! radial layers down to the center. Grid cells (hexahedra away from the
//! poles, wedges at the pole caps, pyramids and tets around the center) are
//! tetrahedralized by fanning their faces to a per-cell centroid node. Quad
//! faces are split along the diagonal through their lowest global node index,
//! so neighboring cells always agree on the shared triangulation and the
//! extracted boundary is a closed 2-manifold.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Subdivision counts of the ellipsoid grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeshResolution {
    /// Latitude bands from pole to pole.
    pub latitude: usize,
    /// Longitude divisions around the axis.
    pub longitude: usize,
    /// Radial layers from center to surface.
    pub radial: usize,
}

impl MeshResolution {
    pub fn new(latitude: usize, longitude: usize, radial: usize) -> Self {
        Self {
            latitude,
            longitude,
            radial,
        }
    }
}

/// Analytic ellipsoid: semi-axes, rigid pose (base frame -> world/camera
/// frame), and grid resolution.
#[derive(Debug, Clone)]
pub struct EllipsoidSpec {
    pub semi_axes: Vector3<f64>,
    pub pose: Isometry3<f64>,
    pub resolution: MeshResolution,
}

impl EllipsoidSpec {
    pub fn new(semi_axes: Vector3<f64>, pose: Isometry3<f64>, resolution: MeshResolution) -> Self {
        Self {
            semi_axes,
            pose,
            resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.semi_axes.x > 0.0 && self.semi_axes.y > 0.0 && self.semi_axes.z > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "semi-axes must be positive, got {:?}",
                self.semi_axes
            )));
        }
        if !self.semi_axes.iter().all(|a| a.is_finite()) {
            return Err(Error::InvalidSpec("non-finite semi-axes".into()));
        }
        let r = &self.resolution;
        if r.latitude < 2 || r.radial < 2 {
            return Err(Error::InvalidSpec(format!(
                "degenerate resolution: latitude {} and radial {} subdivisions must both be >= 2",
                r.latitude, r.radial
            )));
        }
        // Two longitude divisions collapse each shell onto a plane through the
        // polar axis, so the minimum non-degenerate count is 3.
        if r.longitude < 3 {
            return Err(Error::InvalidSpec(format!(
                "degenerate resolution: longitude subdivisions must be >= 3, got {}",
                r.longitude
            )));
        }
        Ok(())
    }

    /// Surface point in the base-mesh frame at latitude `zeta`, longitude `sigma`.
    pub fn surface_point(&self, zeta: f64, sigma: f64) -> Point3<f64> {
        Point3::new(
            self.semi_axes.x * zeta.cos() * sigma.cos(),
            self.semi_axes.y * zeta.cos() * sigma.sin(),
            self.semi_axes.z * zeta.sin(),
        )
    }
}

/// Material parameters of a solid mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub total_mass: f64,
}

impl MaterialParams {
    pub fn new(youngs_modulus: f64, poisson_ratio: f64, total_mass: f64) -> Self {
        Self {
            youngs_modulus,
            poisson_ratio,
            total_mass,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.youngs_modulus > 0.0 && self.youngs_modulus.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "Young's modulus must be positive, got {}",
                self.youngs_modulus
            )));
        }
        if !(self.poisson_ratio > 0.0 && self.poisson_ratio < 0.5) {
            return Err(Error::InvalidSpec(format!(
                "Poisson ratio must lie in (0, 0.5), got {}",
                self.poisson_ratio
            )));
        }
        if !(self.total_mass > 0.0 && self.total_mass.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "total mass must be positive, got {}",
                self.total_mass
            )));
        }
        Ok(())
    }
}

/// Tetrahedral discretization of a solid body.
///
/// Node coordinates are stored in the body's own frame; for ellipsoid base
/// meshes that frame has the ellipsoid center at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SolidMesh {
    pub nodes: Vec<Point3<f64>>,
    pub tets: Vec<[usize; 4]>,
    pub surface_tris: Vec<[usize; 3]>,
    pub center: Point3<f64>,
}

impl SolidMesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of scalar degrees of freedom (3 per node).
    pub fn dof_count(&self) -> usize {
        3 * self.nodes.len()
    }

    /// Signed volume of tet `t`.
    pub fn tet_volume(&self, t: usize) -> f64 {
        let [a, b, c, d] = self.tets[t];
        signed_tet_volume(&self.nodes[a], &self.nodes[b], &self.nodes[c], &self.nodes[d])
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.tets.len()).map(|t| self.tet_volume(t)).sum()
    }

    /// Structural validation: index bounds, positive tet volumes, closed
    /// consistently-oriented surface.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n < 4 {
            return Err(Error::InvalidMesh(format!("only {n} nodes")));
        }
        for (i, tet) in self.tets.iter().enumerate() {
            if tet.iter().any(|&v| v >= n) {
                return Err(Error::InvalidMesh(format!("tet {i} references node out of range")));
            }
            let vol = self.tet_volume(i);
            if !(vol > 0.0) {
                return Err(Error::InvalidMesh(format!(
                    "tet {i} has non-positive volume {vol}"
                )));
            }
        }
        for (i, tri) in self.surface_tris.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(Error::InvalidMesh(format!(
                    "surface triangle {i} references node out of range"
                )));
            }
        }
        // Closed 2-manifold: every directed edge must appear exactly once,
        // and its reverse exactly once.
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in &self.surface_tris {
            for e in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                *directed.entry(e).or_insert(0) += 1;
            }
        }
        for (&(a, b), &count) in &directed {
            if count != 1 || directed.get(&(b, a)) != Some(&1) {
                return Err(Error::InvalidMesh(format!(
                    "surface is not a closed oriented 2-manifold at edge ({a}, {b})"
                )));
            }
        }
        Ok(())
    }

    /// Serialize in the plain-text mesh format:
    /// line 1 `N T S`, then N node lines `x y z`, T tet lines of 4 indices,
    /// S surface-triangle lines of 3 indices (all zero-based).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} {} {}",
            self.nodes.len(),
            self.tets.len(),
            self.surface_tris.len()
        );
        for p in &self.nodes {
            let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
        }
        for t in &self.tets {
            let _ = writeln!(out, "{} {} {} {}", t[0], t[1], t[2], t[3]);
        }
        for s in &self.surface_tris {
            let _ = writeln!(out, "{} {} {}", s[0], s[1], s[2]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut next_usize = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("unexpected end of mesh file reading {what}")))?
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
        };
        let n = next_usize("node count")?;
        let t = next_usize("tet count")?;
        let s = next_usize("surface count")?;

        let mut tokens = text.split_whitespace().skip(3);
        let mut next_f64 = |what: &str| -> Result<f64> {
            tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("unexpected end of mesh file reading {what}")))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
        };
        let mut nodes = Vec::with_capacity(n);
        for _ in 0..n {
            let x = next_f64("node x")?;
            let y = next_f64("node y")?;
            let z = next_f64("node z")?;
            nodes.push(Point3::new(x, y, z));
        }
        let mut remaining = text.split_whitespace().skip(3 + 3 * n);
        let mut next_idx = |what: &str| -> Result<usize> {
            remaining
                .next()
                .ok_or_else(|| Error::Parse(format!("unexpected end of mesh file reading {what}")))?
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
        };
        let mut tets = Vec::with_capacity(t);
        for _ in 0..t {
            tets.push([
                next_idx("tet index")?,
                next_idx("tet index")?,
                next_idx("tet index")?,
                next_idx("tet index")?,
            ]);
        }
        let mut surface_tris = Vec::with_capacity(s);
        for _ in 0..s {
            surface_tris.push([
                next_idx("surface index")?,
                next_idx("surface index")?,
                next_idx("surface index")?,
            ]);
        }
        let mesh = Self {
            nodes,
            tets,
            surface_tris,
            center: Point3::origin(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn write_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

pub fn signed_tet_volume(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>, d: &Point3<f64>) -> f64 {
    (b - a).cross(&(c - a)).dot(&(d - a)) / 6.0
}

// Node indexing of the ellipsoid grid: node 0 is the center; layer t
// (t = 1..=radial) holds [south pole, north pole, ring(1,0..lon),
// ring(2,0..lon), ...]; centroid nodes are appended in cell order.
struct GridIndex {
    lon: usize,
    layer_size: usize,
}

impl GridIndex {
    fn south(&self, t: usize) -> usize {
        1 + (t - 1) * self.layer_size
    }
    fn north(&self, t: usize) -> usize {
        self.south(t) + 1
    }
    /// Ring node at latitude band `i` (1..lat), longitude slot `j` (0..lon).
    fn ring(&self, i: usize, j: usize, t: usize) -> usize {
        self.south(t) + 2 + (i - 1) * self.lon + (j % self.lon)
    }
}

fn push_tet(
    nodes: &[Point3<f64>],
    tets: &mut Vec<[usize; 4]>,
    a: usize,
    b: usize,
    c: usize,
    d: usize,
) {
    let tet = if signed_tet_volume(&nodes[a], &nodes[b], &nodes[c], &nodes[d]) >= 0.0 {
        [a, b, c, d]
    } else {
        [a, b, d, c]
    };
    tets.push(tet);
}

/// Tetrahedralize one grid cell by fanning its faces to a centroid node.
/// Quad faces are split along the diagonal through their lowest global node
/// index, so neighboring cells agree on the shared triangulation.
fn fan_cell(
    nodes: &mut Vec<Point3<f64>>,
    tets: &mut Vec<[usize; 4]>,
    quads: &[[usize; 4]],
    tris: &[[usize; 3]],
) {
    let mut acc = Vector3::zeros();
    let mut cnt = 0usize;
    let mut seen: Vec<usize> = Vec::with_capacity(8);
    let mut visit = |v: usize, nodes: &Vec<Point3<f64>>| {
        if !seen.contains(&v) {
            seen.push(v);
            acc += nodes[v].coords;
            cnt += 1;
        }
    };
    for q in quads {
        for &v in q {
            visit(v, nodes);
        }
    }
    for t in tris {
        for &v in t {
            visit(v, nodes);
        }
    }
    let centroid = acc / cnt as f64;
    let g = nodes.len();
    nodes.push(Point3::from(centroid));
    for q in quads {
        let min_pos = (0..4).min_by_key(|&p| q[p]).unwrap();
        let rot = |p: usize| q[(min_pos + p) % 4];
        push_tet(nodes, tets, rot(0), rot(1), rot(2), g);
        push_tet(nodes, tets, rot(0), rot(2), rot(3), g);
    }
    for t in tris {
        push_tet(nodes, tets, t[0], t[1], t[2], g);
    }
}

/// Generate the solid ellipsoid mesh for `spec`. Deterministic: identical
/// specs produce bit-identical meshes.
pub fn generate_ellipsoid_mesh(spec: &EllipsoidSpec) -> Result<SolidMesh> {
    spec.validate()?;
    let lat = spec.resolution.latitude;
    let lon = spec.resolution.longitude;
    let rad = spec.resolution.radial;
    let idx = GridIndex {
        lon,
        layer_size: 2 + (lat - 1) * lon,
    };

    let mut nodes: Vec<Point3<f64>> = Vec::with_capacity(1 + rad * idx.layer_size);
    nodes.push(Point3::origin());
    for t in 1..=rad {
        let r = t as f64 / rad as f64;
        nodes.push(Point3::new(0.0, 0.0, -spec.semi_axes.z * r));
        nodes.push(Point3::new(0.0, 0.0, spec.semi_axes.z * r));
        for i in 1..lat {
            let zeta = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / lat as f64;
            for j in 0..lon {
                let sigma =
                    -std::f64::consts::PI + 2.0 * std::f64::consts::PI * j as f64 / lon as f64;
                let p = spec.surface_point(zeta, sigma);
                nodes.push(Point3::new(r * p.x, r * p.y, r * p.z));
            }
        }
    }

    let mut tets: Vec<[usize; 4]> = Vec::new();

    // Innermost shell: center to layer 1.
    let c = 0usize;
    for j in 0..lon {
        push_tet(&nodes, &mut tets, c, idx.south(1), idx.ring(1, j, 1), idx.ring(1, j + 1, 1));
        push_tet(
            &nodes,
            &mut tets,
            c,
            idx.north(1),
            idx.ring(lat - 1, j, 1),
            idx.ring(lat - 1, j + 1, 1),
        );
    }
    for i in 1..lat - 1 {
        for j in 0..lon {
            let q = [
                idx.ring(i, j, 1),
                idx.ring(i + 1, j, 1),
                idx.ring(i + 1, j + 1, 1),
                idx.ring(i, j + 1, 1),
            ];
            let lateral = [
                [c, q[0], q[1]],
                [c, q[1], q[2]],
                [c, q[2], q[3]],
                [c, q[3], q[0]],
            ];
            fan_cell(&mut nodes, &mut tets, &[q], &lateral);
        }
    }

    // Outer shells: layer t to t+1.
    for t in 1..rad {
        for j in 0..lon {
            // South wedge.
            let (a0, b0, c0) = (idx.south(t), idx.ring(1, j, t), idx.ring(1, j + 1, t));
            let (a1, b1, c1) = (
                idx.south(t + 1),
                idx.ring(1, j, t + 1),
                idx.ring(1, j + 1, t + 1),
            );
            fan_cell(
                &mut nodes,
                &mut tets,
                &[[a0, b0, b1, a1], [b0, c0, c1, b1], [c0, a0, a1, c1]],
                &[[a0, b0, c0], [a1, b1, c1]],
            );
            // North wedge.
            let (a0, b0, c0) = (
                idx.north(t),
                idx.ring(lat - 1, j, t),
                idx.ring(lat - 1, j + 1, t),
            );
            let (a1, b1, c1) = (
                idx.north(t + 1),
                idx.ring(lat - 1, j, t + 1),
                idx.ring(lat - 1, j + 1, t + 1),
            );
            fan_cell(
                &mut nodes,
                &mut tets,
                &[[a0, b0, b1, a1], [b0, c0, c1, b1], [c0, a0, a1, c1]],
                &[[a0, b0, c0], [a1, b1, c1]],
            );
        }
        for i in 1..lat - 1 {
            for j in 0..lon {
                let bot = [
                    idx.ring(i, j, t),
                    idx.ring(i + 1, j, t),
                    idx.ring(i + 1, j + 1, t),
                    idx.ring(i, j + 1, t),
                ];
                let top = [
                    idx.ring(i, j, t + 1),
                    idx.ring(i + 1, j, t + 1),
                    idx.ring(i + 1, j + 1, t + 1),
                    idx.ring(i, j + 1, t + 1),
                ];
                fan_cell(
                    &mut nodes,
                    &mut tets,
                    &[
                        bot,
                        top,
                        [bot[0], bot[1], top[1], top[0]],
                        [bot[1], bot[2], top[2], top[1]],
                        [bot[2], bot[3], top[3], top[2]],
                        [bot[3], bot[0], top[0], top[3]],
                    ],
                    &[],
                );
            }
        }
    }

    let surface_tris = extract_boundary(&nodes, &tets);
    let mesh = SolidMesh {
        nodes,
        tets,
        surface_tris,
        center: Point3::origin(),
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Extract the boundary triangles of a tet mesh, oriented outward (normal
/// facing away from the owning tet's opposite vertex).
pub fn extract_boundary(nodes: &[Point3<f64>], tets: &[[usize; 4]]) -> Vec<[usize; 3]> {
    // Faces of tet (a,b,c,d); each face paired with its opposite vertex.
    const FACES: [[usize; 4]; 4] = [[1, 2, 3, 0], [0, 3, 2, 1], [0, 1, 3, 2], [0, 2, 1, 3]];
    let mut count: HashMap<[usize; 3], ([usize; 3], usize)> = HashMap::new();
    for tet in tets {
        for f in &FACES {
            let tri = [tet[f[0]], tet[f[1]], tet[f[2]]];
            let mut key = tri;
            key.sort_unstable();
            let entry = count.entry(key).or_insert((tri, 0));
            entry.1 += 1;
            if entry.1 == 1 {
                // Orient outward: normal away from the tet's opposite vertex.
                let opp = tet[f[3]];
                let (a, b, c) = (tri[0], tri[1], tri[2]);
                let n = (nodes[b] - nodes[a]).cross(&(nodes[c] - nodes[a]));
                let to_opp = nodes[opp] - nodes[a];
                entry.0 = if n.dot(&to_opp) > 0.0 { [a, c, b] } else { [a, b, c] };
            }
        }
    }
    let mut boundary: Vec<[usize; 3]> = count
        .into_iter()
        .filter_map(|(_, (tri, c))| if c == 1 { Some(tri) } else { None })
        .collect();
    // Deterministic order regardless of hash-map iteration.
    boundary.sort_unstable();
    boundary
}

/// Generate a rectangular bar on a structured grid (silicon-block analog).
/// `size` is the full extent along each axis, centered on the origin; `cells`
/// is the cell count per axis. Uses the index-space 6-tet split, which is
/// conforming across the grid.
pub fn generate_bar_mesh(size: Vector3<f64>, cells: [usize; 3]) -> Result<SolidMesh> {
    if size.iter().any(|s| !(s > &0.0)) {
        return Err(Error::InvalidSpec(format!("bar size must be positive, got {size:?}")));
    }
    if cells.contains(&0) {
        return Err(Error::InvalidSpec("bar cell counts must be >= 1".into()));
    }
    let [nx, ny, nz] = cells;
    let node_id = |i: usize, j: usize, k: usize| (i * (ny + 1) + j) * (nz + 1) + k;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for i in 0..=nx {
        for j in 0..=ny {
            for k in 0..=nz {
                nodes.push(Point3::new(
                    size.x * (i as f64 / nx as f64 - 0.5),
                    size.y * (j as f64 / ny as f64 - 0.5),
                    size.z * (k as f64 / nz as f64 - 0.5),
                ));
            }
        }
    }
    // Kuhn subdivision of the unit cube along the (0,0,0)-(1,1,1) diagonal.
    const KUHN: [[[usize; 3]; 4]; 6] = [
        [[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1]],
        [[0, 0, 0], [1, 1, 0], [0, 1, 0], [1, 1, 1]],
        [[0, 0, 0], [0, 1, 0], [0, 1, 1], [1, 1, 1]],
        [[0, 0, 0], [0, 1, 1], [0, 0, 1], [1, 1, 1]],
        [[0, 0, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1]],
        [[0, 0, 0], [1, 0, 1], [1, 0, 0], [1, 1, 1]],
    ];
    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                for tet in &KUHN {
                    let mut ids = [0usize; 4];
                    for (v, off) in tet.iter().enumerate() {
                        ids[v] = node_id(i + off[0], j + off[1], k + off[2]);
                    }
                    if signed_tet_volume(&nodes[ids[0]], &nodes[ids[1]], &nodes[ids[2]], &nodes[ids[3]])
                        < 0.0
                    {
                        ids.swap(2, 3);
                    }
                    tets.push(ids);
                }
            }
        }
    }
    let surface_tris = extract_boundary(&nodes, &tets);
    let mesh = SolidMesh {
        nodes,
        tets,
        surface_tris,
        center: Point3::origin(),
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Estimate the base-mesh size and pose from rest-configuration samples.
///
/// Four corner points are selected by splitting the samples at their mean y
/// and taking the min/max-x point of each half (ties broken by lowest sample
/// index). Sizes follow from the corner distances; the rotation is the
/// effector orientation and the translation is the sample mass center shifted
/// down by `a_z` along z.
pub fn estimate_base_mesh_frame(
    rest_samples: &[Point3<f64>],
    effector_orientation: &UnitQuaternion<f64>,
    a_z: f64,
    resolution: MeshResolution,
) -> Result<EllipsoidSpec> {
    if rest_samples.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "need at least 4 rest samples, got {}",
            rest_samples.len()
        )));
    }
    if !(a_z > 0.0) {
        return Err(Error::InvalidSpec(format!("a_z must be positive, got {a_z}")));
    }
    // Collinearity check: the samples must span at least a 2D plane.
    let centroid: Vector3<f64> =
        rest_samples.iter().map(|p| p.coords).sum::<Vector3<f64>>() / rest_samples.len() as f64;
    let mut max_cross: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for a in rest_samples {
        let da = a.coords - centroid;
        scale = scale.max(da.norm());
        for b in rest_samples {
            let db = b.coords - centroid;
            max_cross = max_cross.max(da.cross(&db).norm());
        }
    }
    if max_cross <= 1e-12 * scale * scale.max(1.0) {
        return Err(Error::InsufficientData("rest samples are collinear".into()));
    }

    let mean_y = rest_samples.iter().map(|p| p.y).sum::<f64>() / rest_samples.len() as f64;
    let lower: Vec<usize> = (0..rest_samples.len())
        .filter(|&i| rest_samples[i].y <= mean_y)
        .collect();
    let upper: Vec<usize> = (0..rest_samples.len())
        .filter(|&i| rest_samples[i].y > mean_y)
        .collect();
    // Degenerate halves (all samples at the same y) fall back to the full set.
    let lower = if lower.is_empty() { (0..rest_samples.len()).collect() } else { lower };
    let upper = if upper.is_empty() { (0..rest_samples.len()).collect() } else { upper };

    let pick = |ids: &[usize], largest: bool| -> usize {
        let mut best = ids[0];
        for &i in &ids[1..] {
            let better = if largest {
                rest_samples[i].x > rest_samples[best].x
            } else {
                rest_samples[i].x < rest_samples[best].x
            };
            if better {
                best = i;
            }
        }
        best
    };
    let p0 = rest_samples[pick(&lower, false)];
    let p1 = rest_samples[pick(&lower, true)];
    let p2 = rest_samples[pick(&upper, false)];
    let p3 = rest_samples[pick(&upper, true)];

    let a_x = ((p1 - p0).norm() + (p3 - p2).norm()) / 4.0;
    let mid_lower = (p0.coords + p1.coords) / 2.0;
    let mid_upper = (p2.coords + p3.coords) / 2.0;
    let a_y = (mid_lower - mid_upper).norm() / 2.0;
    if !(a_x > 0.0 && a_y > 0.0) {
        return Err(Error::InsufficientData(format!(
            "estimated degenerate sizes a_x={a_x} a_y={a_y}"
        )));
    }

    let translation = centroid - a_z * Vector3::z();
    let pose = Isometry3::from_parts(Translation3::from(translation), *effector_orientation);
    Ok(EllipsoidSpec::new(Vector3::new(a_x, a_y, a_z), pose, resolution))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit_sphere_spec(res: MeshResolution) -> EllipsoidSpec {
        EllipsoidSpec::new(Vector3::new(1.0, 1.0, 1.0), Isometry3::identity(), res)
    }

    #[test]
    fn rejects_degenerate_resolution() {
        let spec = unit_sphere_spec(MeshResolution::new(1, 8, 2));
        assert!(matches!(generate_ellipsoid_mesh(&spec), Err(Error::InvalidSpec(_))));
        let spec = unit_sphere_spec(MeshResolution::new(4, 2, 2));
        assert!(matches!(generate_ellipsoid_mesh(&spec), Err(Error::InvalidSpec(_))));
        let spec = unit_sphere_spec(MeshResolution::new(4, 8, 1));
        assert!(matches!(generate_ellipsoid_mesh(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn unit_sphere_volume_close_to_analytic() {
        // Oracle: analytic sphere volume vs summed signed tet volumes.
        let spec = unit_sphere_spec(MeshResolution::new(20, 32, 3));
        let mesh = generate_ellipsoid_mesh(&spec).unwrap();
        let analytic = 4.0 * PI / 3.0;
        let total = mesh.total_volume();
        let rel = (total - analytic).abs() / analytic;
        assert!(rel < 0.02, "relative volume error {rel} (total {total})");
    }

    #[test]
    fn surface_nodes_on_unit_sphere() {
        let spec = unit_sphere_spec(MeshResolution::new(5, 7, 2));
        let mesh = generate_ellipsoid_mesh(&spec).unwrap();
        let mut surface_nodes: Vec<usize> = mesh.surface_tris.iter().flatten().copied().collect();
        surface_nodes.sort_unstable();
        surface_nodes.dedup();
        assert!(!surface_nodes.is_empty());
        for id in surface_nodes {
            let r = mesh.nodes[id].coords.norm();
            assert!((r - 1.0).abs() <= 1e-9, "surface node {id} at radius {r}");
        }
    }

    #[test]
    fn ellipsoid_bounding_box_matches_semi_axes() {
        // Sizes from the paper's black mesh.
        let spec = EllipsoidSpec::new(
            Vector3::new(0.03, 0.045, 0.0025),
            Isometry3::identity(),
            MeshResolution::new(6, 8, 2),
        );
        let mesh = generate_ellipsoid_mesh(&spec).unwrap();
        let mut max: Vector3<f64> = Vector3::zeros();
        for p in &mesh.nodes {
            max.x = max.x.max(p.x.abs());
            max.y = max.y.max(p.y.abs());
            max.z = max.z.max(p.z.abs());
        }
        assert!((max.x - 0.03).abs() < 1e-12);
        assert!((max.y - 0.045).abs() < 1e-12);
        assert!((max.z - 0.0025).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = unit_sphere_spec(MeshResolution::new(6, 9, 3));
        let a = generate_ellipsoid_mesh(&spec).unwrap();
        let b = generate_ellipsoid_mesh(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mesh_file_round_trip() {
        let spec = unit_sphere_spec(MeshResolution::new(4, 6, 2));
        let mesh = generate_ellipsoid_mesh(&spec).unwrap();
        let text = mesh.to_text();
        let back = SolidMesh::from_text(&text).unwrap();
        assert_eq!(mesh.nodes, back.nodes);
        assert_eq!(mesh.tets, back.tets);
        assert_eq!(mesh.surface_tris, back.surface_tris);
    }

    #[test]
    fn bar_mesh_volume_and_closure() {
        let mesh = generate_bar_mesh(Vector3::new(2.0, 1.0, 0.5), [4, 2, 2]).unwrap();
        assert!((mesh.total_volume() - 1.0).abs() < 1e-12);
        mesh.validate().unwrap();
    }

    #[test]
    fn frame_estimate_rectangle_corners() {
        // Corners (±1, ±2, 0): hand-evaluated sizes a_x = 1, a_y = 2.
        let samples = vec![
            Point3::new(1.0, 2.0, 0.0),
            Point3::new(1.0, -2.0, 0.0),
            Point3::new(-1.0, 2.0, 0.0),
            Point3::new(-1.0, -2.0, 0.0),
        ];
        let spec = estimate_base_mesh_frame(
            &samples,
            &UnitQuaternion::identity(),
            0.5,
            MeshResolution::new(4, 6, 2),
        )
        .unwrap();
        assert!((spec.semi_axes.x - 1.0).abs() < 1e-12);
        assert!((spec.semi_axes.y - 2.0).abs() < 1e-12);
        assert!((spec.semi_axes.z - 0.5).abs() < 1e-12);
        let t = spec.pose.translation.vector;
        assert!((t - Vector3::new(0.0, 0.0, -0.5)).norm() < 1e-12);
    }

    #[test]
    fn frame_estimate_symmetric_square_gives_equal_axes() {
        let samples = vec![
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(1.0, -1.0, 0.0),
            Point3::new(-1.0, 1.0, 0.0),
            Point3::new(-1.0, -1.0, 0.0),
        ];
        let spec = estimate_base_mesh_frame(
            &samples,
            &UnitQuaternion::identity(),
            0.1,
            MeshResolution::new(4, 6, 2),
        )
        .unwrap();
        assert!((spec.semi_axes.x - spec.semi_axes.y).abs() < 1e-12);
    }

    #[test]
    fn frame_estimate_translation_equivariant() {
        let base = vec![
            Point3::new(1.0, 2.0, 0.0),
            Point3::new(1.0, -2.0, 0.0),
            Point3::new(-1.0, 2.0, 0.0),
            Point3::new(-1.0, -2.0, 0.3),
        ];
        let d = Vector3::new(0.7, -1.3, 2.1);
        let shifted: Vec<Point3<f64>> = base.iter().map(|p| p + d).collect();
        let res = MeshResolution::new(4, 6, 2);
        let q = UnitQuaternion::identity();
        let a = estimate_base_mesh_frame(&base, &q, 0.5, res).unwrap();
        let b = estimate_base_mesh_frame(&shifted, &q, 0.5, res).unwrap();
        assert!((a.semi_axes - b.semi_axes).norm() < 1e-12);
        let dt = b.pose.translation.vector - a.pose.translation.vector;
        assert!((dt - d).norm() < 1e-12);
    }

    #[test]
    fn frame_estimate_rejects_insufficient_or_collinear() {
        let q = UnitQuaternion::identity();
        let res = MeshResolution::new(4, 6, 2);
        let few = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)];
        assert!(matches!(
            estimate_base_mesh_frame(&few, &q, 0.5, res),
            Err(Error::InsufficientData(_))
        ));
        let collinear: Vec<Point3<f64>> =
            (0..5).map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(
            estimate_base_mesh_frame(&collinear, &q, 0.5, res),
            Err(Error::InsufficientData(_))
        ));
    }
}
