//! C ABI for the modalshape library.
//!
//! Opaque handles wrap the mesh, modal basis, and feature projector; every
//! fallible call returns an `MsStatus` code and stores a message retrievable
//! with [`ms_last_error_message`]. The header `include/modalshape.h` is
//! generated by cbindgen at build time.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use modalshape::harness::{run_baseline, run_scenario, BasisCache};
use modalshape::{
    assemble_system, build_allocation, build_feature_projector, compute_features,
    generate_ellipsoid_mesh, project_points, solve_modes, EllipsoidSpec, Error, FeatureProjector,
    MaterialParams, MeshResolution, ModalBasis, SamplingSet, Scenario, SolidMesh,
};
use nalgebra::{DVector, Isometry3, Point3, Vector3};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsStatus {
    MsOk = 0,
    MsErrNullPointer = 1,
    MsErrUtf8 = 2,
    MsErrInvalidInput = 3,
    MsErrRankDeficient = 4,
    MsErrNumeric = 5,
    MsErrIo = 6,
    MsErrPanic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &Error) -> MsStatus {
    match err {
        Error::RankDeficient { .. } => MsStatus::MsErrRankDeficient,
        Error::Numeric(_) => MsStatus::MsErrNumeric,
        Error::Io(_) => MsStatus::MsErrIo,
        _ => MsStatus::MsErrInvalidInput,
    }
}

fn fail(err: Error) -> MsStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

/// Run a closure, translating panics into `MsErrPanic`.
fn guarded(f: impl FnOnce() -> MsStatus) -> MsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            MsStatus::MsErrPanic
        }
    }
}

unsafe fn path_from(ptr: *const c_char) -> Result<PathBuf, MsStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(MsStatus::MsErrNullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(MsStatus::MsErrUtf8)
        }
    }
}

/// Copy the last error message into `buf` (NUL-terminated, truncated to
/// `cap`). Returns the full message length including the terminator.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn ms_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            // Guarantee termination on truncation.
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Opaque solid tetrahedral mesh.
pub struct MsMesh {
    inner: SolidMesh,
}

/// Opaque truncated modal basis.
pub struct MsBasis {
    inner: ModalBasis,
}

/// Opaque feature projector bound to a mesh/basis pair.
pub struct MsProjector {
    inner: FeatureProjector,
    sample_count: usize,
}

/// Summary of a scenario run.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MsRunSummary {
    pub initial_error_norm: f64,
    pub final_error_norm: f64,
    pub final_mesh_error: f64,
    pub final_manip_distance: f64,
    pub ticks: u64,
    pub converged: c_int,
    pub stalled: c_int,
}

/// Generate a solid ellipsoid mesh.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives an owned handle that
/// must be released with [`ms_mesh_free`].
#[no_mangle]
pub unsafe extern "C" fn ms_mesh_generate(
    ax: f64,
    ay: f64,
    az: f64,
    lat: usize,
    lon: usize,
    rad: usize,
    out: *mut *mut MsMesh,
) -> MsStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return MsStatus::MsErrNullPointer;
        }
        let spec = EllipsoidSpec::new(
            Vector3::new(ax, ay, az),
            Isometry3::identity(),
            MeshResolution::new(lat, lon, rad),
        );
        match generate_ellipsoid_mesh(&spec) {
            Ok(mesh) => {
                *out = Box::into_raw(Box::new(MsMesh { inner: mesh }));
                MsStatus::MsOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Load a mesh from the plain-text mesh format.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as in [`ms_mesh_generate`].
#[no_mangle]
pub unsafe extern "C" fn ms_mesh_load(path: *const c_char, out: *mut *mut MsMesh) -> MsStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return MsStatus::MsErrNullPointer;
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        match SolidMesh::read_file(&path) {
            Ok(mesh) => {
                *out = Box::into_raw(Box::new(MsMesh { inner: mesh }));
                MsStatus::MsOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Write a mesh in the plain-text mesh format.
///
/// # Safety
/// `mesh` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ms_mesh_save(mesh: *const MsMesh, path: *const c_char) -> MsStatus {
    guarded(|| {
        if mesh.is_null() {
            set_error("null mesh handle");
            return MsStatus::MsErrNullPointer;
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        match (*mesh).inner.write_file(&path) {
            Ok(()) => MsStatus::MsOk,
            Err(e) => fail(e),
        }
    })
}

/// Number of nodes; zero for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ms_mesh_node_count(mesh: *const MsMesh) -> usize {
    if mesh.is_null() {
        return 0;
    }
    (*mesh).inner.node_count()
}

/// Release a mesh handle (null is a no-op).
///
/// # Safety
/// `mesh` must be null or an owned handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ms_mesh_free(mesh: *mut MsMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// Assemble the FEM system of `mesh` and solve for the `m` lowest modes.
///
/// # Safety
/// `mesh` must be a live handle; `out` receives an owned handle to release
/// with [`ms_basis_free`].
#[no_mangle]
pub unsafe extern "C" fn ms_basis_compute(
    mesh: *const MsMesh,
    youngs_modulus: f64,
    poisson_ratio: f64,
    total_mass: f64,
    m: usize,
    out: *mut *mut MsBasis,
) -> MsStatus {
    guarded(|| {
        if mesh.is_null() || out.is_null() {
            set_error("null handle");
            return MsStatus::MsErrNullPointer;
        }
        let mat = MaterialParams::new(youngs_modulus, poisson_ratio, total_mass);
        let result = assemble_system(&(*mesh).inner, &mat).and_then(|sys| solve_modes(&sys, m));
        match result {
            Ok(basis) => {
                *out = Box::into_raw(Box::new(MsBasis { inner: basis }));
                MsStatus::MsOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of retained modes; zero for a null handle.
///
/// # Safety
/// `basis` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ms_basis_mode_count(basis: *const MsBasis) -> usize {
    if basis.is_null() {
        return 0;
    }
    (*basis).inner.mode_count()
}

/// Copy the squared natural frequencies (ascending) into `out`.
///
/// # Safety
/// `out` must point to at least `len` doubles; `basis` must be live.
#[no_mangle]
pub unsafe extern "C" fn ms_basis_frequencies(
    basis: *const MsBasis,
    out: *mut f64,
    len: usize,
) -> MsStatus {
    guarded(|| {
        if basis.is_null() || out.is_null() {
            set_error("null handle");
            return MsStatus::MsErrNullPointer;
        }
        let freqs = (*basis).inner.freqs();
        if len < freqs.len() {
            set_error("output buffer too small");
            return MsStatus::MsErrInvalidInput;
        }
        std::ptr::copy_nonoverlapping(freqs.as_slice().as_ptr(), out, freqs.len());
        MsStatus::MsOk
    })
}

/// Write the basis dump format (reload is bit-identical).
///
/// # Safety
/// `basis` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ms_basis_save(basis: *const MsBasis, path: *const c_char) -> MsStatus {
    guarded(|| {
        if basis.is_null() {
            set_error("null basis handle");
            return MsStatus::MsErrNullPointer;
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        match (*basis).inner.write_file(&path) {
            Ok(()) => MsStatus::MsOk,
            Err(e) => fail(e),
        }
    })
}

/// Release a basis handle (null is a no-op).
///
/// # Safety
/// `basis` must be null or an owned handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ms_basis_free(basis: *mut MsBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

/// Build the feature projector for `sample_count` rest points given as
/// interleaved xyz coordinates in the base-mesh frame.
///
/// # Safety
/// `rest_points` must hold `3 * sample_count` doubles; handles must be live;
/// `out` receives an owned handle for [`ms_projector_free`].
#[no_mangle]
pub unsafe extern "C" fn ms_projector_build(
    basis: *const MsBasis,
    mesh: *const MsMesh,
    rest_points: *const f64,
    sample_count: usize,
    out: *mut *mut MsProjector,
) -> MsStatus {
    guarded(|| {
        if basis.is_null() || mesh.is_null() || rest_points.is_null() || out.is_null() {
            set_error("null handle");
            return MsStatus::MsErrNullPointer;
        }
        if sample_count == 0 {
            set_error("sample_count must be positive");
            return MsStatus::MsErrInvalidInput;
        }
        let coords = std::slice::from_raw_parts(rest_points, 3 * sample_count);
        let points: Vec<Point3<f64>> = coords
            .chunks_exact(3)
            .map(|c| Point3::new(c[0], c[1], c[2]))
            .collect();
        let result = project_points(&(*mesh).inner, &points)
            .and_then(|projs| build_allocation(&(*mesh).inner, &(*basis).inner, &projs))
            .and_then(|alloc| build_feature_projector(&(*basis).inner, &alloc));
        match result {
            Ok(projector) => {
                *out = Box::into_raw(Box::new(MsProjector {
                    inner: projector,
                    sample_count,
                }));
                MsStatus::MsOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a projector handle (null is a no-op).
///
/// # Safety
/// `projector` must be null or an owned handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ms_projector_free(projector: *mut MsProjector) {
    if !projector.is_null() {
        drop(Box::from_raw(projector));
    }
}

/// Compute the modal deformation features of one measurement. `positions`
/// holds the measured sample coordinates (interleaved xyz, base frame) in the
/// projector's sample order; `out_features` receives `feature_dim` values.
///
/// # Safety
/// `positions` must hold `3 * sample_count` doubles matching the projector;
/// `out_features` must hold `feature_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn ms_features_compute(
    projector: *const MsProjector,
    positions: *const f64,
    sample_count: usize,
    out_features: *mut f64,
    feature_dim: usize,
) -> MsStatus {
    guarded(|| {
        if projector.is_null() || positions.is_null() || out_features.is_null() {
            set_error("null handle");
            return MsStatus::MsErrNullPointer;
        }
        let p = &*projector;
        if sample_count != p.sample_count {
            set_error("sample_count does not match the projector");
            return MsStatus::MsErrInvalidInput;
        }
        if feature_dim < p.inner.feature_dim() {
            set_error("feature buffer too small");
            return MsStatus::MsErrInvalidInput;
        }
        let coords = std::slice::from_raw_parts(positions, 3 * sample_count);
        let samples = match SamplingSet::new(
            DVector::from_column_slice(coords),
            (0..sample_count).collect(),
            0.0,
        ) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        match compute_features(&p.inner, &samples) {
            Ok(s) => {
                std::ptr::copy_nonoverlapping(s.0.as_slice().as_ptr(), out_features, s.dim());
                MsStatus::MsOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Load and execute a scenario file; optionally run the point-based baseline
/// controller and write the per-tick CSV.
///
/// # Safety
/// `scenario_path` must be a NUL-terminated string; `csv_path` may be null;
/// `out` must point to a writable summary struct.
#[no_mangle]
pub unsafe extern "C" fn ms_scenario_run(
    scenario_path: *const c_char,
    baseline: c_int,
    csv_path: *const c_char,
    out: *mut MsRunSummary,
) -> MsStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null summary pointer");
            return MsStatus::MsErrNullPointer;
        }
        let path = match path_from(scenario_path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        let scenario = match Scenario::load(&path) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        let cache = BasisCache::new();
        let record = if baseline != 0 {
            run_baseline(&scenario, &cache)
        } else {
            run_scenario(&scenario, &cache)
        };
        let record = match record {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        if !csv_path.is_null() {
            let csv = match path_from(csv_path) {
                Ok(p) => p,
                Err(code) => return code,
            };
            if let Err(e) = modalshape::harness::export_csv(&record, &csv) {
                return fail(e);
            }
        }
        *out = MsRunSummary {
            initial_error_norm: record.initial_error(),
            final_error_norm: record.final_error(),
            final_mesh_error: record.rows.last().map_or(0.0, |r| r.e_x),
            final_manip_distance: record.final_e_d_norm(),
            ticks: record.rows.len() as u64,
            converged: record.converged as c_int,
            stalled: record.stalled as c_int,
        };
        MsStatus::MsOk
    })
}
