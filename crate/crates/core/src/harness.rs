//! Scenario execution: the per-tick control loop, the point-based baseline
//! controller, run records with CSV export, and the shared modal-basis cache.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector, Isometry3, Point3, Translation3, UnitQuaternion, Vector3};

use crate::controller::{
    build_manip_projection, control_command, jacobian, lyapunov_decrement, regression_matrix,
    update_parameters, ControllerState, ManipProjection,
};
use crate::error::{Error, Result};
use crate::features::{compute_features, feature_error, FeatureVector, SamplingSet};
use crate::fem::assemble_system;
use crate::mesh::{
    estimate_base_mesh_frame, generate_bar_mesh, generate_ellipsoid_mesh, EllipsoidSpec,
    MaterialParams, MeshResolution, SolidMesh,
};
use crate::modal::{solve_modes, ModalBasis};
use crate::object_map::{reassemble_on_sampling_change, FeatureProjector};
use crate::plant::{generate_desired, DesiredState, Plant};
use crate::rng::SplitMix64;
use crate::scenario::{BaseMeshSpec, EventKind, PlantMeshSpec, Scenario};

/// One telemetry row per control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRow {
    pub tick: u64,
    pub t: f64,
    /// Feature error norm for the modal controller; point error norm for the
    /// baseline.
    pub error_norm: f64,
    pub e_x: f64,
    /// Manipulation errors, stacked 3k.
    pub e_d: Vec<f64>,
    /// Commanded velocities (world frame), stacked 3k.
    pub v: Vec<f64>,
    pub theta_norm: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub decrement: f64,
    pub jte_norm: f64,
    pub active_samples: usize,
}

/// Full record of one run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub scenario: String,
    pub controller: String,
    pub unit: String,
    pub manip_count: usize,
    pub sample_count: usize,
    pub feature_dim: usize,
    pub dt: f64,
    pub rows: Vec<TickRow>,
    pub converged: bool,
    pub stalled: bool,
    /// Ticks on which the baseline pseudo-inverse needed damping.
    pub damped_ticks: usize,
}

impl RunRecord {
    pub fn initial_error(&self) -> f64 {
        self.rows.first().map_or(0.0, |r| r.error_norm)
    }

    pub fn final_error(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.error_norm)
    }

    pub fn initial_jte(&self) -> f64 {
        self.rows.first().map_or(0.0, |r| r.jte_norm)
    }

    pub fn final_jte(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.jte_norm)
    }

    pub fn final_e_d_norm(&self) -> f64 {
        self.rows
            .last()
            .map_or(0.0, |r| r.e_d.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    pub fn initial_e_d_norm(&self) -> f64 {
        self.rows
            .first()
            .map_or(0.0, |r| r.e_d.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

/// Summary statistics of a run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub scenario: String,
    pub controller: String,
    pub initial_error: f64,
    pub final_error: f64,
    pub final_e_x: f64,
    /// Largest |e_d| component over the final 10% of the run.
    pub max_e_d_steady: f64,
    pub ticks_to_threshold: Option<u64>,
    pub ticks: u64,
    pub converged: bool,
    pub stalled: bool,
}

pub fn summarize(record: &RunRecord) -> RunSummary {
    let threshold = 1e-3 * record.initial_error();
    let ticks_to_threshold = record
        .rows
        .iter()
        .find(|r| r.error_norm <= threshold)
        .map(|r| r.tick);
    let steady_start = record.rows.len().saturating_sub(record.rows.len().div_ceil(10));
    let max_e_d_steady = record.rows[steady_start..]
        .iter()
        .flat_map(|r| r.e_d.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max);
    RunSummary {
        scenario: record.scenario.clone(),
        controller: record.controller.clone(),
        initial_error: record.initial_error(),
        final_error: record.final_error(),
        final_e_x: record.rows.last().map_or(0.0, |r| r.e_x),
        max_e_d_steady,
        ticks_to_threshold,
        ticks: record.rows.len() as u64,
        converged: record.converged,
        stalled: record.stalled,
    }
}

/// CSV schema version written in the header comment.
pub const CSV_VERSION: &str = "modalshape-run v1";

/// Write the documented CSV schema. Values use the shortest round-trip float
/// representation, so reading them back reproduces the exact bits.
pub fn export_csv(record: &RunRecord, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# {CSV_VERSION} scenario={} controller={} unit={} k={} l={} m={} dt={}",
        record.scenario,
        record.controller,
        record.unit,
        record.manip_count,
        record.sample_count,
        record.feature_dim,
        record.dt,
    );
    out.push_str("tick,t,error_norm,e_x");
    for i in 0..3 * record.manip_count {
        let _ = write!(out, ",ed_{i}");
    }
    for i in 0..3 * record.manip_count {
        let _ = write!(out, ",v_{i}");
    }
    out.push_str(",theta_norm,theta_min,theta_max,decrement,jte_norm,active_samples\n");
    for r in &record.rows {
        let _ = write!(out, "{},{},{},{}", r.tick, r.t, r.error_norm, r.e_x);
        for v in &r.e_d {
            let _ = write!(out, ",{v}");
        }
        for v in &r.v {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{}",
            r.theta_norm, r.theta_min, r.theta_max, r.decrement, r.jte_norm, r.active_samples
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a CSV produced by [`export_csv`] back into rows (test support and
/// external tooling).
pub fn read_csv(path: &Path) -> Result<(String, Vec<TickRow>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty CSV".into()))?
        .to_string();
    if !header.starts_with(&format!("# {CSV_VERSION}")) {
        return Err(Error::Parse(format!("unexpected CSV header: {header}")));
    }
    let k: usize = header
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix("k=").map(|s| s.parse().ok()))
        .flatten()
        .ok_or_else(|| Error::Parse("missing k= in CSV header".into()))?;
    let columns = lines
        .next()
        .ok_or_else(|| Error::Parse("missing column header".into()))?;
    let expected_cols = 4 + 6 * k + 6;
    if columns.split(',').count() != expected_cols {
        return Err(Error::Parse("column count mismatch".into()));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(Error::Parse(format!("bad row: {line}")));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad float `{}`: {e}", fields[i])))
        };
        let mut idx = 4;
        let mut e_d = Vec::with_capacity(3 * k);
        for _ in 0..3 * k {
            e_d.push(f(idx)?);
            idx += 1;
        }
        let mut v = Vec::with_capacity(3 * k);
        for _ in 0..3 * k {
            v.push(f(idx)?);
            idx += 1;
        }
        rows.push(TickRow {
            tick: fields[0]
                .parse()
                .map_err(|e| Error::Parse(format!("bad tick: {e}")))?,
            t: f(1)?,
            error_norm: f(2)?,
            e_x: f(3)?,
            e_d,
            v,
            theta_norm: f(idx)?,
            theta_min: f(idx + 1)?,
            theta_max: f(idx + 2)?,
            decrement: f(idx + 3)?,
            jte_norm: f(idx + 4)?,
            active_samples: fields[idx + 5]
                .parse()
                .map_err(|e| Error::Parse(format!("bad active count: {e}")))?,
        });
    }
    Ok((header, rows))
}

/// Shared cache of solved modal bases, keyed by base-mesh geometry and
/// material (the pose does not enter the eigenproblem). An entry solved with
/// more modes than requested is truncated on the way out.
#[derive(Default)]
pub struct BasisCache {
    entries: Mutex<HashMap<String, Arc<(SolidMesh, ModalBasis)>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl BasisCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn key(semi_axes: &Vector3<f64>, res: &MeshResolution, mat: &MaterialParams) -> String {
        format!(
            "{:x}:{:x}:{:x}:{}:{}:{}:{:x}:{:x}:{:x}",
            semi_axes.x.to_bits(),
            semi_axes.y.to_bits(),
            semi_axes.z.to_bits(),
            res.latitude,
            res.longitude,
            res.radial,
            mat.youngs_modulus.to_bits(),
            mat.poisson_ratio.to_bits(),
            mat.total_mass.to_bits()
        )
    }

    /// Fetch (or solve) a basis with at least `m` modes for the given base
    /// mesh geometry, truncated to exactly `m`.
    pub fn get_or_solve(
        &self,
        semi_axes: &Vector3<f64>,
        resolution: &MeshResolution,
        material: &MaterialParams,
        m: usize,
    ) -> Result<(Arc<SolidMesh>, ModalBasis)> {
        let key = Self::key(semi_axes, resolution, material);
        {
            let entries = self.entries.lock().unwrap();
            if let Some(entry) = entries.get(&key) {
                if entry.1.mode_count() >= m {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    let mesh = Arc::new(entry.0.clone());
                    let basis = entry.1.truncate_to(m)?;
                    return Ok((mesh, basis));
                }
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let spec = EllipsoidSpec::new(*semi_axes, Isometry3::identity(), *resolution);
        let mesh = generate_ellipsoid_mesh(&spec)?;
        let sys = assemble_system(&mesh, material)?;
        let basis = solve_modes(&sys, m)?;
        let entry = Arc::new((mesh.clone(), basis.clone()));
        self.entries.lock().unwrap().insert(key, entry);
        Ok((Arc::new(mesh), basis))
    }
}

fn build_plant(scenario: &Scenario) -> Result<Plant> {
    let mesh = match &scenario.plant_mesh {
        PlantMeshSpec::Ellipsoid {
            semi_axes,
            resolution,
        } => generate_ellipsoid_mesh(&EllipsoidSpec::new(
            *semi_axes,
            Isometry3::identity(),
            *resolution,
        ))?,
        PlantMeshSpec::Bar { size, cells } => generate_bar_mesh(*size, *cells)?,
        PlantMeshSpec::File(path) => SolidMesh::read_file(path)?,
    };
    for target in scenario.drift_nodes.iter().flatten() {
        if *target >= mesh.node_count() {
            return Err(Error::Config(format!(
                "drift node {target} out of range ({} nodes)",
                mesh.node_count()
            )));
        }
    }
    Plant::new(
        mesh,
        MaterialParams::new(
            scenario.plant_material_e,
            scenario.plant_material_nu,
            scenario.plant_material_mass,
        ),
        scenario.plant_model,
        scenario.fixed_nodes.clone(),
        scenario.manip_nodes.clone(),
        scenario.sample_nodes.clone(),
    )
}

/// Resolve the base-mesh spec: sizes from the scenario or estimated from the
/// rest samples; pose from the sample mass center (shifted down by a_z),
/// optionally perturbed by the scenario's pose offset.
fn resolve_base_spec(scenario: &Scenario, rest_samples: &[Point3<f64>]) -> Result<EllipsoidSpec> {
    let mut spec = match &scenario.base_mesh {
        BaseMeshSpec::Estimate { a_z, resolution } => estimate_base_mesh_frame(
            rest_samples,
            &UnitQuaternion::identity(),
            *a_z,
            *resolution,
        )?,
        BaseMeshSpec::Explicit {
            semi_axes,
            resolution,
        } => {
            let estimated = estimate_base_mesh_frame(
                rest_samples,
                &UnitQuaternion::identity(),
                semi_axes.z,
                *resolution,
            )?;
            EllipsoidSpec::new(*semi_axes, estimated.pose, *resolution)
        }
    };
    if let Some(offset) = &scenario.pose_offset {
        let rot = UnitQuaternion::from_euler_angles(
            offset.rot_deg.x.to_radians(),
            offset.rot_deg.y.to_radians(),
            offset.rot_deg.z.to_radians(),
        );
        let t_add = Isometry3::from_parts(Translation3::from(offset.translation), rot);
        spec.pose *= t_add;
    }
    Ok(spec)
}

fn points_of(state: &DVector<f64>, ids: &[usize]) -> Vec<Point3<f64>> {
    ids.iter()
        .map(|&id| Point3::new(state[3 * id], state[3 * id + 1], state[3 * id + 2]))
        .collect()
}

fn stack(points: &[Point3<f64>]) -> DVector<f64> {
    let mut out = DVector::zeros(3 * points.len());
    for (i, p) in points.iter().enumerate() {
        out[3 * i] = p.x;
        out[3 * i + 1] = p.y;
        out[3 * i + 2] = p.z;
    }
    out
}

/// Measurement corruption shared by both controllers: correspondence drift
/// toward a neighbor node plus optional Gaussian noise.
struct MeasurementModel<'s> {
    scenario: &'s Scenario,
    rng: SplitMix64,
}

impl<'s> MeasurementModel<'s> {
    fn new(scenario: &'s Scenario) -> Self {
        Self {
            scenario,
            rng: SplitMix64::new(scenario.seed.wrapping_mul(0x9E37_79B9).wrapping_add(1)),
        }
    }

    /// Reported world positions of the active sample slots at time t.
    fn measure(&mut self, state: &DVector<f64>, active: &[usize], t: f64) -> Vec<Point3<f64>> {
        let s = self.scenario;
        let alpha = (s.drift_rate * t).min(s.drift_cap).max(0.0);
        active
            .iter()
            .map(|&slot| {
                let node = s.sample_nodes[slot];
                let mut p = Vector3::new(state[3 * node], state[3 * node + 1], state[3 * node + 2]);
                if alpha > 0.0 {
                    if let Some(target) = s.drift_nodes[slot] {
                        let q = Vector3::new(
                            state[3 * target],
                            state[3 * target + 1],
                            state[3 * target + 2],
                        );
                        p = (1.0 - alpha) * p + alpha * q;
                    }
                }
                if s.noise_std > 0.0 {
                    for c in 0..3 {
                        p[c] += s.noise_std * self.rng.next_gaussian();
                    }
                }
                Point3::from(p)
            })
            .collect()
    }
}

/// Modal feature pipeline bound to one scenario run.
struct ModalPipeline {
    base_mesh: Arc<SolidMesh>,
    basis: ModalBasis,
    pose: Isometry3<f64>,
    world_to_base: Isometry3<f64>,
    /// Rest (world) positions of every sample slot.
    sample_rest_world: Vec<Point3<f64>>,
    /// Desired (world) positions of every sample slot.
    sample_desired_world: Vec<Point3<f64>>,
    projector: FeatureProjector,
    s_star: FeatureVector,
    manip_proj: ManipProjection,
    active: Vec<usize>,
}

impl ModalPipeline {
    fn build(
        scenario: &Scenario,
        plant: &Plant,
        desired: &DesiredState,
        cache: &BasisCache,
    ) -> Result<Self> {
        let rest = plant.rest_positions();
        let sample_rest_world = points_of(rest, &scenario.sample_nodes);
        let sample_desired_world = desired.sample_positions.clone();
        let spec = resolve_base_spec(scenario, &sample_rest_world)?;
        let material = MaterialParams::new(
            scenario.base_material_e,
            scenario.base_material_nu,
            scenario.base_material_mass,
        );
        let (base_mesh, basis) = cache.get_or_solve(
            &spec.semi_axes,
            &spec.resolution,
            &material,
            scenario.feature_dim,
        )?;
        if scenario.feature_dim > base_mesh.dof_count() {
            return Err(Error::Config(format!(
                "m = {} exceeds base mesh DOFs {}",
                scenario.feature_dim,
                base_mesh.dof_count()
            )));
        }
        let world_to_base = spec.pose.inverse();

        let manip_rest_world = points_of(rest, &scenario.manip_nodes);
        let manip_rest_base: Vec<Point3<f64>> =
            manip_rest_world.iter().map(|p| world_to_base * p).collect();
        let manip_proj = build_manip_projection(&basis, &base_mesh, &manip_rest_base)?;

        let active: Vec<usize> = (0..scenario.sample_nodes.len()).collect();
        let (projector, s_star) = Self::sampling_artifacts(
            &basis,
            &base_mesh,
            &world_to_base,
            &sample_rest_world,
            &sample_desired_world,
            &active,
        )?;
        Ok(Self {
            base_mesh,
            basis,
            pose: spec.pose,
            world_to_base,
            sample_rest_world,
            sample_desired_world,
            projector,
            s_star,
            manip_proj,
            active,
        })
    }

    fn sampling_artifacts(
        basis: &ModalBasis,
        base_mesh: &SolidMesh,
        world_to_base: &Isometry3<f64>,
        sample_rest_world: &[Point3<f64>],
        sample_desired_world: &[Point3<f64>],
        active: &[usize],
    ) -> Result<(FeatureProjector, FeatureVector)> {
        let rest_base: Vec<Point3<f64>> = active
            .iter()
            .map(|&slot| world_to_base * sample_rest_world[slot])
            .collect();
        let projector = reassemble_on_sampling_change(basis, base_mesh, &rest_base)?;
        let desired_base: Vec<Point3<f64>> = active
            .iter()
            .map(|&slot| world_to_base * sample_desired_world[slot])
            .collect();
        let samples = SamplingSet::new(
            stack(&desired_base),
            (0..desired_base.len()).collect(),
            0.0,
        )?;
        let s_star = compute_features(&projector, &samples)?;
        Ok((projector, s_star))
    }

    /// Rebuild the projector and desired features for the current active set.
    fn rebuild_sampling(&mut self) -> Result<()> {
        let (projector, s_star) = Self::sampling_artifacts(
            &self.basis,
            &self.base_mesh,
            &self.world_to_base,
            &self.sample_rest_world,
            &self.sample_desired_world,
            &self.active,
        )?;
        self.projector = projector;
        self.s_star = s_star;
        Ok(())
    }

    /// Features of a world-frame measurement of the active slots.
    fn features(&self, measured_world: &[Point3<f64>], t: f64) -> Result<FeatureVector> {
        let base: Vec<Point3<f64>> = measured_world.iter().map(|p| self.world_to_base * p).collect();
        let samples = SamplingSet::new(stack(&base), (0..base.len()).collect(), t)?;
        compute_features(&self.projector, &samples)
    }

    /// Rotate a stacked base-frame command into the world frame.
    fn command_to_world(&self, v_base: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v_base.len());
        for i in 0..v_base.len() / 3 {
            let v = Vector3::new(v_base[3 * i], v_base[3 * i + 1], v_base[3 * i + 2]);
            let w = self.pose.rotation * v;
            out[3 * i] = w.x;
            out[3 * i + 1] = w.y;
            out[3 * i + 2] = w.z;
        }
        out
    }
}

/// Execute the adaptive modal controller on `scenario`.
pub fn run_scenario(scenario: &Scenario, cache: &BasisCache) -> Result<RunRecord> {
    scenario.validate()?;
    let mut plant = build_plant(scenario)?;
    let desired = generate_desired(
        &mut plant,
        &scenario.desired_displacement(),
        scenario.desired_ramp_steps,
    )?;
    let mut pipeline = ModalPipeline::build(scenario, &plant, &desired, cache)?;
    let mut state = ControllerState::uniform_gains(
        scenario.feature_dim,
        scenario.manip_nodes.len(),
        scenario.feedback_gain,
        scenario.update_gain,
        scenario.dt(),
    )?;
    state.command_clamp = scenario.command_clamp;
    state.theta_clamp = scenario.theta_clamp;

    let mut measure = MeasurementModel::new(scenario);
    let dt = scenario.dt();
    let mut rows: Vec<TickRow> = Vec::new();
    let mut converged = false;
    let mut initial_error = 0.0f64;
    let mut event_cursor = 0usize;

    for tick in 0..scenario.max_ticks {
        // Scripted sampling events fire at the start of their tick.
        let mut sampling_changed = false;
        while event_cursor < scenario.events.len()
            && scenario.events[event_cursor].tick == tick
        {
            let event = &scenario.events[event_cursor];
            match event.kind {
                EventKind::Occlude => {
                    pipeline.active.retain(|slot| !event.slots.contains(slot));
                }
                EventKind::Restore => {
                    for &slot in &event.slots {
                        if !pipeline.active.contains(&slot) {
                            pipeline.active.push(slot);
                        }
                    }
                    pipeline.active.sort_unstable();
                }
            }
            sampling_changed = true;
            event_cursor += 1;
        }
        if sampling_changed {
            if pipeline.active.is_empty() {
                return Err(Error::Config(format!(
                    "tick {tick}: all samples occluded"
                )));
            }
            pipeline.rebuild_sampling().map_err(|e| {
                Error::Config(format!("tick {tick}: projector re-assembly failed: {e}"))
            })?;
        }

        let t = tick as f64 * dt;
        let obs = plant.observe();
        let measured = measure.measure(&obs.full_state, &pipeline.active, t);
        let s = pipeline.features(&measured, t)?;
        let e_s = feature_error(&s, &pipeline.s_star)?;
        let error_norm = e_s.norm();
        if tick == 0 {
            initial_error = error_norm;
        }

        // Algorithm ordering: error, parameter update, Jacobian, command.
        let jac_prev = jacobian(&pipeline.manip_proj, &state)?;
        let y = regression_matrix(&pipeline.manip_proj, &jac_prev, &e_s, &state)?;
        state.theta_hat = update_parameters(&state, &y, &e_s).map_err(|e| {
            Error::Numeric(format!("tick {tick}: {e}"))
        })?;
        let jac = jacobian(&pipeline.manip_proj, &state)?;
        let v_base = control_command(&jac, &e_s, &state)?;
        let decrement = lyapunov_decrement(&jac, &e_s, &state)?;
        let jte = jac.j.transpose() * &e_s.0;
        let v_world = pipeline.command_to_world(&v_base);

        let (e_x, e_d) = plant.metrics(&desired.full_state, &desired.manip_positions)?;
        rows.push(TickRow {
            tick,
            t,
            error_norm,
            e_x,
            e_d: e_d.as_slice().to_vec(),
            v: v_world.as_slice().to_vec(),
            theta_norm: state.theta_hat.norm(),
            theta_min: state.theta_hat.min(),
            theta_max: state.theta_hat.max(),
            decrement,
            jte_norm: jte.norm(),
            active_samples: pipeline.active.len(),
        });

        if error_norm <= scenario.stop_ratio * initial_error {
            converged = true;
            break;
        }
        plant.step(&v_world, dt).map_err(|e| {
            Error::Numeric(format!("tick {tick}: plant step failed: {e}"))
        })?;
    }

    let initial_jte = rows.first().map_or(0.0, |r| r.jte_norm);
    let final_jte = rows.last().map_or(0.0, |r| r.jte_norm);
    let stalled = !converged && final_jte <= 1e-6 * initial_jte.max(f64::MIN_POSITIVE);
    Ok(RunRecord {
        scenario: scenario.name.clone(),
        controller: "modal".into(),
        unit: scenario.unit.clone(),
        manip_count: scenario.manip_nodes.len(),
        sample_count: scenario.sample_nodes.len(),
        feature_dim: scenario.feature_dim,
        dt,
        rows,
        converged,
        stalled,
        damped_ticks: 0,
    })
}

/// Probe the plant's point Jacobian by finite differences around the current
/// configuration; the plant is restored to its prior targets afterwards.
pub fn probe_point_jacobian(
    plant: &mut Plant,
    active: &[usize],
    step: f64,
) -> Result<DMatrix<f64>> {
    let k3 = 3 * plant.manip_count();
    let rest_targets = plant.manip_targets().clone();
    let rest_samples = {
        let obs = plant.observe();
        stack(&obs.sample_positions)
    };
    let mut j = DMatrix::zeros(3 * active.len(), k3);
    for dof in 0..k3 {
        let mut targets = rest_targets.clone();
        targets[dof] += step;
        let obs = plant.set_manip_targets(&targets)?;
        let moved = stack(&obs.sample_positions);
        for (slot_out, &slot) in active.iter().enumerate() {
            for c in 0..3 {
                j[(3 * slot_out + c, dof)] =
                    (moved[3 * slot + c] - rest_samples[3 * slot + c]) / step;
            }
        }
    }
    plant.set_manip_targets(&rest_targets)?;
    Ok(j)
}

/// Damped pseudo-inverse solve: v = J^+ r, engaging Tikhonov damping when the
/// smallest singular value collapses. Returns (solution, damped?).
fn pinv_apply(j: &DMatrix<f64>, r: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let svd = j.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numeric("SVD failed".into()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Numeric("SVD failed".into()))?;
    let max_sv = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    let min_sv = svd.singular_values.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let damped = min_sv < 1e-8 * max_sv;
    let lambda2 = if damped { (1e-3 * max_sv).powi(2) } else { 0.0 };
    let utr = u.transpose() * r;
    let mut scaled = DVector::zeros(svd.singular_values.len());
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        let denom = s * s + lambda2;
        if denom > 0.0 {
            scaled[i] = s * utr[i] / denom;
        }
    }
    Ok((v_t.transpose() * scaled, damped))
}

/// Execute the point-based baseline controller: finite-difference initialized
/// point Jacobian, damped pseudo-inverse command, Broyden rank-one updates.
pub fn run_baseline(scenario: &Scenario, cache: &BasisCache) -> Result<RunRecord> {
    scenario.validate()?;
    let mut plant = build_plant(scenario)?;
    let desired = generate_desired(
        &mut plant,
        &scenario.desired_displacement(),
        scenario.desired_ramp_steps,
    )?;
    let active: Vec<usize> = (0..scenario.sample_nodes.len()).collect();
    let dt = scenario.dt();

    let mut j_p = probe_point_jacobian(&mut plant, &active, scenario.baseline_probe_step)?;

    let x_star = stack(&desired.sample_positions);

    // Gain calibration: match the modal controller's initial command
    // magnitude, as the comparative protocol prescribes.
    let k_p = match scenario.baseline_gain {
        Some(g) => g,
        None => {
            let modal_v0 = {
                let pipeline = ModalPipeline::build(scenario, &plant, &desired, cache)?;
                let state = ControllerState::uniform_gains(
                    scenario.feature_dim,
                    scenario.manip_nodes.len(),
                    scenario.feedback_gain,
                    scenario.update_gain,
                    dt,
                )?;
                let mut measure = MeasurementModel::new(scenario);
                let obs = plant.observe();
                let measured = measure.measure(&obs.full_state, &pipeline.active, 0.0);
                let s = pipeline.features(&measured, 0.0)?;
                let e_s = feature_error(&s, &pipeline.s_star)?;
                let jac = jacobian(&pipeline.manip_proj, &state)?;
                control_command(&jac, &e_s, &state)?.norm()
            };
            let r0 = {
                let obs = plant.observe();
                stack(&obs.sample_positions) - &x_star
            };
            let (pinv_r0, _) = pinv_apply(&j_p, &r0)?;
            let denom = pinv_r0.norm();
            if denom > 1e-12 && modal_v0 > 0.0 {
                modal_v0 / denom
            } else {
                1.0
            }
        }
    };

    let mut measure = MeasurementModel::new(scenario);
    let mut rows: Vec<TickRow> = Vec::new();
    let mut converged = false;
    let mut damped_ticks = 0usize;
    let mut initial_error = 0.0f64;
    let mut prev_measured: Option<DVector<f64>> = None;
    let mut prev_v: Option<DVector<f64>> = None;

    for tick in 0..scenario.max_ticks {
        let t = tick as f64 * dt;
        let obs = plant.observe();
        let measured_pts = measure.measure(&obs.full_state, &active, t);
        let measured = stack(&measured_pts);

        // Broyden rank-one update from the previously commanded motion.
        if let (Some(prev), Some(v_prev)) = (&prev_measured, &prev_v) {
            let dx_r = v_prev * dt;
            let denom = dx_r.dot(&dx_r);
            if denom > 1e-14 {
                let dx_s = &measured - prev;
                let correction = (&dx_s - &j_p * &dx_r) * (1.0 / denom);
                j_p += correction * dx_r.transpose();
            }
        }

        let r = &measured - &x_star;
        let error_norm = r.norm();
        if tick == 0 {
            initial_error = error_norm;
        }
        let (pinv_r, damped) = pinv_apply(&j_p, &r)?;
        if damped {
            damped_ticks += 1;
        }
        let v = -&pinv_r * k_p;

        let (e_x, e_d) = plant.metrics(&desired.full_state, &desired.manip_positions)?;
        rows.push(TickRow {
            tick,
            t,
            error_norm,
            e_x,
            e_d: e_d.as_slice().to_vec(),
            v: v.as_slice().to_vec(),
            theta_norm: f64::NAN,
            theta_min: f64::NAN,
            theta_max: f64::NAN,
            decrement: f64::NAN,
            jte_norm: f64::NAN,
            active_samples: active.len(),
        });

        if error_norm <= scenario.stop_ratio * initial_error {
            converged = true;
            break;
        }
        plant.step(&v, dt)?;
        prev_measured = Some(measured);
        prev_v = Some(v);
    }

    let initial_v: f64 = rows
        .first()
        .map_or(0.0, |r| r.v.iter().map(|x| x * x).sum::<f64>().sqrt());
    let final_v: f64 = rows
        .last()
        .map_or(0.0, |r| r.v.iter().map(|x| x * x).sum::<f64>().sqrt());
    let stalled = !converged && final_v <= 1e-6 * initial_v.max(f64::MIN_POSITIVE);
    Ok(RunRecord {
        scenario: scenario.name.clone(),
        controller: "baseline".into(),
        unit: scenario.unit.clone(),
        manip_count: scenario.manip_nodes.len(),
        sample_count: scenario.sample_nodes.len(),
        feature_dim: scenario.feature_dim,
        dt,
        rows,
        converged,
        stalled,
        damped_ticks,
    })
}

/// Run several scenarios, sharing one basis cache. Scenario files in a sweep
/// use the same base mesh, so the modal solve happens once (at the largest
/// requested m) and later runs hit the cache.
pub fn run_sweep(scenarios: &[Scenario], cache: &BasisCache, workers: usize) -> Vec<Result<RunRecord>> {
    // Pre-solve each distinct base geometry at the largest requested m.
    let mut max_m: HashMap<String, (Vector3<f64>, MeshResolution, MaterialParams, usize)> =
        HashMap::new();
    for s in scenarios {
        // Pose and size estimation need the plant; explicit sizes can be
        // grouped directly. Estimated sizes are resolved per-run and cached
        // under their resulting key anyway.
        if let BaseMeshSpec::Explicit {
            semi_axes,
            resolution,
        } = &s.base_mesh
        {
            let mat = MaterialParams::new(s.base_material_e, s.base_material_nu, s.base_material_mass);
            let key = BasisCache::key(semi_axes, resolution, &mat);
            let entry = max_m
                .entry(key)
                .or_insert((*semi_axes, *resolution, mat, 0));
            entry.3 = entry.3.max(s.feature_dim);
        }
    }
    for (_, (axes, res, mat, m)) in max_m {
        let _ = cache.get_or_solve(&axes, &res, &mat, m);
    }

    let results: Vec<Mutex<Option<Result<RunRecord>>>> =
        scenarios.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = workers.max(1).min(scenarios.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= scenarios.len() {
                    break;
                }
                let out = run_scenario(&scenarios[i], cache);
                *results[i].lock().unwrap() = Some(out);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker finished"))
        .collect()
}

/// Map a finished record onto the documented process exit code:
///0 converged, 2 stalled short of the threshold, 1 other non-convergence.
pub fn exit_code(record: &RunRecord) -> i32 {
    if record.converged {
        0
    } else if record.stalled {
        2
    } else {
        1
    }
}
