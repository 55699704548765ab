//! Scenario configuration: a flat key-value text format describing the
//! plant, the base mesh, controller gains, desired deformation, events, and
//! stop criteria.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment; keys are
//! listed in docs/scenario-format.md. Unknown keys are rejected so typos
//! surface at load time instead of silently using defaults.

use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};

use crate::error::{Error, Result};
use crate::mesh::MeshResolution;
use crate::plant::ElasticityModel;

/// How the plant mesh is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum PlantMeshSpec {
    Ellipsoid {
        semi_axes: Vector3<f64>,
        resolution: MeshResolution,
    },
    Bar {
        size: Vector3<f64>,
        cells: [usize; 3],
    },
    File(PathBuf),
}

/// How the base mesh sizes are obtained. The pose always comes from the rest
/// samples (mass center shifted down by a_z), optionally perturbed by
/// `pose_offset`.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseMeshSpec {
    /// Estimate a_x, a_y from the rest samples; a_z is the rough thickness.
    Estimate { a_z: f64, resolution: MeshResolution },
    /// Explicit semi-axes.
    Explicit {
        semi_axes: Vector3<f64>,
        resolution: MeshResolution,
    },
}

/// Extra rigid transform multiplied onto the estimated base-mesh pose
/// (rotations in degrees, applied x-y-z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseOffset {
    pub rot_deg: Vector3<f64>,
    pub translation: Vector3<f64>,
}

/// Scripted sampling events.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub tick: u64,
    pub kind: EventKind,
    /// Sample slots (positions in `sample_nodes`) affected.
    pub slots: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Occlude,
    Restore,
}

/// A fully parsed scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub unit: String,
    pub seed: u64,

    pub plant_mesh: PlantMeshSpec,
    pub plant_material_e: f64,
    pub plant_material_nu: f64,
    pub plant_material_mass: f64,
    pub plant_model: ElasticityModel,
    pub fixed_nodes: Vec<usize>,
    pub manip_nodes: Vec<usize>,
    pub sample_nodes: Vec<usize>,

    pub desired_disp: Vec<f64>,
    pub desired_ramp_steps: usize,

    pub base_mesh: BaseMeshSpec,
    pub pose_offset: Option<PoseOffset>,
    pub base_material_e: f64,
    pub base_material_nu: f64,
    pub base_material_mass: f64,
    pub feature_dim: usize,

    pub feedback_gain: f64,
    pub update_gain: f64,
    pub rate_hz: f64,
    pub max_ticks: u64,
    pub stop_ratio: f64,
    pub command_clamp: Option<f64>,
    /// Optional clamp interval for the parameter estimates.
    pub theta_clamp: Option<(f64, f64)>,

    pub events: Vec<Event>,
    /// Per-sample drift target node (None = no drift for that sample).
    pub drift_nodes: Vec<Option<usize>>,
    pub drift_rate: f64,
    pub drift_cap: f64,
    pub noise_std: f64,

    pub baseline_gain: Option<f64>,
    pub baseline_probe_step: f64,
}

impl Scenario {
    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".into());
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse_named(&text, &name, &base_dir)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_named(text, "scenario", Path::new(""))
    }

    fn parse_named(text: &str, name: &str, base_dir: &Path) -> Result<Self> {
        let mut kv: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            kv.push((key.trim().to_string(), value.trim().to_string()));
        }

        let mut get = |key: &str| -> Option<String> {
            kv.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone())
        };

        let family = get("family").unwrap_or_else(|| "simulation".into());
        let (def_ks, def_gamma, def_rate) = match family.as_str() {
            "simulation" => (80.0, 500.0, 50.0),
            "experiment" => (0.1, 0.1, 30.0),
            other => {
                return Err(Error::Config(format!(
                    "unknown family `{other}` (simulation | experiment)"
                )))
            }
        };

        let plant_mesh = parse_plant_mesh(
            &get("plant_mesh")
                .ok_or_else(|| Error::Config("missing key plant_mesh".into()))?,
            base_dir,
        )?;
        let base_mesh = parse_base_mesh(
            &get("base_mesh").ok_or_else(|| Error::Config("missing key base_mesh".into()))?,
        )?;

        let manip_nodes = parse_usize_list(&get("manip_nodes").unwrap_or_default())?;
        let desired_disp = parse_f64_list(&get("desired_disp").unwrap_or_default())?;
        if desired_disp.len() != 3 * manip_nodes.len() {
            return Err(Error::Config(format!(
                "desired_disp has {} values; expected 3 per manipulation node ({})",
                desired_disp.len(),
                3 * manip_nodes.len()
            )));
        }

        let sample_nodes = parse_usize_list(&get("sample_nodes").unwrap_or_default())?;
        let drift_nodes = match get("drift_nodes") {
            None => vec![None; sample_nodes.len()],
            Some(v) => {
                let entries = parse_i64_list(&v)?;
                if entries.len() != sample_nodes.len() {
                    return Err(Error::Config(format!(
                        "drift_nodes has {} entries for {} samples",
                        entries.len(),
                        sample_nodes.len()
                    )));
                }
                entries
                    .into_iter()
                    .map(|e| if e < 0 { None } else { Some(e as usize) })
                    .collect()
            }
        };

        let mut events = Vec::new();
        for (k, v) in kv.iter().filter(|(k, _)| k == "event") {
            let _ = k;
            events.push(parse_event(v)?);
        }
        events.sort_by_key(|e| e.tick);

        let pose_offset = match get("base_pose_offset") {
            None => None,
            Some(v) => {
                let nums = parse_f64_list(&v)?;
                if nums.len() != 6 {
                    return Err(Error::Config(
                        "base_pose_offset needs 6 values: rx ry rz tx ty tz".into(),
                    ));
                }
                Some(PoseOffset {
                    rot_deg: Vector3::new(nums[0], nums[1], nums[2]),
                    translation: Vector3::new(nums[3], nums[4], nums[5]),
                })
            }
        };

        let command_clamp = match get("command_clamp").as_deref() {
            None | Some("none") => None,
            Some(v) => Some(parse_scalar(v, "command_clamp")?),
        };
        let theta_clamp = match get("theta_clamp").as_deref() {
            None | Some("none") => None,
            Some(v) => {
                let nums = parse_f64_list(v)?;
                if nums.len() != 2 || nums[0] >= nums[1] {
                    return Err(Error::Config(
                        "theta_clamp needs two values lo,hi with lo < hi".into(),
                    ));
                }
                Some((nums[0], nums[1]))
            }
        };
        let baseline_gain = match get("baseline_gain").as_deref() {
            None | Some("auto") => None,
            Some(v) => Some(parse_scalar(v, "baseline_gain")?),
        };

        let scenario = Scenario {
            name: name.to_string(),
            unit: get("unit").unwrap_or_else(|| "unit".into()),
            seed: get("seed").map(|v| parse_scalar(&v, "seed").map(|s| s as u64)).transpose()?.unwrap_or(0),
            plant_mesh,
            plant_material_e: parse_or(&mut get, "plant_e", 100.0)?,
            plant_material_nu: parse_or(&mut get, "plant_nu", 0.45)?,
            plant_material_mass: parse_or(&mut get, "plant_mass", 100.0)?,
            plant_model: match get("plant_model").as_deref() {
                None | Some("linear") => ElasticityModel::Linear,
                Some("corotational") => ElasticityModel::Corotational,
                Some(other) => {
                    return Err(Error::Config(format!("unknown plant_model `{other}`")))
                }
            },
            fixed_nodes: parse_usize_list(&get("fixed_nodes").unwrap_or_default())?,
            manip_nodes,
            sample_nodes,
            desired_disp,
            desired_ramp_steps: parse_or(&mut get, "desired_ramp_steps", 20.0)? as usize,
            base_mesh,
            pose_offset,
            base_material_e: parse_or(&mut get, "base_e", 50.0)?,
            base_material_nu: parse_or(&mut get, "base_nu", 0.45)?,
            base_material_mass: parse_or(&mut get, "base_mass", 20.0)?,
            feature_dim: parse_or(&mut get, "m", 30.0)? as usize,
            feedback_gain: parse_or(&mut get, "k_s", def_ks)?,
            update_gain: parse_or(&mut get, "gamma", def_gamma)?,
            rate_hz: parse_or(&mut get, "rate_hz", def_rate)?,
            max_ticks: parse_or(&mut get, "max_ticks", 20000.0)? as u64,
            stop_ratio: parse_or(&mut get, "stop_ratio", 1e-3)?,
            command_clamp,
            theta_clamp,
            events,
            drift_nodes,
            drift_rate: parse_or(&mut get, "drift_rate", 0.0)?,
            drift_cap: parse_or(&mut get, "drift_cap", 1.0)?,
            noise_std: parse_or(&mut get, "noise_std", 0.0)?,
            baseline_gain,
            baseline_probe_step: parse_or(&mut get, "baseline_probe_step", 0.05)?,
        };

        // Reject unknown keys.
        const KNOWN: &[&str] = &[
            "family", "unit", "seed", "plant_mesh", "plant_e", "plant_nu", "plant_mass",
            "plant_model", "fixed_nodes", "manip_nodes", "sample_nodes", "desired_disp",
            "desired_ramp_steps", "base_mesh", "base_pose_offset", "base_e", "base_nu",
            "base_mass", "m", "k_s", "gamma", "rate_hz", "max_ticks", "stop_ratio",
            "command_clamp", "theta_clamp", "event", "drift_nodes", "drift_rate", "drift_cap", "noise_std",
            "baseline_gain", "baseline_probe_step",
        ];
        for (k, _) in &kv {
            if !KNOWN.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown scenario key `{k}`")));
            }
        }

        scenario.validate()?;
        Ok(scenario)
    }

    /// Structural checks that do not need the meshes loaded.
    pub fn validate(&self) -> Result<()> {
        if self.manip_nodes.is_empty() {
            return Err(Error::Config("no manipulation nodes".into()));
        }
        if self.sample_nodes.is_empty() {
            return Err(Error::Config("no sample nodes".into()));
        }
        let m = self.feature_dim;
        let k = self.manip_nodes.len();
        let l = self.sample_nodes.len();
        if 3 * k > m {
            return Err(Error::Config(format!(
                "3k = {} exceeds feature dimension m = {m}",
                3 * k
            )));
        }
        if m > 3 * l {
            return Err(Error::Config(format!(
                "m = {m} exceeds 3l = {} (too few sample nodes)",
                3 * l
            )));
        }
        if !(self.rate_hz > 0.0) {
            return Err(Error::Config("rate_hz must be positive".into()));
        }
        if !(self.stop_ratio > 0.0) {
            return Err(Error::Config("stop_ratio must be positive".into()));
        }
        for e in &self.events {
            for &slot in &e.slots {
                if slot >= self.sample_nodes.len() {
                    return Err(Error::Config(format!(
                        "event references sample slot {slot}, only {} samples",
                        self.sample_nodes.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn desired_displacement(&self) -> DVector<f64> {
        DVector::from_vec(self.desired_disp.clone())
    }
}

fn parse_scalar(v: &str, what: &str) -> Result<f64> {
    v.trim()
        .parse::<f64>()
        .map_err(|e| Error::Config(format!("bad {what} `{v}`: {e}")))
}

fn parse_or(get: &mut impl FnMut(&str) -> Option<String>, key: &str, default: f64) -> Result<f64> {
    match get(key) {
        None => Ok(default),
        Some(v) => parse_scalar(&v, key),
    }
}

fn parse_usize_list(v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad index `{s}`: {e}")))
        })
        .collect()
}

fn parse_i64_list(v: &str) -> Result<Vec<i64>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<i64>()
                .map_err(|e| Error::Config(format!("bad integer `{s}`: {e}")))
        })
        .collect()
}

fn parse_f64_list(v: &str) -> Result<Vec<f64>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| parse_scalar(s, "list entry"))
        .collect()
}

/// Key-value pairs inside a structured value, e.g. `ax=1 ay=2`.
fn inline_args(v: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for tok in v.split_whitespace() {
        let (k, val) = tok
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{tok}`")))?;
        out.push((k.to_string(), parse_scalar(val, k)?));
    }
    Ok(out)
}

fn arg(args: &[(String, f64)], key: &str) -> Result<f64> {
    args.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Config(format!("missing argument `{key}`")))
}

fn parse_plant_mesh(v: &str, base_dir: &Path) -> Result<PlantMeshSpec> {
    if let Some(rest) = v.strip_prefix("builtin:ellipsoid") {
        let args = inline_args(rest)?;
        Ok(PlantMeshSpec::Ellipsoid {
            semi_axes: Vector3::new(arg(&args, "ax")?, arg(&args, "ay")?, arg(&args, "az")?),
            resolution: MeshResolution::new(
                arg(&args, "lat")? as usize,
                arg(&args, "lon")? as usize,
                arg(&args, "rad")? as usize,
            ),
        })
    } else if let Some(rest) = v.strip_prefix("builtin:bar") {
        let args = inline_args(rest)?;
        Ok(PlantMeshSpec::Bar {
            size: Vector3::new(arg(&args, "sx")?, arg(&args, "sy")?, arg(&args, "sz")?),
            cells: [
                arg(&args, "nx")? as usize,
                arg(&args, "ny")? as usize,
                arg(&args, "nz")? as usize,
            ],
        })
    } else if let Some(path) = v.strip_prefix("file:") {
        Ok(PlantMeshSpec::File(base_dir.join(path.trim())))
    } else {
        Err(Error::Config(format!(
            "plant_mesh must start with builtin:ellipsoid, builtin:bar, or file:, got `{v}`"
        )))
    }
}

fn parse_base_mesh(v: &str) -> Result<BaseMeshSpec> {
    if let Some(rest) = v.strip_prefix("estimate") {
        let args = inline_args(rest)?;
        Ok(BaseMeshSpec::Estimate {
            a_z: arg(&args, "az")?,
            resolution: MeshResolution::new(
                arg(&args, "lat")? as usize,
                arg(&args, "lon")? as usize,
                arg(&args, "rad")? as usize,
            ),
        })
    } else if let Some(rest) = v.strip_prefix("explicit") {
        let args = inline_args(rest)?;
        Ok(BaseMeshSpec::Explicit {
            semi_axes: Vector3::new(arg(&args, "ax")?, arg(&args, "ay")?, arg(&args, "az")?),
            resolution: MeshResolution::new(
                arg(&args, "lat")? as usize,
                arg(&args, "lon")? as usize,
                arg(&args, "rad")? as usize,
            ),
        })
    } else {
        Err(Error::Config(format!(
            "base_mesh must start with estimate or explicit, got `{v}`"
        )))
    }
}

fn parse_event(v: &str) -> Result<Event> {
    let mut kind = None;
    let mut tick = None;
    let mut slots = Vec::new();
    for tok in v.split_whitespace() {
        if tok == "occlude" {
            kind = Some(EventKind::Occlude);
        } else if tok == "restore" {
            kind = Some(EventKind::Restore);
        } else if let Some(t) = tok.strip_prefix("tick=") {
            tick = Some(
                t.parse::<u64>()
                    .map_err(|e| Error::Config(format!("bad event tick `{t}`: {e}")))?,
            );
        } else if let Some(s) = tok.strip_prefix("samples=") {
            slots = parse_usize_list(s)?;
        } else {
            return Err(Error::Config(format!("bad event token `{tok}`")));
        }
    }
    Ok(Event {
        tick: tick.ok_or_else(|| Error::Config("event missing tick=".into()))?,
        kind: kind.ok_or_else(|| Error::Config("event missing occlude/restore".into()))?,
        slots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
# benchmark-style scenario
unit = voxel
seed = 7
plant_mesh = builtin:bar sx=4 sy=1 sz=1 nx=4 ny=2 nz=2
plant_e = 100
plant_nu = 0.49
plant_mass = 100
fixed_nodes = 0, 1, 2
manip_nodes = 10
sample_nodes = 5, 6, 7, 8
desired_disp = 1, 1, 0.8
base_mesh = estimate az=0.5 lat=6 lon=8 rad=2
m = 9
k_s = 80
gamma = 500
rate_hz = 50
event = occlude tick=100 samples=1,2
event = restore tick=200 samples=1,2
"#;

    #[test]
    fn parses_sample_scenario() {
        let s = Scenario::parse(SAMPLE).unwrap();
        assert_eq!(s.unit, "voxel");
        assert_eq!(s.seed, 7);
        assert_eq!(s.fixed_nodes, vec![0, 1, 2]);
        assert_eq!(s.manip_nodes, vec![10]);
        assert_eq!(s.feature_dim, 9);
        assert_eq!(s.events.len(), 2);
        assert_eq!(s.events[0].kind, EventKind::Occlude);
        assert_eq!(s.events[0].slots, vec![1, 2]);
        assert!((s.dt() - 0.02).abs() < 1e-15);
        match &s.plant_mesh {
            PlantMeshSpec::Bar { size, cells } => {
                assert_eq!(*size, Vector3::new(4.0, 1.0, 1.0));
                assert_eq!(*cells, [4, 2, 2]);
            }
            other => panic!("unexpected plant mesh {other:?}"),
        }
    }

    #[test]
    fn family_defaults_apply() {
        let text = SAMPLE.replace("k_s = 80\ngamma = 500\nrate_hz = 50\n", "family = experiment\n");
        let s = Scenario::parse(&text).unwrap();
        assert_eq!(s.feedback_gain, 0.1);
        assert_eq!(s.update_gain, 0.1);
        assert_eq!(s.rate_hz, 30.0);
    }

    #[test]
    fn unknown_key_rejected() {
        let text = format!("{SAMPLE}\nnot_a_key = 3\n");
        assert!(matches!(Scenario::parse(&text), Err(Error::Config(_))));
    }

    #[test]
    fn dimension_constraints_checked() {
        let text = SAMPLE.replace("m = 9", "m = 30");
        // 4 samples -> 3l = 12 < 30.
        assert!(matches!(Scenario::parse(&text), Err(Error::Config(_))));
        let text = SAMPLE.replace("m = 9", "m = 2");
        // 3k = 3 > 2.
        assert!(matches!(Scenario::parse(&text), Err(Error::Config(_))));
    }

    #[test]
    fn drift_list_length_enforced() {
        let text = format!("{SAMPLE}\ndrift_nodes = 1,2\n");
        assert!(matches!(Scenario::parse(&text), Err(Error::Config(_))));
        let text = format!("{SAMPLE}\ndrift_nodes = 9,-1,-1,11\ndrift_rate = 0.1\n");
        let s = Scenario::parse(&text).unwrap();
        assert_eq!(
            s.drift_nodes,
            vec![Some(9), None, None, Some(11)]
        );
    }
}
