//! Deformation features from 3D surface samplings, plus arc-length
//! resampling for polyline-style measurements.

use nalgebra::{DVector, Point3};

use crate::error::{Error, Result};
use crate::object_map::FeatureProjector;

/// Positions of the tracked surface samplings at one instant, stacked as a
/// 3l vector in the base-mesh frame. `ids` ties each sample to the projector
/// column it corresponds to.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSet {
    pub positions: DVector<f64>,
    pub ids: Vec<usize>,
    pub timestamp: f64,
}

impl SamplingSet {
    pub fn new(positions: DVector<f64>, ids: Vec<usize>, timestamp: f64) -> Result<Self> {
        if positions.len() % 3 != 0 {
            return Err(Error::InvalidInput(format!(
                "sampling vector length {} is not divisible by 3",
                positions.len()
            )));
        }
        if positions.len() != 3 * ids.len() {
            return Err(Error::InvalidInput(format!(
                "{} ids for {} position entries",
                ids.len(),
                positions.len()
            )));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return Err(Error::InvalidInput("duplicate sample ids".into()));
        }
        Ok(Self {
            positions,
            ids,
            timestamp,
        })
    }

    pub fn from_points(points: &[Point3<f64>], timestamp: f64) -> Self {
        let mut positions = DVector::zeros(3 * points.len());
        for (i, p) in points.iter().enumerate() {
            positions[3 * i] = p.x;
            positions[3 * i + 1] = p.y;
            positions[3 * i + 2] = p.z;
        }
        Self {
            positions,
            ids: (0..points.len()).collect(),
            timestamp,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.ids.len()
    }
}

/// Modal deformation feature vector (also used for desired features and
/// feature errors).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub DVector<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Resample an ordered polyline into `l` points at equal arc-length spacing.
///
/// Open polylines include both endpoints; closed polylines wrap around and
/// place `l` points starting from the first vertex.
pub fn resample_polyline(points: &[Point3<f64>], l: usize, closed: bool) -> Result<Vec<Point3<f64>>> {
    if points.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "polyline needs at least 2 points, got {}",
            points.len()
        )));
    }
    if l < 2 {
        return Err(Error::InvalidRequest(format!(
            "need at least 2 samples, got {l}"
        )));
    }
    let mut cumulative = vec![0.0f64];
    for w in points.windows(2) {
        let d = (w[1] - w[0]).norm();
        cumulative.push(cumulative.last().unwrap() + d);
    }
    if closed {
        let d = (points[0] - points[points.len() - 1]).norm();
        cumulative.push(cumulative.last().unwrap() + d);
    }
    let total = *cumulative.last().unwrap();
    if !(total > 0.0) {
        return Err(Error::DegenerateInput("polyline has zero total length".into()));
    }

    let vertex = |i: usize| -> Point3<f64> {
        if closed {
            points[i % points.len()]
        } else {
            points[i]
        }
    };
    let mut out = Vec::with_capacity(l);
    for s in 0..l {
        let target = if closed {
            total * s as f64 / l as f64
        } else {
            total * s as f64 / (l - 1) as f64
        };
        // Find segment containing the target arc length.
        let mut seg = cumulative.len() - 2;
        for i in 0..cumulative.len() - 1 {
            if target <= cumulative[i + 1] || i == cumulative.len() - 2 {
                seg = i;
                break;
            }
        }
        let seg_len = cumulative[seg + 1] - cumulative[seg];
        let frac = if seg_len > 0.0 {
            (target - cumulative[seg]) / seg_len
        } else {
            0.0
        };
        let a = vertex(seg);
        let b = vertex(seg + 1);
        out.push(Point3::from(a.coords + (b.coords - a.coords) * frac));
    }
    Ok(out)
}

/// Compute the modal deformation features of one measurement:
/// s = D_Phi D_N (x(p_s, t) - x(eta(p_s))).
pub fn compute_features(proj: &FeatureProjector, samples: &SamplingSet) -> Result<FeatureVector> {
    if samples.positions.len() != proj.sample_dim() {
        return Err(Error::InvalidInput(format!(
            "measurement dimension {} does not match projector width {}",
            samples.positions.len(),
            proj.sample_dim()
        )));
    }
    if samples.positions.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample positions".into()));
    }
    let displacement = &samples.positions - &proj.rest_eta;
    Ok(FeatureVector(proj.combined() * displacement))
}

/// Feature error e_s = s - s_star.
pub fn feature_error(s: &FeatureVector, s_star: &FeatureVector) -> Result<FeatureVector> {
    if s.dim() != s_star.dim() {
        return Err(Error::InvalidInput(format!(
            "feature dimensions differ: {} vs {}",
            s.dim(),
            s_star.dim()
        )));
    }
    Ok(FeatureVector(&s.0 - &s_star.0))
}
