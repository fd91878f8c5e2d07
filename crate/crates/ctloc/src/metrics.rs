//! Trajectory alignment and absolute-positioning-error metrics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Rotation, Timestamp};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {needed} matched timestamps, found {found}")]
    TooFewMatches { needed: usize, found: usize },
}

/// A timestamped position sample of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPosition {
    pub t: Timestamp,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Planar rigid alignment (yaw + translation); the vertical offset is
    /// compensated by its mean.
    #[default]
    Se2,
    /// Full 3D rigid alignment.
    Se3,
}

/// Rigid transform mapping estimate coordinates into truth coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Alignment {
    pub fn identity() -> Self {
        Alignment {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(p) + self.translation
    }
}

/// Nearest-neighbor timestamp matching within `tol` seconds. Both inputs
/// must be time-sorted.
pub fn match_timestamps(
    a: &[TimedPosition],
    b: &[TimedPosition],
    tol: f64,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for (i, pa) in a.iter().enumerate() {
        while j + 1 < b.len()
            && (b[j + 1].t.seconds() - pa.t.seconds()).abs()
                <= (b[j].t.seconds() - pa.t.seconds()).abs()
        {
            j += 1;
        }
        if !b.is_empty() && (b[j].t.seconds() - pa.t.seconds()).abs() <= tol {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Closed-form least-squares rigid alignment of `estimate` onto `truth`
/// over timestamp-matched pairs.
pub fn align_trajectories(
    estimate: &[TimedPosition],
    truth: &[TimedPosition],
    mode: AlignMode,
) -> Result<(Alignment, Vec<TimedPosition>), MetricsError> {
    let pairs = match_timestamps(estimate, truth, 0.010);
    if pairs.len() < 3 {
        return Err(MetricsError::TooFewMatches {
            needed: 3,
            found: pairs.len(),
        });
    }
    let n = pairs.len() as f64;
    let mut ce = Vector3::zeros();
    let mut ct = Vector3::zeros();
    for &(i, j) in &pairs {
        ce += estimate[i].position;
        ct += truth[j].position;
    }
    ce /= n;
    ct /= n;

    let rotation = match mode {
        AlignMode::Se2 => {
            let mut dot = 0.0;
            let mut cross = 0.0;
            for &(i, j) in &pairs {
                let e = estimate[i].position - ce;
                let t = truth[j].position - ct;
                dot += e.x * t.x + e.y * t.y;
                cross += e.x * t.y - e.y * t.x;
            }
            Rotation::from_yaw(cross.atan2(dot))
        }
        AlignMode::Se3 => {
            let mut cov = Matrix3::zeros();
            for &(i, j) in &pairs {
                let e = estimate[i].position - ce;
                let t = truth[j].position - ct;
                cov += t * e.transpose();
            }
            let svd = cov.svd(true, true);
            let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
            let mut s = Matrix3::identity();
            if (u * v_t).determinant() < 0.0 {
                s[(2, 2)] = -1.0;
            }
            let m = u * s * v_t;
            Rotation::from_unit_quaternion(nalgebra::UnitQuaternion::from_matrix(&m))
        }
    };
    let translation = ct - rotation.apply(&ce);
    let alignment = Alignment {
        rotation,
        translation,
    };
    let aligned = estimate
        .iter()
        .map(|p| TimedPosition {
            t: p.t,
            position: alignment.apply(&p.position),
        })
        .collect();
    Ok((alignment, aligned))
}

/// Absolute positioning error summary.
#[derive(Debug, Clone, Serialize)]
pub struct ApeReport {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// (error bound, cumulative fraction), 1 cm resolution, ends at 1.
    pub cdf: Vec<(f64, f64)>,
    /// Per-timestamp errors.
    pub errors: Vec<(f64, f64)>,
}

/// Per-timestamp Euclidean position error between matched samples.
pub fn compute_ape(
    estimate: &[TimedPosition],
    truth: &[TimedPosition],
) -> Result<ApeReport, MetricsError> {
    let pairs = match_timestamps(estimate, truth, 0.010);
    if pairs.is_empty() {
        return Err(MetricsError::TooFewMatches {
            needed: 1,
            found: 0,
        });
    }
    let errors: Vec<(f64, f64)> = pairs
        .iter()
        .map(|&(i, j)| {
            (
                estimate[i].t.seconds(),
                (estimate[i].position - truth[j].position).norm(),
            )
        })
        .collect();
    let n = errors.len() as f64;
    let rmse = (errors.iter().map(|(_, e)| e * e).sum::<f64>() / n).sqrt();
    let mean = errors.iter().map(|(_, e)| e).sum::<f64>() / n;
    let max = errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let mut sorted: Vec<f64> = errors.iter().map(|(_, e)| *e).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let bins = (max / 0.01).ceil() as usize;
    let mut cdf = Vec::with_capacity(bins + 1);
    for k in 0..=bins {
        let bound = k as f64 * 0.01;
        let frac = sorted.partition_point(|&e| e <= bound) as f64 / n;
        cdf.push((bound, frac));
    }
    if let Some(last) = cdf.last_mut() {
        last.1 = 1.0;
    }
    Ok(ApeReport {
        rmse,
        mean,
        median,
        max,
        cdf,
        errors,
    })
}
