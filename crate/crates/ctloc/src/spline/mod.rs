//! Split non-uniform cumulative cubic B-spline trajectory: translation in
//! R³ and rotation in SO(3) over a shared knot vector, plus the adaptive
//! knot-span allocation strategy.

mod basis;
mod knots;
mod rotation;
mod translation;

pub use basis::{cumulative_basis, CumulativeBasis};
pub use knots::{
    assign_ncp, compute_motion_variation, split_knot_span, KnotBinConfig, KnotVector,
    MotionVariation,
};
pub use rotation::RotationSpline;
pub use translation::TranslationSpline;

use crate::geom::{Pose, Rotation, Timestamp};
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("time {t:.6} outside spline support [{lo:.6}, {hi:.6}]")]
    OutOfSupport { t: f64, lo: f64, hi: f64 },
    #[error("zero-length knot span at segment {segment}")]
    DegenerateSpan { segment: usize },
    #[error("knot vector is not non-decreasing at index {index}")]
    NonMonotoneKnots { index: usize },
    #[error("expected {expected} control points, got {got}")]
    ControlPointCount { expected: usize, got: usize },
    #[error("window ({start:.6}, {end:.6}] contains no samples")]
    EmptyWindow { start: f64, end: f64 },
}

/// Translation and rotation splines over one shared knot layout.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub translation: TranslationSpline,
    pub rotation: RotationSpline,
}

impl Trajectory {
    pub fn new(
        knots: KnotVector,
        trans_cps: Vec<Vector3<f64>>,
        rot_cps: Vec<Rotation>,
    ) -> Result<Self, SplineError> {
        let translation = TranslationSpline::new(knots.clone(), trans_cps)?;
        let rotation = RotationSpline::new(knots, rot_cps)?;
        Ok(Trajectory {
            translation,
            rotation,
        })
    }

    pub fn knots(&self) -> &KnotVector {
        self.translation.knots()
    }

    pub fn supports(&self, t: Timestamp) -> bool {
        self.knots().supports(t)
    }

    pub fn pose(&self, t: Timestamp) -> Result<Pose, SplineError> {
        Ok(Pose::new(
            self.rotation.evaluate(t)?,
            self.translation.evaluate(t, 0)?,
        ))
    }

    /// Append one knot with its translation and rotation control points.
    pub fn push(
        &mut self,
        knot: Timestamp,
        trans_cp: Vector3<f64>,
        rot_cp: Rotation,
    ) -> Result<(), SplineError> {
        self.translation.push(knot, trans_cp)?;
        self.rotation.push(knot, rot_cp)?;
        Ok(())
    }

    pub fn control_point_count(&self) -> usize {
        self.translation.control_points().len()
    }
}
