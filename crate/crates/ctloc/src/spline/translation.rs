//! Cumulative cubic B-spline over R³ with analytic derivatives.

use nalgebra::Vector3;

use super::basis::{cumulative_basis, CumulativeBasis};
use super::knots::KnotVector;
use super::SplineError;
use crate::geom::Timestamp;

/// Translation spline: control points in meters over a non-uniform knot
/// vector. A span `[t_s, t_{s+1})` blends control points `s−3 .. s` as
/// `p(t) = c_{s−3} + Σ_j λ_j(t)·(c_{s−3+j} − c_{s−4+j})`.
#[derive(Debug, Clone)]
pub struct TranslationSpline {
    knots: KnotVector,
    control_points: Vec<Vector3<f64>>,
}

impl TranslationSpline {
    pub fn new(knots: KnotVector, control_points: Vec<Vector3<f64>>) -> Result<Self, SplineError> {
        if control_points.len() != knots.control_point_count() {
            return Err(SplineError::ControlPointCount {
                expected: knots.control_point_count(),
                got: control_points.len(),
            });
        }
        Ok(TranslationSpline {
            knots,
            control_points,
        })
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn control_points(&self) -> &[Vector3<f64>] {
        &self.control_points
    }

    pub fn control_points_mut(&mut self) -> &mut [Vector3<f64>] {
        &mut self.control_points
    }

    pub fn basis_at(&self, t: Timestamp) -> Result<CumulativeBasis, SplineError> {
        let s = self.knots.find_span(t)?;
        cumulative_basis(&self.knots, s, t)
    }

    /// Position (order 0, m), velocity (order 1, m/s) or acceleration
    /// (order 2, m/s²) at `t`.
    pub fn evaluate(&self, t: Timestamp, order: u8) -> Result<Vector3<f64>, SplineError> {
        let basis = self.basis_at(t)?;
        Ok(self.evaluate_with_basis(&basis, order))
    }

    pub fn evaluate_with_basis(&self, basis: &CumulativeBasis, order: u8) -> Vector3<f64> {
        let i = basis.first_control_point();
        let diffs = [
            self.control_points[i + 1] - self.control_points[i],
            self.control_points[i + 2] - self.control_points[i + 1],
            self.control_points[i + 3] - self.control_points[i + 2],
        ];
        match order {
            0 => {
                let l = basis.lambda;
                self.control_points[i] + l[0] * diffs[0] + l[1] * diffs[1] + l[2] * diffs[2]
            }
            1 => {
                let l = basis.lambda_dot();
                l[0] * diffs[0] + l[1] * diffs[1] + l[2] * diffs[2]
            }
            2 => {
                let l = basis.lambda_ddot();
                l[0] * diffs[0] + l[1] * diffs[1] + l[2] * diffs[2]
            }
            _ => panic!("derivative order must be 0, 1 or 2"),
        }
    }

    /// Append a knot and a control point.
    pub fn push(&mut self, knot: Timestamp, control_point: Vector3<f64>) -> Result<(), SplineError> {
        self.knots.push(knot)?;
        self.control_points.push(control_point);
        Ok(())
    }
}
