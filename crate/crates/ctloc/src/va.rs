//! Virtual anchor generation.
//!
//! A range measured at time `t_w` constrains the position at a reference
//! epoch `t` through the relative displacement between the two times:
//! shifting the physical anchor by the negated displacement produces a
//! virtual anchor whose distance from the reference position equals the
//! measured range. Three well-spread, non-collinear virtual anchors turn a
//! single physical anchor into a full trilateration fix.
//!
//! Candidate quality is gated by the determinant of the Fisher
//! information accumulated over the gathered waypoints, and collinear
//! triples are repaired by sweeping position hypotheses on the range
//! circle.

use std::collections::VecDeque;

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekf::MotionPrior;
use crate::geom::{Rotation, Timestamp};

#[derive(Debug, Error)]
pub enum VaError {
    #[error("waypoint coincides with the candidate position")]
    CoincidentWaypoint,
    #[error("hypothesis refinement needs a non-empty range set")]
    EmptyRangeSet,
}

/// A derived ranging reference point, frozen after creation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VirtualAnchor {
    pub position: Vector3<f64>,
    pub source_anchor: String,
    pub fim_det: f64,
    pub created_at: Timestamp,
    pub waypoint_count: usize,
    /// Range constraining the reference epoch, meters.
    pub range: f64,
    pub sigma: f64,
    /// When the creating range was gathered.
    pub range_time: Timestamp,
    /// Whether the collinearity sweep moved this anchor off the derived
    /// position.
    pub refined: bool,
}

/// One gathered waypoint: the platform position when a range arrived.
#[derive(Debug, Clone, Copy)]
pub struct WaypointRange {
    pub t: Timestamp,
    pub waypoint: Vector3<f64>,
    /// World displacement from the set's reference position to the
    /// waypoint.
    pub displacement_from_ref: Vector3<f64>,
    pub range: f64,
    pub sigma: f64,
}

/// Waypoints and ranges gathered toward one reference epoch.
#[derive(Debug, Clone)]
pub struct WaypointRangeSet {
    pub reference_time: Timestamp,
    pub reference_position: Vector3<f64>,
    pub source_anchor: Vector3<f64>,
    pub entries: Vec<WaypointRange>,
}

/// Signed range residual `r − ‖x − p‖`.
pub fn range_residual(x: &Vector3<f64>, p: &Vector3<f64>, r: f64) -> f64 {
    r - (x - p).norm()
}

/// Planar Fisher information of a candidate position over the waypoint
/// set: rows of `J` are unit bearings from the candidate to each waypoint,
/// weighted by the per-range noise. Returns the 2×2 matrix and its
/// determinant.
pub fn accumulate_fim(
    ws: &WaypointRangeSet,
    candidate: &Vector3<f64>,
) -> Result<(Matrix2<f64>, f64), VaError> {
    let mut f = Matrix2::zeros();
    for e in &ws.entries {
        let d = Vector2::new(e.waypoint.x - candidate.x, e.waypoint.y - candidate.y);
        let n = d.norm();
        if n < 1e-9 {
            return Err(VaError::CoincidentWaypoint);
        }
        let u = d / n;
        f += (u * u.transpose()) / (e.sigma * e.sigma);
    }
    let det = f.determinant();
    Ok((f, det))
}

/// Virtual anchor position from the source anchor and the relative motion
/// between the reference epoch and the range time:
/// `p̂ = p_n − R·Δd`.
pub fn derive_va_position(
    anchor: &Vector3<f64>,
    rotation: &Rotation,
    displacement: &Vector3<f64>,
) -> Vector3<f64> {
    anchor - rotation.apply(displacement)
}

/// Collinearity determinant of three planar points; zero iff collinear.
/// Twice the signed triangle area.
pub fn collinearity_determinant(p1: &Vector2<f64>, p2: &Vector2<f64>, p3: &Vector2<f64>) -> f64 {
    p1.x * (p2.y - p3.y) - p1.y * (p2.x - p3.x) + (p2.x * p3.y - p3.x * p2.y)
}

/// Candidate positions on the circle of `radius` around `center`, at
/// angles `2π(k−1)/h`, keeping the candidate height `z`.
pub fn hypothesis_circle(center: &Vector3<f64>, radius: f64, z: f64, h: usize) -> Vec<Vector3<f64>> {
    (0..h)
        .map(|k| {
            let ang = 2.0 * std::f64::consts::PI * k as f64 / h as f64;
            Vector3::new(
                center.x + radius * ang.cos(),
                center.y + radius * ang.sin(),
                z,
            )
        })
        .collect()
}

/// Absolute-residual sum of a candidate against the waypoint set, with
/// the waypoints shifted by the base candidate's creation displacement so
/// that the true geometry scores zero on noise-free data.
fn hypothesis_cost(ws: &WaypointRangeSet, shift: &Vector3<f64>, candidate: &Vector3<f64>) -> f64 {
    ws.entries
        .iter()
        .map(|e| (e.range - (e.waypoint - shift - candidate).norm()).abs())
        .sum()
}

/// Sweep `h` position hypotheses on the range circle through `base` and
/// return the one with the smallest absolute-residual sum. Ties keep the
/// smallest hypothesis index.
pub fn refine_hypotheses(
    base: &Vector3<f64>,
    ws: &WaypointRangeSet,
    h: usize,
) -> Result<Vector3<f64>, VaError> {
    refine_hypotheses_filtered(base, ws, h, |_| true)
}

/// [`refine_hypotheses`] restricted to candidates passing `keep`.
pub fn refine_hypotheses_filtered(
    base: &Vector3<f64>,
    ws: &WaypointRangeSet,
    h: usize,
    keep: impl Fn(&Vector3<f64>) -> bool,
) -> Result<Vector3<f64>, VaError> {
    assert!(h >= 3, "need at least three hypotheses");
    if ws.entries.is_empty() {
        return Err(VaError::EmptyRangeSet);
    }
    let center = ws.reference_position;
    let radius = Vector2::new(base.x - center.x, base.y - center.y).norm();
    let shift = ws.source_anchor - base;
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for b in hypothesis_circle(&center, radius, base.z, h) {
        if !keep(&b) {
            continue;
        }
        let cost = hypothesis_cost(ws, &shift, &b);
        // strict less-than keeps the smallest index on ties
        if best.map_or(true, |(c, _)| cost < c) {
            best = Some((cost, b));
        }
    }
    best.map(|(_, b)| b).ok_or(VaError::EmptyRangeSet)
}

/// Configuration of the virtual-anchor generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VaConfig {
    /// Fisher-determinant gate: candidates spawn only above this.
    pub tau_f: f64,
    /// Hypotheses on the refinement circle.
    pub hypothesis_count: usize,
    /// Collinearity threshold on |D|, m².
    pub collinearity_eps: f64,
    /// Sliding cap on gathered waypoints.
    pub max_waypoints: usize,
    /// Entries older than this are dropped, s.
    pub max_waypoint_age: f64,
    /// Minimum time between retained waypoints, s.
    pub waypoint_spacing: f64,
    /// Minimum gathered waypoints before candidates are considered.
    pub min_waypoints: usize,
    /// Extra range sigma per second of prior age, m/s.
    pub drift_sigma_rate: f64,
}

impl Default for VaConfig {
    fn default() -> Self {
        VaConfig {
            tau_f: 25.0,
            hypothesis_count: 36,
            collinearity_eps: 0.05,
            max_waypoints: 50,
            max_waypoint_age: 8.0,
            waypoint_spacing: 0.25,
            min_waypoints: 6,
            drift_sigma_rate: 0.01,
        }
    }
}

/// Per-anchor virtual-anchor generator: gathers accepted ranges and, on
/// request, emits three non-collinear virtual anchors targeting a
/// reference epoch.
#[derive(Debug, Clone)]
pub struct VaGenerator {
    pub anchor_id: String,
    pub anchor_position: Vector3<f64>,
    config: VaConfig,
    entries: VecDeque<(Timestamp, f64, f64)>,
}

impl VaGenerator {
    pub fn new(anchor_id: String, anchor_position: Vector3<f64>, config: VaConfig) -> Self {
        VaGenerator {
            anchor_id,
            anchor_position,
            config,
            entries: VecDeque::new(),
        }
    }

    /// Record an accepted range. Entries closer than the configured
    /// spacing to the previous one are dropped; the buffer slides by
    /// count and by age.
    pub fn add_range(&mut self, t: Timestamp, range: f64, sigma: f64) {
        if let Some(&(last, _, _)) = self.entries.back() {
            if t.since(last) < self.config.waypoint_spacing {
                return;
            }
        }
        if self.entries.len() == self.config.max_waypoints {
            self.entries.pop_front();
        }
        self.entries.push_back((t, range, sigma));
        self.evict_older_than(t);
    }

    fn evict_older_than(&mut self, now: Timestamp) {
        while self
            .entries
            .front()
            .is_some_and(|&(t, _, _)| now.since(t) > self.config.max_waypoint_age)
        {
            self.entries.pop_front();
        }
    }

    pub fn waypoint_count(&self) -> usize {
        self.entries.len()
    }

    /// Materialize the waypoint set against the current motion prior.
    fn waypoint_set(&self, prior: &MotionPrior, t_ref: Timestamp) -> Option<WaypointRangeSet> {
        let reference = prior.sample(t_ref).ok()?;
        let mut entries = Vec::with_capacity(self.entries.len());
        for &(t, range, sigma) in &self.entries {
            let Ok(s) = prior.sample(t) else { continue };
            entries.push(WaypointRange {
                t,
                waypoint: s.position,
                displacement_from_ref: s.position - reference.position,
                range,
                sigma: sigma + self.config.drift_sigma_rate * t_ref.since(t).abs(),
            });
        }
        Some(WaypointRangeSet {
            reference_time: t_ref,
            reference_position: reference.position,
            source_anchor: self.anchor_position,
            entries,
        })
    }

    /// Emit three non-collinear virtual anchors constraining `t_ref`, or
    /// `None` while the gathered geometry is still insufficient.
    pub fn generate(&self, prior: &MotionPrior, t_ref: Timestamp) -> Option<Vec<VirtualAnchor>> {
        if self.entries.len() < self.config.min_waypoints {
            return None;
        }
        let ws = self.waypoint_set(prior, t_ref)?;
        if ws.entries.len() < self.config.min_waypoints {
            return None;
        }
        // newest entry plus two spread across the gathered window
        let n = ws.entries.len();
        let picks = [n - 1, n / 2, 0];
        let mut vas: Vec<VirtualAnchor> = Vec::with_capacity(3);
        for &w in &picks {
            let e = &ws.entries[w];
            let position = self.anchor_position - e.displacement_from_ref;
            let (_, det) = accumulate_fim(&ws, &position).ok()?;
            if det <= self.config.tau_f {
                return None;
            }
            vas.push(VirtualAnchor {
                position,
                source_anchor: self.anchor_id.clone(),
                fim_det: det,
                created_at: t_ref,
                waypoint_count: ws.entries.len(),
                range: e.range,
                sigma: e.sigma,
                range_time: e.t,
                refined: false,
            });
        }
        let xy = |v: &Vector3<f64>| Vector2::new(v.x, v.y);
        let d = collinearity_determinant(
            &xy(&vas[0].position),
            &xy(&vas[1].position),
            &xy(&vas[2].position),
        );
        if d.abs() <= self.config.collinearity_eps {
            let (a, b) = (vas[0].position, vas[1].position);
            let eps = self.config.collinearity_eps;
            let refined = refine_hypotheses_filtered(
                &vas[2].position,
                &ws,
                self.config.hypothesis_count,
                |cand| collinearity_determinant(&xy(&a), &xy(&b), &xy(cand)).abs() > eps,
            )
            .ok()?;
            let (_, det) = accumulate_fim(&ws, &refined).ok()?;
            if det <= self.config.tau_f {
                return None;
            }
            vas[2].position = refined;
            vas[2].fim_det = det;
            vas[2].refined = true;
            // the swept bearing is synthetic; trust it less
            vas[2].sigma *= 2.0;
        }
        Some(vas)
    }
}
