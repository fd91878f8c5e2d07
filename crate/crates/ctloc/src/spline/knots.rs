//! Knot bookkeeping and the adaptive knot-span allocation strategy.
//!
//! Key-pose windows are assigned 1–4 control points from the variance of
//! translational and rotational speed inside the window; each window is
//! then split into that many equal knot spans.

use crate::geom::Timestamp;
use serde::{Deserialize, Serialize};

use super::SplineError;

/// Ordered knot times of a cubic spline.
///
/// A spline with `K` knots carries `K − 4` control points; the evaluable
/// domain is `[t_3, t_{K−4}]`.
#[derive(Debug, Clone)]
pub struct KnotVector {
    knots: Vec<f64>,
}

impl KnotVector {
    pub fn new(knots: Vec<Timestamp>) -> Result<Self, SplineError> {
        let raw: Vec<f64> = knots.iter().map(|t| t.seconds()).collect();
        Self::validate(&raw)?;
        Ok(KnotVector { knots: raw })
    }

    fn validate(raw: &[f64]) -> Result<(), SplineError> {
        for (i, w) in raw.windows(2).enumerate() {
            if !w[1].is_finite() || w[1] < w[0] {
                return Err(SplineError::NonMonotoneKnots { index: i + 1 });
            }
        }
        Ok(())
    }

    pub fn raw(&self) -> &[f64] {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// Number of control points a spline over these knots carries.
    pub fn control_point_count(&self) -> usize {
        self.knots.len().saturating_sub(4)
    }

    /// First time with full order-4 support.
    pub fn support_start(&self) -> f64 {
        self.knots.get(3).copied().unwrap_or(f64::NAN)
    }

    /// Last supported time (inclusive).
    pub fn support_end(&self) -> f64 {
        let n = self.control_point_count();
        if n < 4 {
            f64::NAN
        } else {
            self.knots[n]
        }
    }

    /// Whether `t` lies in the evaluable domain.
    pub fn supports(&self, t: Timestamp) -> bool {
        let n = self.control_point_count();
        n >= 4 && t.seconds() >= self.support_start() && t.seconds() <= self.support_end()
    }

    /// Knot span index `s` with `t_s ≤ t < t_{s+1}` (the final knot maps to
    /// the last span).
    pub fn find_span(&self, t: Timestamp) -> Result<usize, SplineError> {
        let n = self.control_point_count();
        if n < 4 || !self.supports(t) {
            return Err(SplineError::OutOfSupport {
                t: t.seconds(),
                lo: self.support_start(),
                hi: self.support_end(),
            });
        }
        let ts = t.seconds();
        let hi = n; // last evaluable span is [t_{n−1}, t_n]
        let mut s = self.knots[3..hi].partition_point(|&k| k <= ts) + 2;
        s = s.min(hi - 1);
        Ok(s)
    }

    /// Append a knot; must keep the vector non-decreasing.
    pub fn push(&mut self, t: Timestamp) -> Result<(), SplineError> {
        if let Some(&last) = self.knots.last() {
            if t.seconds() < last {
                return Err(SplineError::NonMonotoneKnots {
                    index: self.knots.len(),
                });
            }
        }
        self.knots.push(t.seconds());
        Ok(())
    }
}

/// Speed-variance summary of one key-pose window `(T_{i−1}, T_i]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionVariation {
    /// Population variance of translational speed, (m/s)².
    pub delta_v: f64,
    /// Population variance of rotational speed, (rad/s)².
    pub delta_omega: f64,
    pub window: (Timestamp, Timestamp),
    pub sample_count: usize,
}

/// Variance thresholds mapping motion variation to a control-point count.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct KnotBinConfig {
    /// Translational-speed-variance bin edges, ascending.
    pub velocity: [f64; 4],
    /// Rotational-speed-variance bin edges, ascending.
    pub rotation: [f64; 4],
}

impl Default for KnotBinConfig {
    fn default() -> Self {
        KnotBinConfig {
            velocity: [0.06, 0.12, 0.20, 0.26],
            rotation: [0.20, 0.50, 0.13, 1.82],
        }
        .normalized()
    }
}

impl KnotBinConfig {
    /// Sort each edge set ascending; the bin table needs disjoint ascending
    /// intervals. Logs when the configured order had to change.
    pub fn normalized(mut self) -> Self {
        for edges in [&mut self.velocity, &mut self.rotation] {
            let mut sorted = *edges;
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if sorted != *edges {
                log::warn!(
                    "knot bin edges {:?} are not ascending; sorted to {:?}",
                    edges,
                    sorted
                );
                *edges = sorted;
            }
        }
        self
    }
}

fn bin_index(x: f64, edges: &[f64; 4]) -> usize {
    // [0,e1)→1, [e1,e2)→2, [e2,e3)→3, [e3,∞)→4
    match edges.iter().position(|&e| x < e) {
        Some(i) => (i + 1).max(1),
        None => 4,
    }
}

/// Number of control points for a key-pose window.
///
/// Each variance picks a bin independently; the larger count wins, and
/// anything at or beyond the last edge clamps to 4.
pub fn assign_ncp(variation: &MotionVariation, bins: &KnotBinConfig) -> usize {
    let nv = bin_index(variation.delta_v, &bins.velocity);
    let nw = bin_index(variation.delta_omega, &bins.rotation);
    nv.max(nw).min(4)
}

/// Split `(start, end]` into `n_cp` equal knot spans, returning the new
/// knot times (excluding `start`, ending exactly at `end`).
pub fn split_knot_span(
    start: Timestamp,
    end: Timestamp,
    n_cp: usize,
) -> Result<Vec<Timestamp>, SplineError> {
    if end.seconds() <= start.seconds() {
        return Err(SplineError::EmptyWindow {
            start: start.seconds(),
            end: end.seconds(),
        });
    }
    assert!((1..=4).contains(&n_cp), "n_cp must be in 1..=4");
    let (a, b) = (start.seconds(), end.seconds());
    Ok((1..=n_cp)
        .map(|k| Timestamp::new(a + (b - a) * (k as f64 / n_cp as f64)))
        .collect())
}

/// Population variance of speeds and angular speeds over the samples that
/// fall inside `(start, end]`.
pub fn compute_motion_variation(
    samples: &[(Timestamp, f64, f64)],
    start: Timestamp,
    end: Timestamp,
) -> Result<MotionVariation, SplineError> {
    let mut speeds = Vec::new();
    let mut rates = Vec::new();
    for &(t, v, w) in samples {
        if t.seconds() > start.seconds() && t.seconds() <= end.seconds() {
            speeds.push(v);
            rates.push(w);
        }
    }
    if speeds.is_empty() {
        return Err(SplineError::EmptyWindow {
            start: start.seconds(),
            end: end.seconds(),
        });
    }
    Ok(MotionVariation {
        delta_v: population_variance(&speeds),
        delta_omega: population_variance(&rates),
        window: (start, end),
        sample_count: speeds.len(),
    })
}

fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn variation(dv: f64, dw: f64) -> MotionVariation {
        MotionVariation {
            delta_v: dv,
            delta_omega: dw,
            window: (Timestamp::new(0.0), Timestamp::new(1.0)),
            sample_count: 10,
        }
    }

    #[test]
    fn ncp_below_first_velocity_edge() {
        let bins = KnotBinConfig::default();
        assert_eq!(assign_ncp(&variation(0.05, 0.0), &bins), 1);
    }

    #[test]
    fn ncp_third_velocity_bin() {
        let bins = KnotBinConfig::default();
        assert_eq!(assign_ncp(&variation(0.15, 0.0), &bins), 3);
    }

    #[test]
    fn ncp_stationary() {
        let bins = KnotBinConfig::default();
        assert_eq!(assign_ncp(&variation(0.0, 0.0), &bins), 1);
    }

    #[test]
    fn ncp_clamps_to_four() {
        let bins = KnotBinConfig::default();
        assert_eq!(assign_ncp(&variation(0.9, 0.0), &bins), 4);
        assert_eq!(assign_ncp(&variation(0.0, 5.0), &bins), 4);
    }

    #[test]
    fn ncp_takes_larger_of_the_two_bins() {
        let bins = KnotBinConfig::default();
        // rotation edges sort to [0.13, 0.20, 0.50, 1.82]
        assert_eq!(assign_ncp(&variation(0.0, 0.6), &bins), 4);
        assert_eq!(assign_ncp(&variation(0.07, 0.15), &bins), 2);
    }

    #[test]
    fn ncp_monotone_in_delta_v() {
        let bins = KnotBinConfig::default();
        let mut prev = 0;
        for i in 0..300 {
            let dv = i as f64 * 0.001;
            let n = assign_ncp(&variation(dv, 0.0), &bins);
            assert!(n >= prev);
            prev = n;
        }
    }

    #[test]
    fn rotation_bins_are_sorted_on_load() {
        let bins = KnotBinConfig::default();
        assert_eq!(bins.rotation, [0.13, 0.20, 0.50, 1.82]);
    }

    #[test]
    fn split_into_four_quarter_spans() {
        let ks = split_knot_span(Timestamp::new(0.0), Timestamp::new(1.0), 4).unwrap();
        assert_eq!(ks.len(), 4);
        for (i, k) in ks.iter().enumerate() {
            assert!((k.seconds() - 0.25 * (i + 1) as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn split_single_span() {
        let ks = split_knot_span(Timestamp::new(2.0), Timestamp::new(3.0), 1).unwrap();
        assert_eq!(ks.len(), 1);
        assert_eq!(ks[0].seconds(), 3.0);
    }

    #[test]
    fn split_sums_exactly() {
        let ks = split_knot_span(Timestamp::new(0.0), Timestamp::new(0.35), 3).unwrap();
        let mut prev = 0.0;
        let mut total = 0.0;
        for k in &ks {
            total += k.seconds() - prev;
            prev = k.seconds();
        }
        assert!((total - 0.35).abs() < 1e-12);
        assert_eq!(ks.last().unwrap().seconds(), 0.35);
    }

    #[test]
    fn split_rejects_empty_window() {
        assert!(split_knot_span(Timestamp::new(1.0), Timestamp::new(1.0), 2).is_err());
    }

    #[test]
    fn constant_speed_has_zero_variance() {
        let samples: Vec<_> = (1..=10)
            .map(|i| (Timestamp::new(i as f64 * 0.1), 0.5, 0.2))
            .collect();
        let v =
            compute_motion_variation(&samples, Timestamp::new(0.0), Timestamp::new(1.0)).unwrap();
        assert!(v.delta_v.abs() < 1e-30);
        assert!(v.delta_omega.abs() < 1e-30);
        assert_eq!(v.sample_count, 10);
    }

    #[test]
    fn two_point_variance() {
        let samples = vec![
            (Timestamp::new(0.2), 0.0, 0.0),
            (Timestamp::new(0.8), 2.0, 0.0),
        ];
        let v =
            compute_motion_variation(&samples, Timestamp::new(0.0), Timestamp::new(1.0)).unwrap();
        assert_eq!(v.delta_v, 1.0);
    }

    #[test]
    fn variance_matches_two_pass_oracle() {
        let mut rng = StdRng::seed_from_u64(42);
        let samples: Vec<_> = (0..200)
            .map(|i| {
                (
                    Timestamp::new(0.005 * (i + 1) as f64),
                    rng.gen_range(0.0..0.3),
                    rng.gen_range(0.0..1.8),
                )
            })
            .collect();
        let v =
            compute_motion_variation(&samples, Timestamp::new(0.0), Timestamp::new(1.0)).unwrap();
        // brute-force two-pass variance
        let speeds: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
        let brute = speeds.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / speeds.len() as f64;
        assert!((v.delta_v - brute).abs() < 1e-12);
    }

    #[test]
    fn empty_window_is_error() {
        let samples = vec![(Timestamp::new(5.0), 1.0, 1.0)];
        assert!(
            compute_motion_variation(&samples, Timestamp::new(0.0), Timestamp::new(1.0)).is_err()
        );
    }

    #[test]
    fn find_span_brackets_time() {
        let knots =
            KnotVector::new((0..10).map(|i| Timestamp::new(i as f64 * 0.5)).collect()).unwrap();
        // 10 knots → 6 control points, domain [t3, t6] = [1.5, 3.0]
        assert_eq!(knots.find_span(Timestamp::new(1.5)).unwrap(), 3);
        assert_eq!(knots.find_span(Timestamp::new(2.49)).unwrap(), 4);
        assert_eq!(knots.find_span(Timestamp::new(3.0)).unwrap(), 5);
        assert!(knots.find_span(Timestamp::new(3.01)).is_err());
        assert!(knots.find_span(Timestamp::new(1.49)).is_err());
    }
}
