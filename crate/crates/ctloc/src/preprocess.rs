//! Sensor ingestion: time-ordered merging of the three asynchronous
//! streams and the UWB ranging outlier gate.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use thiserror::Error;

use crate::ekf::{ImuSample, OdomSample};
use crate::geom::Timestamp;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("{stream} stream is non-monotone at index {index}")]
    NonMonotoneStream { stream: &'static str, index: usize },
}

/// One UWB range: tag-to-anchor distance in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct UwbRangeMeasurement {
    pub t: Timestamp,
    pub anchor_id: String,
    pub range: f64,
    /// Per-measurement standard deviation, meters.
    pub sigma: f64,
}

/// Anchor identifier → surveyed position (z fixed at mounting height).
pub type AnchorMap = BTreeMap<String, Vector3<f64>>;

/// A merged sensor event. Ties at identical timestamps order IMU before
/// odometer before UWB.
#[derive(Debug, Clone, PartialEq)]
pub enum SensorEvent {
    Imu(ImuSample),
    Odom(OdomSample),
    Uwb(UwbRangeMeasurement),
}

impl SensorEvent {
    pub fn t(&self) -> Timestamp {
        match self {
            SensorEvent::Imu(s) => s.t,
            SensorEvent::Odom(s) => s.t,
            SensorEvent::Uwb(s) => s.t,
        }
    }

    fn tie_rank(&self) -> u8 {
        match self {
            SensorEvent::Imu(_) => 0,
            SensorEvent::Odom(_) => 1,
            SensorEvent::Uwb(_) => 2,
        }
    }
}

fn check_monotone<T>(
    stream: &'static str,
    items: &[T],
    t_of: impl Fn(&T) -> Timestamp,
) -> Result<(), PreprocessError> {
    for (i, w) in items.windows(2).enumerate() {
        if t_of(&w[1]).seconds() < t_of(&w[0]).seconds() {
            return Err(PreprocessError::NonMonotoneStream {
                stream,
                index: i + 1,
            });
        }
    }
    Ok(())
}

/// Merge the per-sensor streams into one globally non-decreasing event
/// stream. The output is a permutation of the union of the inputs.
pub fn merge_streams(
    uwb: Vec<UwbRangeMeasurement>,
    imu: Vec<ImuSample>,
    odom: Vec<OdomSample>,
) -> Result<Vec<SensorEvent>, PreprocessError> {
    check_monotone("uwb", &uwb, |m| m.t)?;
    check_monotone("imu", &imu, |m| m.t)?;
    check_monotone("odom", &odom, |m| m.t)?;
    let mut events: Vec<SensorEvent> = Vec::with_capacity(uwb.len() + imu.len() + odom.len());
    events.extend(imu.into_iter().map(SensorEvent::Imu));
    events.extend(odom.into_iter().map(SensorEvent::Odom));
    events.extend(uwb.into_iter().map(SensorEvent::Uwb));
    events.sort_by(|a, b| {
        a.t()
            .seconds()
            .partial_cmp(&b.t().seconds())
            .unwrap()
            .then(a.tie_rank().cmp(&b.tie_rank()))
    });
    Ok(events)
}

/// Outcome of the ranging gate, kept for logging: rejected measurements
/// are never silently dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub accepted: bool,
    /// |predicted distance − measured range|, meters.
    pub mismatch: f64,
    /// Gate half-width γ·v̂·Δt, meters.
    pub gate: f64,
}

/// Inequality gate on one range: accept iff
/// `|‖x̂ − p_n‖ − r| < γ·v̂·(t − t_prev)` holds strictly.
///
/// With a stationary prior the gate width is zero and every mismatching
/// range is rejected; callers that need a non-degenerate gate at rest
/// floor the speed before calling.
pub fn reject_range_outlier(
    m: &UwbRangeMeasurement,
    prior_position: &Vector3<f64>,
    prior_speed: f64,
    t_prev: Timestamp,
    anchor: &Vector3<f64>,
    gamma: f64,
) -> GateDecision {
    let predicted = (prior_position - anchor).norm();
    let mismatch = (predicted - m.range).abs();
    let gate = gamma * prior_speed * m.t.since(t_prev);
    GateDecision {
        accepted: mismatch < gate,
        mismatch,
        gate,
    }
}
