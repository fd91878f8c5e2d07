//! Comparison baselines: odometer dead reckoning and a discrete-time EKF
//! that fuses IMU, odometer and raw UWB ranges without virtual anchors or
//! continuous-time smoothing.

use nalgebra::{SMatrix, SVector, Vector3};

use crate::dataset::Dataset;
use crate::ekf::{
    imu_derived_observation, planar_update, update, FilterState, ImuNoise, InnovationParams,
    InnovationStats, OdomSample, OdomUpdateNoise,
};
use crate::geom::{Pose, Rotation, Timestamp};
use crate::metrics::TimedPosition;
use crate::preprocess::{merge_streams, SensorEvent};

/// Integrate the odometer stream alone from the initial pose.
pub fn dead_reckoning(
    odom: &[OdomSample],
    start: &Pose,
) -> Vec<TimedPosition> {
    let mut yaw = crate::geom::log_map(&start.rotation).z;
    let mut p = start.translation;
    let mut out = vec![TimedPosition {
        t: odom.first().map(|s| s.t).unwrap_or(Timestamp::new(0.0)),
        position: p,
    }];
    for w in odom.windows(2) {
        let dt = w[1].t.since(w[0].t);
        if dt <= 0.0 {
            continue;
        }
        let yaw0 = yaw;
        yaw += 0.5 * (w[0].angular_velocity + w[1].angular_velocity) * dt;
        let v0 = w[0].linear_velocity;
        let v1 = w[1].linear_velocity;
        p += 0.5
            * Vector3::new(
                v0 * yaw0.cos() + v1 * yaw.cos(),
                v0 * yaw0.sin() + v1 * yaw.sin(),
                0.0,
            )
            * dt;
        out.push(TimedPosition {
            t: w[1].t,
            position: p,
        });
    }
    out
}

/// Discrete EKF baseline: strapdown prediction, odometer updates, and a
/// per-range EKF update with a 3σ consistency gate.
pub struct DiscreteEkf {
    pub state: FilterState,
    stats: InnovationStats,
    anchor: Pose,
    odom_buf: Vec<OdomSample>,
    noise: ImuNoise,
    odom_noise: OdomUpdateNoise,
    range_sigma_floor: f64,
}

impl DiscreteEkf {
    pub fn new(t0: Timestamp, start: Pose, noise: ImuNoise) -> Self {
        DiscreteEkf {
            state: FilterState::new(t0, start),
            stats: InnovationStats::new(InnovationParams {
                thr: f64::INFINITY,
                ..Default::default()
            }),
            anchor: start,
            odom_buf: Vec::new(),
            noise,
            odom_noise: OdomUpdateNoise::default(),
            range_sigma_floor: 0.05,
        }
    }

    fn predict_to(&mut self, imu: &crate::ekf::ImuSample) {
        let mut dt = imu.t.since(self.state.t);
        while dt > 1e-9 {
            let step = dt.min(0.05);
            if let Ok(next) = self.state.predict(imu, step, &self.noise) {
                self.state = next;
            }
            dt -= step;
        }
    }

    fn range_update(&mut self, anchor: &Vector3<f64>, range: f64, sigma: f64) {
        let diff = self.state.position - anchor;
        let dist = diff.norm().max(1e-6);
        let innovation = range - dist;
        let u = diff / dist;
        let mut h = SMatrix::<f64, 1, 15>::zeros();
        for k in 0..3 {
            h[(0, 3 + k)] = u[k];
        }
        let sigma = sigma.max(self.range_sigma_floor);
        let s = (h * self.state.covariance * h.transpose())[(0, 0)] + sigma * sigma;
        // 3σ consistency gate
        if innovation * innovation > 9.0 * s {
            return;
        }
        let gain = self.state.covariance * h.transpose() / s;
        let dx: SVector<f64, 15> = gain * innovation;
        let mut next = self.state.clone();
        next.rotation = next
            .rotation
            .compose(&crate::geom::exp_map(&Vector3::new(dx[0], dx[1], dx[2])));
        next.position += Vector3::new(dx[3], dx[4], dx[5]);
        next.velocity += Vector3::new(dx[6], dx[7], dx[8]);
        next.gyro_bias += Vector3::new(dx[9], dx[10], dx[11]);
        next.accel_bias += Vector3::new(dx[12], dx[13], dx[14]);
        let ikh = SMatrix::<f64, 15, 15>::identity() - gain * h;
        next.covariance = ikh * self.state.covariance * ikh.transpose()
            + gain * (sigma * sigma) * gain.transpose();
        next.clamp_covariance();
        self.state = next;
    }
}

/// Run the discrete EKF baseline over a dataset, producing positions at
/// the odometer update rate. `range_bias` is the calibrated
/// line-of-sight range error subtracted from each measurement.
pub fn discrete_ekf_baseline(dataset: &Dataset, range_bias: f64) -> Vec<TimedPosition> {
    let Some((t0, p0, yaw0)) = dataset.initial else {
        return Vec::new();
    };
    let start = Pose::new(Rotation::from_yaw(yaw0), p0);
    let mut ekf = DiscreteEkf::new(t0, start, ImuNoise::default());
    let events = merge_streams(
        dataset.uwb.clone(),
        dataset.imu.clone(),
        dataset.odom.clone(),
    )
    .unwrap_or_default();
    let mut out = Vec::new();
    for e in events {
        match e {
            SensorEvent::Imu(s) => ekf.predict_to(&s),
            SensorEvent::Odom(s) => {
                ekf.odom_buf.push(s);
                if ekf.odom_buf.len() >= 2 {
                    let obs = crate::ekf::form_odom_observation(&ekf.odom_buf).unwrap();
                    let predicted =
                        imu_derived_observation(&ekf.anchor, &ekf.state, obs.start);
                    let outcome = update(
                        &ekf.state,
                        &ekf.anchor,
                        &obs,
                        &predicted,
                        &mut ekf.stats,
                        &ekf.odom_noise,
                    );
                    ekf.state = outcome.state;
                    ekf.state = planar_update(&ekf.state, 0.01, 0.5_f64.to_radians());
                    ekf.anchor = ekf.state.pose();
                    ekf.odom_buf = vec![s];
                    out.push(TimedPosition {
                        t: ekf.state.t,
                        position: ekf.state.position,
                    });
                }
            }
            SensorEvent::Uwb(m) => {
                if let Some(anchor) = dataset.anchors.get(&m.anchor_id) {
                    ekf.range_update(anchor, m.range - range_bias, m.sigma);
                }
            }
        }
    }
    out
}
