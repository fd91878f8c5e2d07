//! Error-state EKF fusing IMU propagation with integrated wheel-odometer
//! observations.
//!
//! The filter carries attitude, position, velocity and IMU biases with a
//! 15×15 covariance. Each odometer observation is screened by an
//! innovation chi-square statistic averaged over an adaptive window `M`:
//! small normalized innovations widen the window up to `ξ`, large ones
//! shrink it to 1 so a fresh fault is not diluted by healthy history.
//! Rejected observations leave the state untouched.
//!
//! A ring buffer of propagated states provides short-term motion priors
//! (interpolated poses, velocities, and relative transforms) to the
//! ranging gate, the virtual-anchor generator, and the knot allocator.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SMatrix, SVector, Vector2, Vector3};
use thiserror::Error;

use crate::geom::{exp_map, log_map, right_jacobian_inv, Pose, Rotation, Timestamp};

/// Gravity magnitude, m/s². The accelerometer of a resting body reads
/// `Rᵀ·(0,0,g)`.
pub const GRAVITY: f64 = 9.81;

pub fn gravity_vector() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, GRAVITY)
}

type Cov = SMatrix<f64, 15, 15>;

#[derive(Debug, Error)]
pub enum EkfError {
    #[error("IMU gap fault: dt = {0:.4} s outside (0, 0.1]")]
    GapFault(f64),
    #[error("odometer window is empty")]
    EmptyOdomWindow,
    #[error("query time {0:.6} outside filter history")]
    OutsideHistory(f64),
}

/// IMU stochastic model in SI units.
#[derive(Debug, Clone, Copy)]
pub struct ImuNoise {
    /// Gyro white noise density, rad/s/√Hz.
    pub gyro_density: f64,
    /// Accelerometer white noise density, m/s²/√Hz.
    pub accel_density: f64,
    /// Gyro bias random walk, rad/s²/√Hz.
    pub gyro_bias_walk: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub accel_bias_walk: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        // 1.03 deg/√h angular random walk, 0.035 m/s/√h velocity random walk
        ImuNoise {
            gyro_density: 1.03_f64.to_radians() / 60.0,
            accel_density: 0.035 / 60.0,
            gyro_bias_walk: 1e-6,
            accel_bias_walk: 1e-5,
        }
    }
}

/// One IMU sample: body angular rate and specific force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: Timestamp,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// One odometer sample: body-frame forward speed and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdomSample {
    pub t: Timestamp,
    pub linear_velocity: f64,
    pub angular_velocity: f64,
}

/// Filter mean and covariance.
///
/// `rotation` is the body-to-world attitude; the error state is
/// `[δθ, δp, δv, δb_g, δb_a]` with a right-multiplied body-frame attitude
/// error.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub t: Timestamp,
    pub rotation: Rotation,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub covariance: Cov,
}

impl FilterState {
    pub fn new(t: Timestamp, pose: Pose) -> Self {
        let mut covariance = Cov::zeros();
        for i in 0..3 {
            covariance[(i, i)] = (0.5_f64.to_radians()).powi(2);
            covariance[(3 + i, 3 + i)] = 0.01;
            covariance[(6 + i, 6 + i)] = 0.01;
            covariance[(9 + i, 9 + i)] = (1e-3_f64).powi(2);
            covariance[(12 + i, 12 + i)] = (1e-2_f64).powi(2);
        }
        FilterState {
            t,
            rotation: pose.rotation,
            position: pose.translation,
            velocity: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            covariance,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }

    /// Strapdown propagation by one IMU sample over `dt` seconds.
    pub fn predict(&self, imu: &ImuSample, dt: f64, noise: &ImuNoise) -> Result<Self, EkfError> {
        if !(dt > 0.0 && dt <= 0.1) {
            return Err(EkfError::GapFault(dt));
        }
        let omega = imu.gyro - self.gyro_bias;
        let accel = imu.accel - self.accel_bias;
        let r = self.rotation;
        let r_mid = r.compose(&exp_map(&(omega * (0.5 * dt))));
        let a_world = r_mid.apply(&accel) - gravity_vector();

        let mut next = self.clone();
        next.t = self.t.offset(dt);
        next.position = self.position + self.velocity * dt + 0.5 * a_world * dt * dt;
        next.velocity = self.velocity + a_world * dt;
        next.rotation = r.compose(&exp_map(&(omega * dt)));

        // First-order error-state transition.
        let rm = r.matrix();
        let ahat = crate::geom::hat(&accel);
        let mut f = Cov::identity();
        f.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&exp_map(&(omega * dt)).matrix().transpose());
        f.fixed_view_mut::<3, 3>(0, 9)
            .copy_from(&(-Matrix3::identity() * dt));
        f.fixed_view_mut::<3, 3>(3, 6)
            .copy_from(&(Matrix3::identity() * dt));
        f.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-0.5 * rm * ahat * dt * dt));
        f.fixed_view_mut::<3, 3>(3, 12)
            .copy_from(&(-0.5 * rm * dt * dt));
        f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-rm * ahat * dt));
        f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-rm * dt));

        let mut q = Cov::zeros();
        for i in 0..3 {
            q[(i, i)] = noise.gyro_density.powi(2) * dt;
            q[(6 + i, 6 + i)] = noise.accel_density.powi(2) * dt;
            q[(3 + i, 3 + i)] = noise.accel_density.powi(2) * dt * dt * dt / 3.0;
            q[(9 + i, 9 + i)] = noise.gyro_bias_walk.powi(2) * dt;
            q[(12 + i, 12 + i)] = noise.accel_bias_walk.powi(2) * dt;
        }
        next.covariance = f * self.covariance * f.transpose() + q;
        symmetrize(&mut next.covariance);
        Ok(next)
    }

    /// Clamp the covariance to the PSD cone (eigenvalues below −1e-9 are an
    /// error elsewhere; small negatives are zeroed here).
    pub fn clamp_covariance(&mut self) {
        symmetrize(&mut self.covariance);
        let eig = nalgebra::SymmetricEigen::new(self.covariance);
        let mut vals = eig.eigenvalues;
        let mut changed = false;
        for v in vals.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
                changed = true;
            }
        }
        if changed {
            let v = &eig.eigenvectors;
            self.covariance = v * nalgebra::Matrix::from_diagonal(&vals) * v.transpose();
            symmetrize(&mut self.covariance);
        }
    }

    pub fn min_covariance_eigenvalue(&self) -> f64 {
        nalgebra::SymmetricEigen::new(self.covariance)
            .eigenvalues
            .min()
    }
}

fn symmetrize(m: &mut Cov) {
    *m = 0.5 * (*m + m.transpose());
}

/// Integrated odometer observation over one update interval: yaw and
/// planar displacement in the conventions of the integration model
/// (the yaw integral carries a leading minus sign).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdomObservation {
    pub yaw: f64,
    pub displacement: Vector2<f64>,
    pub start: Timestamp,
    pub end: Timestamp,
    pub sample_count: usize,
}

/// Trapezoidal integration of the odometer stream:
/// `θ = −∫ω dt`, `d = [∫v·cosθ dt, −∫v·sinθ dt]`.
///
/// The minus signs are a frame convention of the observation model; with a
/// standard counter-clockwise yaw rate the displacement comes out in the
/// start-of-interval body frame and the yaw negated. The IMU-derived
/// counterpart ([`imu_derived_observation`]) applies the same convention.
pub fn form_odom_observation(samples: &[OdomSample]) -> Result<OdomObservation, EkfError> {
    if samples.is_empty() {
        return Err(EkfError::EmptyOdomWindow);
    }
    let mut theta = 0.0_f64;
    let mut d = Vector2::zeros();
    for w in samples.windows(2) {
        let h = w[1].t.since(w[0].t);
        let theta0 = theta;
        theta -= 0.5 * (w[0].angular_velocity + w[1].angular_velocity) * h;
        let f0 = Vector2::new(
            w[0].linear_velocity * theta0.cos(),
            -w[0].linear_velocity * theta0.sin(),
        );
        let f1 = Vector2::new(
            w[1].linear_velocity * theta.cos(),
            -w[1].linear_velocity * theta.sin(),
        );
        d += 0.5 * (f0 + f1) * h;
    }
    Ok(OdomObservation {
        yaw: theta,
        displacement: d,
        start: samples[0].t,
        end: samples[samples.len() - 1].t,
        sample_count: samples.len(),
    })
}

/// The same relative-motion observable predicted from the filter: relative
/// yaw (negated, matching the odometer convention) and planar displacement
/// in the anchor body frame.
pub fn imu_derived_observation(
    anchor: &Pose,
    state: &FilterState,
    start: Timestamp,
) -> OdomObservation {
    let rel = log_map(&anchor.rotation.between(&state.rotation));
    let d_body = anchor
        .rotation
        .apply_inverse(&(state.position - anchor.translation));
    OdomObservation {
        yaw: -rel.z,
        displacement: Vector2::new(d_body.x, d_body.y),
        start,
        end: state.t,
        sample_count: 0,
    }
}

/// Innovation-statistics parameters.
#[derive(Debug, Clone, Copy)]
pub struct InnovationParams {
    /// Exponent scale of the adaptive window law.
    pub alpha: f64,
    /// Convergence rate of the adaptive window law, in (0, 1).
    pub mu: f64,
    /// Maximum window size.
    pub xi: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Rejection threshold on the windowed statistic.
    pub thr: f64,
}

impl Default for InnovationParams {
    fn default() -> Self {
        InnovationParams {
            alpha: 3.17e-3,
            mu: 0.5,
            xi: 50,
            lambda_min: 0.56,
            lambda_max: 6.52,
            thr: 10.85,
        }
    }
}

/// Adaptive window size from the normalized innovation.
pub fn adapt_window(e_k: f64, p: &InnovationParams) -> usize {
    let m = if e_k >= p.lambda_max {
        1.0
    } else if e_k <= p.lambda_min {
        p.xi as f64
    } else {
        p.xi as f64 * p.mu.powf((e_k - p.lambda_min) / p.alpha)
    };
    (m.round() as i64).clamp(1, p.xi as i64) as usize
}

/// Rolling innovation statistics.
#[derive(Debug, Clone)]
pub struct InnovationStats {
    /// Normalized innovations of past accepted updates, newest last.
    history: VecDeque<f64>,
    /// Current adaptive window size.
    pub window: usize,
    /// Latest normalized innovation e(k).
    pub e_k: f64,
    /// Latest windowed statistic E(k).
    pub e_stat: f64,
    params: InnovationParams,
}

impl InnovationStats {
    pub fn new(params: InnovationParams) -> Self {
        InnovationStats {
            history: VecDeque::with_capacity(params.xi),
            window: 1,
            e_k: 0.0,
            e_stat: 0.0,
            params,
        }
    }

    pub fn params(&self) -> &InnovationParams {
        &self.params
    }

    /// Ingest e(k): adapt the window and compute the windowed mean over the
    /// last `M` innovations (including the current one).
    fn observe(&mut self, e_k: f64) -> f64 {
        self.e_k = e_k;
        self.window = adapt_window(e_k, &self.params);
        let take = (self.window - 1).min(self.history.len());
        let sum: f64 = self.history.iter().rev().take(take).sum::<f64>() + e_k;
        self.e_stat = sum / (take + 1) as f64;
        self.e_stat
    }

    fn record_accepted(&mut self, e_k: f64) {
        if self.history.len() == self.params.xi {
            self.history.pop_front();
        }
        self.history.push_back(e_k);
    }
}

/// Measurement noise configuration for one odometer update.
#[derive(Debug, Clone, Copy)]
pub struct OdomUpdateNoise {
    pub sigma_yaw: f64,
    pub sigma_displacement: f64,
}

impl Default for OdomUpdateNoise {
    fn default() -> Self {
        OdomUpdateNoise {
            sigma_yaw: 0.3_f64.to_radians(),
            sigma_displacement: 0.004,
        }
    }
}

/// Outcome of an odometer update attempt.
#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub state: FilterState,
    pub accepted: bool,
    pub e_k: f64,
    pub e_stat: f64,
    pub window: usize,
}

/// Chi-square-gated EKF update against the odometer observation.
///
/// `anchor` is the filter pose at the start of the observation interval.
/// When the windowed statistic exceeds the threshold the update is
/// rejected and the returned state is the input state, bit for bit.
pub fn update(
    state: &FilterState,
    anchor: &Pose,
    obs: &OdomObservation,
    predicted: &OdomObservation,
    stats: &mut InnovationStats,
    noise: &OdomUpdateNoise,
) -> UpdateOutcome {
    let innovation = SVector::<f64, 3>::new(
        obs.yaw - predicted.yaw,
        obs.displacement.x - predicted.displacement.x,
        obs.displacement.y - predicted.displacement.y,
    );

    // Measurement Jacobian: the innovation model is Z = H·δ + η with δ
    // the error of the estimate, so H is the derivative of the observable
    // with respect to a right-perturbation of the state.
    let psi_rel = log_map(&anchor.rotation.between(&state.rotation));
    let jr_inv = right_jacobian_inv(&psi_rel);
    let ra_t = anchor.rotation.matrix().transpose();
    let mut h = SMatrix::<f64, 3, 15>::zeros();
    // yaw row: h_yaw = −e₃ᵀ·Log(R_aᵀ·R·Exp(δθ)) ⇒ ∂h/∂δθ = −e₃ᵀ·Jr⁻¹.
    for c in 0..3 {
        h[(0, c)] = -jr_inv[(2, c)];
    }
    // displacement rows: h_d = (R_aᵀ(p + δp − p_a))_xy ⇒ ∂h/∂δp = (R_aᵀ)_xy.
    for r in 0..2 {
        for c in 0..3 {
            h[(1 + r, 3 + c)] = ra_t[(r, c)];
        }
    }

    let r_obs = nalgebra::Matrix3::from_diagonal(&Vector3::new(
        noise.sigma_yaw * noise.sigma_yaw,
        noise.sigma_displacement * noise.sigma_displacement,
        noise.sigma_displacement * noise.sigma_displacement,
    ));
    let mut s = h * state.covariance * h.transpose() + r_obs;
    let s_inv = match s.try_inverse() {
        Some(inv) => inv,
        None => {
            log::warn!("singular innovation covariance; regularizing");
            s += Matrix3::identity() * 1e-9;
            s.try_inverse().expect("regularized covariance invertible")
        }
    };

    let e_k = (innovation.transpose() * s_inv * innovation)[0];
    let e_stat = stats.observe(e_k);
    if e_stat > stats.params.thr {
        return UpdateOutcome {
            state: state.clone(),
            accepted: false,
            e_k,
            e_stat,
            window: stats.window,
        };
    }
    stats.record_accepted(e_k);

    let gain = state.covariance * h.transpose() * s_inv;
    let dx = gain * innovation;
    let mut next = state.clone();
    apply_correction(&mut next, &dx);
    let ikh = Cov::identity() - gain * h;
    next.covariance = ikh * state.covariance * ikh.transpose() + gain * r_obs * gain.transpose();
    next.clamp_covariance();
    UpdateOutcome {
        state: next,
        accepted: true,
        e_k,
        e_stat,
        window: stats.window,
    }
}

fn apply_correction(state: &mut FilterState, dx: &SVector<f64, 15>) {
    let dtheta = Vector3::new(dx[0], dx[1], dx[2]);
    state.rotation = state.rotation.compose(&exp_map(&dtheta));
    state.position += Vector3::new(dx[3], dx[4], dx[5]);
    state.velocity += Vector3::new(dx[6], dx[7], dx[8]);
    state.gyro_bias += Vector3::new(dx[9], dx[10], dx[11]);
    state.accel_bias += Vector3::new(dx[12], dx[13], dx[14]);
}

/// Soft planar constraint: height, roll and pitch observed as zero.
///
/// Bridges the 2D odometer observation model with the 3D IMU mechanics for
/// a ground robot.
pub fn planar_update(state: &FilterState, sigma_z: f64, sigma_tilt: f64) -> FilterState {
    let m = state.rotation.matrix();
    let roll = m[(2, 1)].atan2(m[(2, 2)]);
    let pitch = (-m[(2, 0)]).asin();
    let z = SVector::<f64, 3>::new(-state.position.z, -roll, -pitch);

    let mut h = SMatrix::<f64, 3, 15>::zeros();
    h[(0, 5)] = 1.0; // z component of position
    h[(1, 0)] = 1.0; // roll ≈ body δθ_x for small tilt
    h[(2, 1)] = 1.0;
    let r_obs = Matrix3::from_diagonal(&Vector3::new(
        sigma_z * sigma_z,
        sigma_tilt * sigma_tilt,
        sigma_tilt * sigma_tilt,
    ));
    let s = h * state.covariance * h.transpose() + r_obs;
    let Some(s_inv) = s.try_inverse() else {
        return state.clone();
    };
    let gain = state.covariance * h.transpose() * s_inv;
    let dx = gain * z;
    let mut next = state.clone();
    apply_correction(&mut next, &dx);
    let ikh = Cov::identity() - gain * h;
    next.covariance = ikh * state.covariance * ikh.transpose() + gain * r_obs * gain.transpose();
    next.clamp_covariance();
    next
}

/// Interpolated short-term motion between two history states.
#[derive(Debug, Clone, Copy)]
pub struct RelativeMotion {
    /// Relative rotation from the frame at `t_i` to the frame at `t_j`.
    pub rotation: Rotation,
    /// Displacement expressed in the frame at `t_i`.
    pub displacement: Vector3<f64>,
}

/// One stored filter snapshot.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot {
    pub t: Timestamp,
    pub rotation: Rotation,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

/// Ring buffer of filter snapshots answering interpolated queries.
#[derive(Debug, Clone)]
pub struct MotionPrior {
    history: VecDeque<Snapshot>,
    capacity: usize,
}

impl MotionPrior {
    pub fn new(capacity: usize) -> Self {
        MotionPrior {
            history: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, snap: Snapshot) {
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(snap);
    }

    pub fn span(&self) -> Option<(Timestamp, Timestamp)> {
        Some((self.history.front()?.t, self.history.back()?.t))
    }

    /// Interpolated snapshot at `t` (linear in position and velocity,
    /// spherical-linear in rotation).
    pub fn sample(&self, t: Timestamp) -> Result<Snapshot, EkfError> {
        let (lo, hi) = self.span().ok_or(EkfError::OutsideHistory(t.seconds()))?;
        if t.seconds() < lo.seconds() || t.seconds() > hi.seconds() {
            return Err(EkfError::OutsideHistory(t.seconds()));
        }
        let idx = self
            .history
            .partition_point(|s| s.t.seconds() <= t.seconds());
        if idx == 0 {
            return Ok(*self.history.front().unwrap());
        }
        let a = self.history[idx - 1];
        if idx == self.history.len() {
            return Ok(a);
        }
        let b = self.history[idx];
        let dt = b.t.since(a.t);
        if dt <= 0.0 {
            return Ok(a);
        }
        let w = t.since(a.t) / dt;
        Ok(Snapshot {
            t,
            rotation: a.rotation.slerp(&b.rotation, w),
            position: a.position.lerp(&b.position, w),
            velocity: a.velocity.lerp(&b.velocity, w),
        })
    }

    /// Largest speed recorded between `a` and `b` (inclusive), used as the
    /// motion bound of the ranging gate.
    pub fn max_speed_between(&self, a: Timestamp, b: Timestamp) -> f64 {
        self.history
            .iter()
            .filter(|s| s.t.seconds() >= a.seconds() && s.t.seconds() <= b.seconds())
            .map(|s| s.velocity.norm())
            .fold(0.0, f64::max)
    }

    /// Relative transform between the interpolated states at `t_i` and
    /// `t_j`: identity rotation and zero displacement when `t_i == t_j`.
    pub fn relative_motion(&self, t_i: Timestamp, t_j: Timestamp) -> Result<RelativeMotion, EkfError> {
        let a = self.sample(t_i)?;
        let b = self.sample(t_j)?;
        Ok(RelativeMotion {
            rotation: a.rotation.between(&b.rotation),
            displacement: a.rotation.apply_inverse(&(b.position - a.position)),
        })
    }

    /// Rigidly re-express the whole history and future pushes in a new
    /// frame: `p ← R_c·(p − pivot) + pivot + Δp`, `R ← R_c·R`. Relative
    /// transforms between any pair of stored states are unchanged.
    pub fn re_anchor(&mut self, correction_rotation: &Rotation, pivot: &Vector3<f64>, dp: &Vector3<f64>) {
        for s in self.history.iter_mut() {
            s.position = correction_rotation.apply(&(s.position - pivot)) + pivot + dp;
            s.rotation = correction_rotation.compose(&s.rotation);
            s.velocity = correction_rotation.apply(&s.velocity);
        }
    }
}
