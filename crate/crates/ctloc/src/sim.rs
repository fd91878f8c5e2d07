//! Deterministic scenario generation: smooth planar ground-truth
//! trajectories and sensor synthesis with configurable noise, including
//! positively-biased range outliers.
//!
//! The ground-truth path is a closed periodic cubic B-spline traversed at
//! a scheduled speed, so positions are C² and every derivative the sensor
//! models need is analytic. All randomness flows from one 64-bit seed
//! through per-channel counters; identical configurations produce
//! byte-identical datasets.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{quantize_time, DatasetRecord};
use crate::ekf::{gravity_vector, ImuNoise, ImuSample, OdomSample};
use crate::geom::{Pose, Rotation, Timestamp};
use crate::preprocess::{AnchorMap, UwbRangeMeasurement};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("infeasible motion profile: {0}")]
    InfeasibleProfile(String),
}

/// Geometric shape of the closed ground-truth loop.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum PathShape {
    Square { side: f64 },
    Rectangular { width: f64, height: f64 },
    /// Rectangle whose long sides carry a sinusoidal weave; the weave is
    /// what exercises fast rotational motion.
    Wave {
        width: f64,
        height: f64,
        wavelength: f64,
        amplitude: f64,
    },
}

impl Default for PathShape {
    fn default() -> Self {
        PathShape::Square { side: 8.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Slow,
    Fast,
    Hybrid,
}

/// Scenario description: path shape, speed bands and duration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionProfile {
    pub kind: MotionKind,
    #[serde(flatten)]
    pub path: PathShape,
    /// Slow-phase speed band, m/s.
    pub slow_band: (f64, f64),
    /// Fast-phase speed band, m/s.
    pub fast_band: (f64, f64),
    /// Ceiling on |yaw rate| the profile may command, rad/s.
    pub max_yaw_rate: f64,
    pub duration: f64,
    pub seed: u64,
    /// Hybrid phase cycle length, seconds (one slow + one fast phase).
    pub hybrid_cycle: f64,
}

impl MotionProfile {
    pub fn new(kind: MotionKind, path: PathShape, duration: f64, seed: u64) -> Self {
        MotionProfile {
            kind,
            path,
            slow_band: (0.13, 0.18),
            fast_band: (0.22, 0.26),
            max_yaw_rate: 1.76,
            duration,
            seed,
            hybrid_cycle: 30.0,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let (lo_s, hi_s) = self.slow_band;
        let (lo_f, hi_f) = self.fast_band;
        if !(0.0 <= lo_s && lo_s <= hi_s && hi_s <= 0.18) {
            return Err(SimError::InfeasibleProfile(format!(
                "slow band {:?} outside [0, 0.18]",
                self.slow_band
            )));
        }
        if !(lo_f <= hi_f && hi_f <= 0.26) {
            return Err(SimError::InfeasibleProfile(format!(
                "fast band {:?} outside [0, 0.26]",
                self.fast_band
            )));
        }
        if self.max_yaw_rate > 1.82 || self.duration <= 0.0 {
            return Err(SimError::InfeasibleProfile(
                "yaw rate or duration out of range".into(),
            ));
        }
        Ok(())
    }
}

/// Closed uniform periodic cubic B-spline in the plane.
#[derive(Debug, Clone)]
struct LoopSpline {
    cps: Vec<Vector2<f64>>,
}

impl LoopSpline {
    fn cp(&self, i: i64) -> Vector2<f64> {
        let n = self.cps.len() as i64;
        self.cps[(i.rem_euclid(n)) as usize]
    }

    /// Position and first/second derivatives with respect to the loop
    /// parameter λ ∈ R (wraps every 1.0).
    fn eval(&self, lambda: f64) -> (Vector2<f64>, Vector2<f64>, Vector2<f64>) {
        let n = self.cps.len() as f64;
        let x = lambda.rem_euclid(1.0) * n;
        let i = x.floor() as i64;
        let u = x - i as f64;
        let c = [self.cp(i - 1), self.cp(i), self.cp(i + 1), self.cp(i + 2)];
        let b0 = (1.0 - u).powi(3) / 6.0;
        let b1 = (3.0 * u.powi(3) - 6.0 * u * u + 4.0) / 6.0;
        let b2 = (-3.0 * u.powi(3) + 3.0 * u * u + 3.0 * u + 1.0) / 6.0;
        let b3 = u.powi(3) / 6.0;
        let p = b0 * c[0] + b1 * c[1] + b2 * c[2] + b3 * c[3];
        let d0 = -(1.0 - u).powi(2) / 2.0;
        let d1 = (3.0 * u * u - 4.0 * u) / 2.0;
        let d2 = (-3.0 * u * u + 2.0 * u + 1.0) / 2.0;
        let d3 = u * u / 2.0;
        let dp = (d0 * c[0] + d1 * c[1] + d2 * c[2] + d3 * c[3]) * n;
        let e0 = 1.0 - u;
        let e1 = 3.0 * u - 2.0;
        let e2 = -3.0 * u + 1.0;
        let e3 = u;
        let ddp = (e0 * c[0] + e1 * c[1] + e2 * c[2] + e3 * c[3]) * n * n;
        (p, dp, ddp)
    }

    fn lap_length(&self) -> f64 {
        let steps = 4000;
        let mut len = 0.0;
        let mut prev = self.eval(0.0).0;
        for i in 1..=steps {
            let p = self.eval(i as f64 / steps as f64).0;
            len += (p - prev).norm();
            prev = p;
        }
        len
    }
}

fn loop_control_points(shape: &PathShape) -> Vec<Vector2<f64>> {
    match shape {
        PathShape::Square { side } => rectangle_loop(*side, *side, None),
        PathShape::Rectangular { width, height } => rectangle_loop(*width, *height, None),
        PathShape::Wave {
            width,
            height,
            wavelength,
            amplitude,
        } => rectangle_loop(*width, *height, Some((*wavelength, *amplitude))),
    }
}

/// Rectangle loop control points, optionally weaving the whole
/// perimeter laterally.
fn rectangle_loop(width: f64, height: f64, weave: Option<(f64, f64)>) -> Vec<Vector2<f64>> {
    let corners = [
        Vector2::new(0.0, 0.0),
        Vector2::new(width, 0.0),
        Vector2::new(width, height),
        Vector2::new(0.0, height),
    ];
    let spacing = match weave {
        Some((wavelength, _)) => (wavelength / 6.0).min(0.5),
        None => 0.75,
    };
    let mut pts = Vec::new();
    let mut arc = 0.0;
    for k in 0..4 {
        let a = corners[k];
        let b = corners[(k + 1) % 4];
        let edge = b - a;
        let len = edge.norm();
        let dir = edge / len;
        let normal = Vector2::new(-dir.y, dir.x);
        let n = ((len / spacing).ceil() as usize).max(2);
        for i in 0..n {
            let s = len * i as f64 / n as f64;
            let lateral = match weave {
                Some((wl, amp)) => {
                    amp * (2.0 * std::f64::consts::PI * (arc + s) / wl).sin()
                }
                None => 0.0,
            };
            pts.push(a + dir * s + normal * lateral);
        }
        arc += len;
    }
    pts
}

/// Smooth speed schedule with analytic derivative.
#[derive(Debug, Clone)]
struct SpeedSchedule {
    kind: MotionKind,
    slow_band: (f64, f64),
    fast_band: (f64, f64),
    cycle: f64,
    phase: f64,
}

impl SpeedSchedule {
    fn band_speed(band: (f64, f64), period: f64, phase: f64, t: f64) -> (f64, f64) {
        let mid = 0.5 * (band.0 + band.1);
        let amp = 0.45 * (band.1 - band.0);
        let w = 2.0 * std::f64::consts::PI / period;
        (
            mid + amp * (w * t + phase).sin(),
            amp * w * (w * t + phase).cos(),
        )
    }

    /// Speed and its time derivative.
    fn speed(&self, t: f64) -> (f64, f64) {
        let (s_slow, ds_slow) = Self::band_speed(self.slow_band, 40.0, self.phase, t);
        let (s_fast, ds_fast) = Self::band_speed(self.fast_band, 7.0, 1.7 * self.phase, t);
        match self.kind {
            MotionKind::Slow => (s_slow, ds_slow),
            MotionKind::Fast => (s_fast, ds_fast),
            MotionKind::Hybrid => {
                // sin² blend dwells near both bands, giving a bimodal
                // speed distribution
                let w = std::f64::consts::PI / self.cycle;
                let sigma = (w * t).sin().powi(2);
                let dsigma = 2.0 * w * (w * t).sin() * (w * t).cos();
                (
                    (1.0 - sigma) * s_slow + sigma * s_fast,
                    (1.0 - sigma) * ds_slow + sigma * ds_fast + dsigma * (s_fast - s_slow),
                )
            }
        }
    }

    /// Instantaneous blend weight of the fast band (0 = slow phase).
    fn fast_weight(&self, t: f64) -> f64 {
        match self.kind {
            MotionKind::Slow => 0.0,
            MotionKind::Fast => 1.0,
            MotionKind::Hybrid => ((std::f64::consts::PI / self.cycle) * t).sin().powi(2),
        }
    }
}

/// One dense ground-truth state.
#[derive(Debug, Clone, Copy)]
pub struct TruthState {
    pub t: Timestamp,
    pub position: Vector3<f64>,
    pub yaw: f64,
    /// World-frame velocity.
    pub velocity: Vector3<f64>,
    /// World-frame acceleration.
    pub acceleration: Vector3<f64>,
    /// Yaw rate, rad/s.
    pub yaw_rate: f64,
    pub speed: f64,
}

impl TruthState {
    pub fn pose(&self) -> Pose {
        Pose::new(Rotation::from_yaw(self.yaw), self.position)
    }
}

/// Continuous ground truth: queryable at any time inside the duration.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    path: LoopSpline,
    schedule: SpeedSchedule,
    /// Loop parameter at 1 kHz grid times (monotone, unwrapped).
    lambda_grid: Vec<f64>,
    grid_dt: f64,
    pub duration: f64,
}

/// Generate the ground-truth trajectory for a motion profile.
///
/// The trajectory is C², planar, deterministic in the profile seed, and
/// covers `profile.duration` seconds starting at t = 0.
pub fn generate_ground_truth(profile: &MotionProfile) -> Result<GroundTruth, SimError> {
    profile.validate()?;
    let path = LoopSpline {
        cps: loop_control_points(&profile.path),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed ^ 0x7472_7574_6800);
    let schedule = SpeedSchedule {
        kind: profile.kind,
        slow_band: profile.slow_band,
        fast_band: profile.fast_band,
        cycle: profile.hybrid_cycle,
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    };
    // integrate dλ/dt = s(t)/‖P'(λ)‖ at 1 kHz with RK4
    let grid_dt = 1e-3;
    let steps = (profile.duration / grid_dt).ceil() as usize;
    let mut lambda_grid = Vec::with_capacity(steps + 1);
    let mut lambda = 0.0_f64;
    lambda_grid.push(lambda);
    let f = |t: f64, l: f64| {
        let (_, dp, _) = path.eval(l);
        schedule.speed(t).0 / dp.norm()
    };
    for i in 0..steps {
        let t = i as f64 * grid_dt;
        let k1 = f(t, lambda);
        let k2 = f(t + 0.5 * grid_dt, lambda + 0.5 * grid_dt * k1);
        let k3 = f(t + 0.5 * grid_dt, lambda + 0.5 * grid_dt * k2);
        let k4 = f(t + grid_dt, lambda + grid_dt * k3);
        lambda += grid_dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        lambda_grid.push(lambda);
    }
    Ok(GroundTruth {
        path,
        schedule,
        lambda_grid,
        grid_dt,
        duration: profile.duration,
    })
}

impl GroundTruth {
    fn lambda_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.duration);
        let i = ((t / self.grid_dt).floor() as usize).min(self.lambda_grid.len() - 2);
        let (t0, t1) = (i as f64 * self.grid_dt, (i + 1) as f64 * self.grid_dt);
        let (l0, l1) = (self.lambda_grid[i], self.lambda_grid[i + 1]);
        // cubic Hermite using dλ/dt at the endpoints
        let d = |tt: f64, ll: f64| {
            let (_, dp, _) = self.path.eval(ll);
            self.schedule.speed(tt).0 / dp.norm()
        };
        let (m0, m1) = (d(t0, l0), d(t1, l1));
        let h = t1 - t0;
        let u = (t - t0) / h;
        let (u2, u3) = (u * u, u * u * u);
        l0 * (2.0 * u3 - 3.0 * u2 + 1.0)
            + m0 * h * (u3 - 2.0 * u2 + u)
            + l1 * (-2.0 * u3 + 3.0 * u2)
            + m1 * h * (u3 - u2)
    }

    /// Ground-truth state at an arbitrary time in `[0, duration]`.
    pub fn state_at(&self, t: f64) -> TruthState {
        let lambda = self.lambda_at(t);
        let (p, dp, ddp) = self.path.eval(lambda);
        let (s, sdot) = self.schedule.speed(t);
        let g = dp.norm();
        let ldot = s / g;
        // d‖P'‖/dλ = (P'·P'')/‖P'‖
        let gprime = dp.dot(&ddp) / g;
        let lddot = sdot / g - s * gprime * ldot / (g * g);
        let vel = dp * ldot;
        let acc = ddp * (ldot * ldot) + dp * lddot;
        let yaw = dp.y.atan2(dp.x);
        // ψ = atan2(y', x') ⇒ дψ/dλ = (x'y'' − y'x'')/‖P'‖²
        let yaw_rate = (dp.x * ddp.y - dp.y * ddp.x) / (g * g) * ldot;
        TruthState {
            t: Timestamp::new(t),
            position: Vector3::new(p.x, p.y, 0.0),
            yaw,
            velocity: Vector3::new(vel.x, vel.y, 0.0),
            acceleration: Vector3::new(acc.x, acc.y, 0.0),
            yaw_rate,
            speed: s,
        }
    }

    /// Dense 1 kHz pose/twist samples.
    pub fn samples(&self) -> Vec<TruthState> {
        let n = (self.duration / self.grid_dt).floor() as usize;
        (0..=n)
            .map(|i| self.state_at(i as f64 * self.grid_dt))
            .collect()
    }

    pub fn lap_length(&self) -> f64 {
        self.path.lap_length()
    }

    /// Blend weight of the fast band at `t` (hybrid profiles).
    pub fn fast_weight(&self, t: f64) -> f64 {
        self.schedule.fast_weight(t)
    }
}

/// Sensor noise configuration in the units the numbers are usually quoted
/// in; accessors convert to SI.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorNoiseConfig {
    /// Range error mean, m.
    pub uwb_bias: f64,
    /// Range error standard deviation, m.
    pub uwb_std: f64,
    /// Odometer scale factor error (0.005 = 0.5%).
    pub odom_scale_error: f64,
    /// White noise on the odometer speed, m/s.
    pub odom_speed_std: f64,
    /// White noise on the odometer yaw rate, rad/s.
    pub odom_gyro_std: f64,
    /// Velocity random walk, m/s/√h.
    pub velocity_random_walk: f64,
    /// Accelerometer bias, milli-g.
    pub accel_bias_mg: f64,
    /// Angular random walk, deg/√h.
    pub angular_random_walk: f64,
    /// Gyro bias, deg/h.
    pub gyro_bias_deg_h: f64,
    /// Fraction of ranges replaced by NLOS-style outliers.
    pub outlier_rate: f64,
    /// Outlier magnitude bounds, m (positive bias: NLOS lengthens ranges).
    pub outlier_min: f64,
    pub outlier_max: f64,
}

impl Default for SensorNoiseConfig {
    fn default() -> Self {
        SensorNoiseConfig {
            uwb_bias: -0.0552,
            uwb_std: 0.0514,
            odom_scale_error: 0.005,
            odom_speed_std: 0.003,
            odom_gyro_std: 0.004,
            velocity_random_walk: 0.035,
            accel_bias_mg: 0.2,
            angular_random_walk: 1.03,
            gyro_bias_deg_h: 8.23,
            outlier_rate: 0.02,
            outlier_min: 0.5,
            outlier_max: 3.0,
        }
    }
}

impl SensorNoiseConfig {
    pub fn zero() -> Self {
        SensorNoiseConfig {
            uwb_bias: 0.0,
            uwb_std: 0.0,
            odom_scale_error: 0.0,
            odom_speed_std: 0.0,
            odom_gyro_std: 0.0,
            velocity_random_walk: 0.0,
            accel_bias_mg: 0.0,
            angular_random_walk: 0.0,
            gyro_bias_deg_h: 0.0,
            outlier_rate: 0.0,
            outlier_min: 0.5,
            outlier_max: 3.0,
        }
    }

    /// Gyro white-noise density, rad/s/√Hz.
    pub fn gyro_density(&self) -> f64 {
        self.angular_random_walk.to_radians() / 60.0
    }

    /// Accelerometer white-noise density, m/s²/√Hz.
    pub fn accel_density(&self) -> f64 {
        self.velocity_random_walk / 60.0
    }

    /// Gyro bias magnitude, rad/s.
    pub fn gyro_bias(&self) -> f64 {
        self.gyro_bias_deg_h.to_radians() / 3600.0
    }

    /// Accelerometer bias magnitude, m/s².
    pub fn accel_bias(&self) -> f64 {
        self.accel_bias_mg * 1e-3 * crate::ekf::GRAVITY
    }

    /// The equivalent filter-side IMU model. Floored so the filter keeps
    /// a healthy process noise even when the data is synthesized clean.
    pub fn imu_noise(&self) -> ImuNoise {
        ImuNoise {
            gyro_density: self.gyro_density().max(2e-5),
            accel_density: self.accel_density().max(2e-4),
            gyro_bias_walk: 1e-6,
            accel_bias_walk: 1e-5,
        }
    }
}

/// Anchor visibility windows. An anchor that appears in no window is
/// always visible; otherwise it is visible only inside its windows.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VisibilitySchedule {
    pub windows: Vec<(String, f64, f64)>,
}

impl VisibilitySchedule {
    pub fn full() -> Self {
        VisibilitySchedule::default()
    }

    pub fn visible(&self, anchor: &str, t: f64) -> bool {
        let mut mentioned = false;
        for (id, lo, hi) in &self.windows {
            if id == anchor {
                mentioned = true;
                if t >= *lo && t < *hi {
                    return true;
                }
            }
        }
        !mentioned
    }

    /// Alternate visibility between anchors so at most `concurrent` are
    /// reachable at any time, switching every `period` seconds.
    pub fn alternating(anchors: &[String], concurrent: usize, period: f64, duration: f64) -> Self {
        let mut windows = Vec::new();
        if anchors.is_empty() {
            return VisibilitySchedule { windows };
        }
        let mut t = 0.0;
        let mut idx = 0usize;
        while t < duration {
            for k in 0..concurrent.min(anchors.len()) {
                let a = &anchors[(idx + k) % anchors.len()];
                windows.push((a.clone(), t, t + period));
            }
            idx = (idx + 1) % anchors.len();
            t += period;
        }
        VisibilitySchedule { windows }
    }
}

/// Scene: surveyed anchors, measurement rates and visibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub anchors: AnchorMap,
    pub uwb_hz: f64,
    pub odom_hz: f64,
    pub imu_hz: f64,
    #[serde(default)]
    pub visibility: VisibilitySchedule,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let mut anchors = AnchorMap::new();
        anchors.insert("a0".into(), Vector3::new(-1.0, -1.0, 1.8));
        anchors.insert("a1".into(), Vector3::new(9.0, -1.0, 1.8));
        anchors.insert("a2".into(), Vector3::new(9.0, 9.0, 1.8));
        anchors.insert("a3".into(), Vector3::new(-1.0, 9.0, 1.8));
        SceneConfig {
            anchors,
            uwb_hz: 32.0,
            odom_hz: 28.0,
            imu_hz: 127.0,
            visibility: VisibilitySchedule::full(),
        }
    }
}

/// Synthesize the sensor record stream for a ground-truth trajectory.
///
/// The IMU reports body-frame specific force (including gravity), bias and
/// white noise; the odometer reports scaled wheel twists; each anchor
/// reports biased Gaussian ranges with Bernoulli outliers. Deterministic
/// in `seed`.
pub fn synthesize_sensors(
    truth: &GroundTruth,
    scene: &SceneConfig,
    noise: &SensorNoiseConfig,
    seed: u64,
) -> Vec<DatasetRecord> {
    let mut records = Vec::new();
    for (id, pos) in &scene.anchors {
        records.push(DatasetRecord::Anchor {
            id: id.clone(),
            position: *pos,
        });
    }
    let s0 = truth.state_at(0.0);
    records.push(DatasetRecord::Init {
        t: Timestamp::new(0.0),
        position: s0.position,
        yaw: s0.yaw,
    });

    let mut imu_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x696d_7500);
    let mut odom_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f64_6f00);
    let mut uwb_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7577_6200);
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    // constant biases drawn once per run
    let gyro_bias = random_direction(&mut imu_rng) * noise.gyro_bias();
    let accel_bias = random_direction(&mut imu_rng) * noise.accel_bias();

    // IMU
    let imu_dt = 1.0 / scene.imu_hz;
    let n_imu = (truth.duration * scene.imu_hz).floor() as usize;
    let gyro_sigma = noise.gyro_density() * scene.imu_hz.sqrt();
    let accel_sigma = noise.accel_density() * scene.imu_hz.sqrt();
    for k in 0..=n_imu {
        let t = quantize_time(k as f64 * imu_dt);
        let s = truth.state_at(t);
        let r = s.pose().rotation;
        let accel_body = r.apply_inverse(&(s.acceleration + gravity_vector()));
        let gyro = Vector3::new(0.0, 0.0, s.yaw_rate)
            + gyro_bias
            + gaussian3(&mut imu_rng, &std_normal) * gyro_sigma;
        let accel = accel_body + accel_bias + gaussian3(&mut imu_rng, &std_normal) * accel_sigma;
        records.push(DatasetRecord::Imu(ImuSample {
            t: Timestamp::new(t),
            gyro,
            accel,
        }));
    }

    // odometer
    let odom_dt = 1.0 / scene.odom_hz;
    let n_odom = (truth.duration * scene.odom_hz).floor() as usize;
    let scale = 1.0 + noise.odom_scale_error;
    for k in 0..=n_odom {
        let t = quantize_time(k as f64 * odom_dt);
        let s = truth.state_at(t);
        let v = scale * s.speed + noise.odom_speed_std * std_normal.sample(&mut odom_rng);
        let w = scale * s.yaw_rate + noise.odom_gyro_std * std_normal.sample(&mut odom_rng);
        records.push(DatasetRecord::Odom(OdomSample {
            t: Timestamp::new(t),
            linear_velocity: v,
            angular_velocity: w,
        }));
    }

    // UWB, anchors staggered inside the ranging period
    let uwb_dt = 1.0 / scene.uwb_hz;
    let n_uwb = (truth.duration * scene.uwb_hz).floor() as usize;
    let anchor_ids: Vec<&String> = scene.anchors.keys().collect();
    for k in 0..=n_uwb {
        for (a_idx, id) in anchor_ids.iter().enumerate() {
            let t = quantize_time(
                k as f64 * uwb_dt + a_idx as f64 * uwb_dt / anchor_ids.len() as f64,
            );
            if t > truth.duration {
                continue;
            }
            let s = truth.state_at(t);
            let anchor = scene.anchors[*id];
            let true_range = (s.position - anchor).norm();
            let mut range =
                true_range + noise.uwb_bias + noise.uwb_std * std_normal.sample(&mut uwb_rng);
            if noise.outlier_rate > 0.0 && uwb_rng.gen::<f64>() < noise.outlier_rate {
                range += uwb_rng.gen_range(noise.outlier_min..noise.outlier_max);
            }
            records.push(DatasetRecord::Uwb(UwbRangeMeasurement {
                t: Timestamp::new(t),
                anchor_id: (*id).clone(),
                range: range.max(0.01),
                sigma: noise.uwb_std.max(1e-4),
            }));
        }
    }

    records.sort_by(|a, b| {
        let ta = a.t().map(|t| t.seconds()).unwrap_or(f64::NEG_INFINITY);
        let tb = b.t().map(|t| t.seconds()).unwrap_or(f64::NEG_INFINITY);
        ta.partial_cmp(&tb).unwrap().then_with(|| rank(a).cmp(&rank(b)))
    });
    records
}

fn rank(r: &DatasetRecord) -> u8 {
    match r {
        DatasetRecord::Anchor { .. } => 0,
        DatasetRecord::Init { .. } => 1,
        DatasetRecord::Imu(_) => 2,
        DatasetRecord::Odom(_) => 3,
        DatasetRecord::Uwb(_) => 4,
    }
}

fn gaussian3(rng: &mut ChaCha8Rng, n: &Normal<f64>) -> Vector3<f64> {
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Drop UWB records from anchors that are invisible at their timestamp.
pub fn inject_visibility(
    records: Vec<DatasetRecord>,
    schedule: &VisibilitySchedule,
) -> Vec<DatasetRecord> {
    records
        .into_iter()
        .filter(|r| match r {
            DatasetRecord::Uwb(m) => schedule.visible(&m.anchor_id, m.t.seconds()),
            _ => true,
        })
        .collect()
}

/// Ground-truth export record for the evaluation tools.
pub fn truth_records(truth: &GroundTruth, hz: f64) -> Vec<TruthState> {
    let n = (truth.duration * hz).floor() as usize;
    (0..=n)
        .map(|k| truth.state_at(quantize_time(k as f64 / hz)))
        .collect()
}
