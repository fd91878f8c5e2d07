//! Adaptive sliding-window nonlinear least squares over the spline
//! control points.
//!
//! The window holds range, pre-integrated IMU, pre-integrated odometer
//! and prior residual blocks. Control points behind the window boundary
//! are frozen: the solver never writes them, but residual blocks keep
//! reading their values so the trajectory stays continuous across the
//! boundary. Sliding the window marginalizes the blocks that touch the
//! dropped control points into a dense linearized prior over the first
//! few surviving ones.

pub mod factors;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{exp_map, log_map, right_jacobian_inv, Rotation, Timestamp};
use crate::spline::{SplineError, Trajectory};
use factors::{
    imu_residual, odom_residual, EndpointLinearization, ImuPreintegration, OdomPreintegration,
};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("window has no residual blocks or no active control points")]
    EmptyWindow,
    #[error("slide target {target} is before the current boundary {current}")]
    SlideBackwards { target: usize, current: usize },
}

/// Sliding-window sizing policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowPolicy {
    /// Window bounds, in control points.
    pub l_min: usize,
    pub l_max: usize,
    /// Density thresholds, control points per second.
    pub lambda0: f64,
    pub lambda1: f64,
    /// Scale constant of the interpolating branch.
    pub beta: f64,
    /// Interval over which the control-point density is measured, s.
    pub density_interval: f64,
    /// Prior overlap: minimum control points covered by the
    /// marginalization prior.
    pub l_w: usize,
}

impl Default for WindowPolicy {
    fn default() -> Self {
        WindowPolicy {
            l_min: 5,
            l_max: 30,
            lambda0: 0.02,
            lambda1: 0.1,
            beta: 1.0,
            density_interval: 2.0,
            l_w: 4,
        }
    }
}

/// Window length in control points for a given control-point density:
/// dense knots shrink the window, sparse knots stretch it.
pub fn window_length(alpha_cp: f64, p: &WindowPolicy) -> usize {
    if alpha_cp >= p.lambda1 {
        p.l_min
    } else if alpha_cp <= p.lambda0 {
        p.l_max
    } else {
        let raw = (p.beta * (p.l_max - p.l_min) as f64 * (p.lambda1 - alpha_cp)
            / (p.lambda1 - p.lambda0))
            .floor() as i64;
        (raw.max(p.l_min as i64) as usize).min(p.l_max)
    }
}

/// One residual block of the window.
#[derive(Debug, Clone)]
pub enum ResidualBlock {
    /// Range to one (virtual) anchor at time `t`, weighted per
    /// measurement.
    Range {
        t: Timestamp,
        reference: Vector3<f64>,
        range: f64,
        sigma: f64,
    },
    /// Ranges at time `t` summed into a single scalar before weighting
    /// (compatibility form; loses per-anchor information).
    RangeSummed {
        t: Timestamp,
        terms: Vec<(Vector3<f64>, f64)>,
        sigma: f64,
    },
    Imu {
        preint: ImuPreintegration,
        sigma_rot: f64,
        sigma_vel: f64,
        sigma_pos: f64,
    },
    Odom {
        preint: OdomPreintegration,
        sigma_yaw: f64,
        sigma_disp: f64,
    },
    /// Direct pose prior (initialization anchor).
    Pose {
        t: Timestamp,
        position: Vector3<f64>,
        rotation: Rotation,
        sigma_pos: f64,
        sigma_rot: f64,
    },
    /// Ground-robot planar constraint: height, roll and pitch observed as
    /// zero. Keeps the height observable when every anchor sits at the
    /// same mounting height.
    Planar {
        t: Timestamp,
        sigma_z: f64,
        sigma_tilt: f64,
    },
}

impl ResidualBlock {
    pub fn rows(&self) -> usize {
        match self {
            ResidualBlock::Range { .. } | ResidualBlock::RangeSummed { .. } => 1,
            ResidualBlock::Imu { .. } => 9,
            ResidualBlock::Odom { .. } => 3,
            ResidualBlock::Pose { .. } => 6,
            ResidualBlock::Planar { .. } => 3,
        }
    }

    pub fn times(&self) -> (Timestamp, Timestamp) {
        match self {
            ResidualBlock::Range { t, .. }
            | ResidualBlock::RangeSummed { t, .. }
            | ResidualBlock::Pose { t, .. }
            | ResidualBlock::Planar { t, .. } => (*t, *t),
            ResidualBlock::Imu { preint, .. } => (preint.t_start, preint.t_end),
            ResidualBlock::Odom { preint, .. } => (preint.t_start, preint.t_end),
        }
    }

    /// Inclusive control-point support range.
    fn support(&self, traj: &Trajectory) -> Result<(usize, usize), BackendError> {
        let (t0, t1) = self.times();
        let s0 = traj.knots().find_span(t0)?;
        let s1 = traj.knots().find_span(t1)?;
        Ok((s0 - 3, s1))
    }
}

/// Linearized Gaussian prior over a contiguous run of control points.
#[derive(Debug, Clone)]
pub struct MarginalPrior {
    pub first_cp: usize,
    pub count: usize,
    trans_lin: Vec<Vector3<f64>>,
    rot_lin: Vec<Rotation>,
    /// Weighted residual is `sqrt_info · Δ + rhs`.
    sqrt_info: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl MarginalPrior {
    pub fn is_empty(&self) -> bool {
        self.sqrt_info.nrows() == 0
    }

    pub fn rows(&self) -> usize {
        self.sqrt_info.nrows()
    }

    /// Tangent-space deviation of the trajectory from the linearization
    /// point, `[δtrans…, δrot…]`.
    fn deviation(&self, traj: &Trajectory) -> DVector<f64> {
        let mut d = DVector::zeros(6 * self.count);
        for i in 0..self.count {
            let dp = traj.translation.control_points()[self.first_cp + i] - self.trans_lin[i];
            let dr = log_map(&self.rot_lin[i].between(&traj.rotation.control_points()[self.first_cp + i]));
            for k in 0..3 {
                d[3 * i + k] = dp[k];
                d[3 * (self.count + i) + k] = dr[k];
            }
        }
        d
    }
}

/// Levenberg-Marquardt settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iterations: usize,
    pub cost_tolerance: f64,
    pub gradient_tolerance: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            max_iterations: 50,
            cost_tolerance: 1e-6,
            gradient_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Costs after each accepted step, strictly decreasing.
    pub accepted_costs: Vec<f64>,
    pub rank_deficient: bool,
    pub gradient_norm: f64,
}

/// The optimizable window: trajectory, residual blocks, the frozen
/// boundary and the marginalization prior.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    pub trajectory: Trajectory,
    pub blocks: Vec<ResidualBlock>,
    /// Control points `< first_active` are frozen.
    pub first_active: usize,
    pub prior: Option<MarginalPrior>,
    /// Huber threshold on raw range residuals, meters; `None` for plain
    /// least squares.
    pub huber_delta: Option<f64>,
}

struct ColumnMap {
    first_active: usize,
    n_active: usize,
}

impl ColumnMap {
    fn trans(&self, cp: usize) -> Option<usize> {
        (cp >= self.first_active).then(|| 3 * (cp - self.first_active))
    }
    fn rot(&self, cp: usize) -> Option<usize> {
        (cp >= self.first_active).then(|| 3 * (self.n_active + cp - self.first_active))
    }
    fn dim(&self) -> usize {
        6 * self.n_active
    }
}

fn endpoint(traj: &Trajectory, t: Timestamp) -> Result<EndpointLinearization, BackendError> {
    let basis = traj.translation.basis_at(t)?;
    let position = traj.translation.evaluate_with_basis(&basis, 0);
    let velocity = traj.translation.evaluate_with_basis(&basis, 1);
    let (rotation, rot_jacobians, first_rot_cp) = traj.rotation.evaluate_with_jacobians(&basis);
    Ok(EndpointLinearization {
        first_trans_cp: basis.first_control_point(),
        first_rot_cp,
        weights: basis.weights(),
        weight_dots: basis.weight_dots(),
        rotation,
        rot_jacobians,
        position,
        velocity,
    })
}

fn huber_weight(raw: f64, delta: Option<f64>) -> f64 {
    match delta {
        Some(d) if raw.abs() > d => (d / raw.abs()).sqrt(),
        _ => 1.0,
    }
}

fn huber_rho(u: f64, k: Option<f64>) -> f64 {
    match k {
        Some(k) if u.abs() > k => 2.0 * k * u.abs() - k * k,
        _ => u * u,
    }
}

impl SlidingWindow {
    pub fn new(trajectory: Trajectory) -> Self {
        SlidingWindow {
            trajectory,
            blocks: Vec::new(),
            first_active: 0,
            prior: None,
            huber_delta: None,
        }
    }

    pub fn active_count(&self) -> usize {
        self.trajectory.control_point_count() - self.first_active
    }

    /// Per-kind robust cost of the current trajectory (diagnostics).
    pub fn cost_breakdown(&self) -> Result<std::collections::BTreeMap<&'static str, f64>, BackendError> {
        let mut out = std::collections::BTreeMap::new();
        for b in &self.blocks {
            let kind = match b {
                ResidualBlock::Range { .. } => "range",
                ResidualBlock::RangeSummed { .. } => "range_summed",
                ResidualBlock::Imu { .. } => "imu",
                ResidualBlock::Odom { .. } => "odom",
                ResidualBlock::Pose { .. } => "pose",
                ResidualBlock::Planar { .. } => "planar",
            };
            *out.entry(kind).or_insert(0.0) += self.block_cost(&self.trajectory, b)?;
        }
        if let Some(p) = &self.prior {
            if !p.is_empty() {
                let r = &p.sqrt_info * p.deviation(&self.trajectory) + &p.rhs;
                *out.entry("prior").or_insert(0.0) += r.norm_squared();
            }
        }
        Ok(out)
    }

    /// Robust total cost of `traj` under the window's blocks and prior.
    pub fn cost_of(&self, traj: &Trajectory) -> Result<f64, BackendError> {
        let mut cost = 0.0;
        for b in &self.blocks {
            cost += self.block_cost(traj, b)?;
        }
        if let Some(p) = &self.prior {
            if !p.is_empty() {
                let r = &p.sqrt_info * p.deviation(traj) + &p.rhs;
                cost += r.norm_squared();
            }
        }
        Ok(cost)
    }

    fn block_cost(&self, traj: &Trajectory, b: &ResidualBlock) -> Result<f64, BackendError> {
        Ok(match b {
            ResidualBlock::Range {
                t,
                reference,
                range,
                sigma,
            } => {
                let p = traj.translation.evaluate(*t, 0)?;
                let raw = range - (p - reference).norm();
                huber_rho(raw / sigma, self.huber_delta.map(|d| d / sigma))
            }
            ResidualBlock::RangeSummed { t, terms, sigma } => {
                let p = traj.translation.evaluate(*t, 0)?;
                let (sum, _) = factors::va_range_residual(&p, terms);
                (sum / sigma).powi(2)
            }
            ResidualBlock::Imu {
                preint,
                sigma_rot,
                sigma_vel,
                sigma_pos,
            } => {
                let a = endpoint(traj, preint.t_start)?;
                let b_ = endpoint(traj, preint.t_end)?;
                let res = imu_residual(preint, &preint.gyro_bias, &preint.accel_bias, &a, &b_);
                (res.r[0] / *sigma_rot).norm_squared()
                    + (res.r[1] / *sigma_vel).norm_squared()
                    + (res.r[2] / *sigma_pos).norm_squared()
            }
            ResidualBlock::Odom {
                preint,
                sigma_yaw,
                sigma_disp,
            } => {
                let a = endpoint(traj, preint.t_start)?;
                let b_ = endpoint(traj, preint.t_end)?;
                let res = odom_residual(preint, &a, &b_);
                (res.r.x / sigma_yaw).powi(2)
                    + (res.r.y / sigma_disp).powi(2)
                    + (res.r.z / sigma_disp).powi(2)
            }
            ResidualBlock::Pose {
                t,
                position,
                rotation,
                sigma_pos,
                sigma_rot,
            } => {
                let p = traj.translation.evaluate(*t, 0)?;
                let r = traj.rotation.evaluate(*t)?;
                ((p - position) / *sigma_pos).norm_squared()
                    + (log_map(&rotation.between(&r)) / *sigma_rot).norm_squared()
            }
            ResidualBlock::Planar { t, sigma_z, sigma_tilt } => {
                let p = traj.translation.evaluate(*t, 0)?;
                let tilt = log_map(&traj.rotation.evaluate(*t)?);
                (p.z / sigma_z).powi(2)
                    + (tilt.x / sigma_tilt).powi(2)
                    + (tilt.y / sigma_tilt).powi(2)
            }
        })
    }

    /// Assemble the weighted Jacobian and residual of all blocks with
    /// respect to the active control points of `traj`.
    fn linearize(
        &self,
        traj: &Trajectory,
        cols: &ColumnMap,
    ) -> Result<(DMatrix<f64>, DVector<f64>), BackendError> {
        let prior_rows = self.prior.as_ref().map_or(0, |p| p.rows());
        let rows: usize = self.blocks.iter().map(|b| b.rows()).sum::<usize>() + prior_rows;
        let mut j = DMatrix::zeros(rows, cols.dim());
        let mut r = DVector::zeros(rows);
        let mut row = 0usize;

        let put = |j: &mut DMatrix<f64>, row: usize, col: Option<usize>, block: &Matrix3<f64>, rows: usize| {
            if let Some(c) = col {
                for rr in 0..rows {
                    for cc in 0..3 {
                        j[(row + rr, c + cc)] += block[(rr, cc)];
                    }
                }
            }
        };

        for b in &self.blocks {
            match b {
                ResidualBlock::Range {
                    t,
                    reference,
                    range,
                    sigma,
                } => {
                    let basis = traj.translation.basis_at(*t)?;
                    let p = traj.translation.evaluate_with_basis(&basis, 0);
                    let diff = p - reference;
                    let dist = diff.norm().max(1e-9);
                    let raw = range - dist;
                    let w = huber_weight(raw / sigma, self.huber_delta.map(|d| d / sigma)) / sigma;
                    r[row] = w * raw;
                    let u = diff / dist;
                    let first = basis.first_control_point();
                    for (m, wm) in basis.weights().iter().enumerate() {
                        if let Some(c) = cols.trans(first + m) {
                            for k in 0..3 {
                                j[(row, c + k)] += -w * wm * u[k];
                            }
                        }
                    }
                    row += 1;
                }
                ResidualBlock::RangeSummed { t, terms, sigma } => {
                    let basis = traj.translation.basis_at(*t)?;
                    let p = traj.translation.evaluate_with_basis(&basis, 0);
                    let w = 1.0 / sigma;
                    let (sum, _) = factors::va_range_residual(&p, terms);
                    r[row] = w * sum;
                    let first = basis.first_control_point();
                    let mut grad = Vector3::zeros();
                    for (reference, _) in terms {
                        let diff = p - reference;
                        grad += diff / diff.norm().max(1e-9);
                    }
                    for (m, wm) in basis.weights().iter().enumerate() {
                        if let Some(c) = cols.trans(first + m) {
                            for k in 0..3 {
                                j[(row, c + k)] += -w * wm * grad[k];
                            }
                        }
                    }
                    row += 1;
                }
                ResidualBlock::Imu {
                    preint,
                    sigma_rot,
                    sigma_vel,
                    sigma_pos,
                } => {
                    let a = endpoint(traj, preint.t_start)?;
                    let b_ = endpoint(traj, preint.t_end)?;
                    let res = imu_residual(preint, &preint.gyro_bias, &preint.accel_bias, &a, &b_);
                    let (wr, wv, wp) = (1.0 / sigma_rot, 1.0 / sigma_vel, 1.0 / sigma_pos);
                    for k in 0..3 {
                        r[row + k] = wr * res.r[0][k];
                        r[row + 3 + k] = wv * res.r[1][k];
                        r[row + 6 + k] = wp * res.r[2][k];
                    }
                    // rotation rows
                    for m in 0..4 {
                        let ja = wr * res.d_er_da * a.rot_jacobians[m];
                        put(&mut j, row, cols.rot(a.first_rot_cp + m), &ja, 3);
                        let jb = wr * res.d_er_db * b_.rot_jacobians[m];
                        put(&mut j, row, cols.rot(b_.first_rot_cp + m), &jb, 3);
                        let jva = wv * res.d_ev_da * a.rot_jacobians[m];
                        put(&mut j, row + 3, cols.rot(a.first_rot_cp + m), &jva, 3);
                        let jpa = wp * res.d_ep_da * a.rot_jacobians[m];
                        put(&mut j, row + 6, cols.rot(a.first_rot_cp + m), &jpa, 3);
                    }
                    // translation rows
                    for m in 0..4 {
                        let jv_a = wv * res.ra_t * -a.weight_dots[m];
                        put(&mut j, row + 3, cols.trans(a.first_trans_cp + m), &jv_a, 3);
                        let jv_b = wv * res.ra_t * b_.weight_dots[m];
                        put(&mut j, row + 3, cols.trans(b_.first_trans_cp + m), &jv_b, 3);
                        let jp_a = wp * res.ra_t * (-a.weights[m] - a.weight_dots[m] * res.dt);
                        put(&mut j, row + 6, cols.trans(a.first_trans_cp + m), &jp_a, 3);
                        let jp_b = wp * res.ra_t * b_.weights[m];
                        put(&mut j, row + 6, cols.trans(b_.first_trans_cp + m), &jp_b, 3);
                    }
                    row += 9;
                }
                ResidualBlock::Odom {
                    preint,
                    sigma_yaw,
                    sigma_disp,
                } => {
                    let a = endpoint(traj, preint.t_start)?;
                    let b_ = endpoint(traj, preint.t_end)?;
                    let res = odom_residual(preint, &a, &b_);
                    let (wy, wd) = (1.0 / sigma_yaw, 1.0 / sigma_disp);
                    r[row] = wy * res.r.x;
                    r[row + 1] = wd * res.r.y;
                    r[row + 2] = wd * res.r.z;
                    for m in 0..4 {
                        // yaw row, rotation control points
                        let ya = a.rot_jacobians[m].transpose() * res.d_yaw_da * wy;
                        if let Some(c) = cols.rot(a.first_rot_cp + m) {
                            for k in 0..3 {
                                j[(row, c + k)] += ya[k];
                            }
                        }
                        let yb = b_.rot_jacobians[m].transpose() * res.d_yaw_db * wy;
                        if let Some(c) = cols.rot(b_.first_rot_cp + m) {
                            for k in 0..3 {
                                j[(row, c + k)] += yb[k];
                            }
                        }
                        // displacement rows: planar part of R_aᵀ(p_b − p_a)
                        let da = wd * res.d_ed_da * a.rot_jacobians[m];
                        put_rows12(&mut j, row, cols.rot(a.first_rot_cp + m), &da);
                        let ta = wd * res.ra_t * -a.weights[m];
                        put_rows12(&mut j, row, cols.trans(a.first_trans_cp + m), &ta);
                        let tb = wd * res.ra_t * b_.weights[m];
                        put_rows12(&mut j, row, cols.trans(b_.first_trans_cp + m), &tb);
                    }
                    row += 3;
                }
                ResidualBlock::Pose {
                    t,
                    position,
                    rotation,
                    sigma_pos,
                    sigma_rot,
                } => {
                    let basis = traj.translation.basis_at(*t)?;
                    let p = traj.translation.evaluate_with_basis(&basis, 0);
                    let (rot, rot_jac, first_rot) = traj.rotation.evaluate_with_jacobians(&basis);
                    let e_r = log_map(&rotation.between(&rot));
                    let (wp_, wr_) = (1.0 / sigma_pos, 1.0 / sigma_rot);
                    for k in 0..3 {
                        r[row + k] = wp_ * (p[k] - position[k]);
                        r[row + 3 + k] = wr_ * e_r[k];
                    }
                    let first = basis.first_control_point();
                    for (m, wm) in basis.weights().iter().enumerate() {
                        let jp = Matrix3::identity() * (wp_ * wm);
                        put(&mut j, row, cols.trans(first + m), &jp, 3);
                        let jr = wr_ * right_jacobian_inv(&e_r) * rot_jac[m];
                        put(&mut j, row + 3, cols.rot(first_rot + m), &jr, 3);
                    }
                    row += 6;
                }
                ResidualBlock::Planar { t, sigma_z, sigma_tilt } => {
                    let basis = traj.translation.basis_at(*t)?;
                    let p = traj.translation.evaluate_with_basis(&basis, 0);
                    let (rot, rot_jac, first_rot) = traj.rotation.evaluate_with_jacobians(&basis);
                    let tilt = log_map(&rot);
                    let (wz, wt) = (1.0 / sigma_z, 1.0 / sigma_tilt);
                    r[row] = wz * p.z;
                    r[row + 1] = wt * tilt.x;
                    r[row + 2] = wt * tilt.y;
                    let jr_inv = right_jacobian_inv(&tilt);
                    let first = basis.first_control_point();
                    for (m, wm) in basis.weights().iter().enumerate() {
                        if let Some(c) = cols.trans(first + m) {
                            j[(row, c + 2)] += wz * wm;
                        }
                        let block = jr_inv * rot_jac[m];
                        if let Some(c) = cols.rot(first_rot + m) {
                            for k in 0..3 {
                                j[(row + 1, c + k)] += wt * block[(0, k)];
                                j[(row + 2, c + k)] += wt * block[(1, k)];
                            }
                        }
                    }
                    row += 3;
                }
            }
        }

        if let Some(p) = &self.prior {
            if !p.is_empty() {
                let dev = p.deviation(traj);
                let res = &p.sqrt_info * &dev + &p.rhs;
                for rr in 0..p.rows() {
                    r[row + rr] = res[rr];
                }
                // columns of the prior: [trans…, rot…] over its span
                for i in 0..p.count {
                    let cp = p.first_cp + i;
                    for (local, col) in [(3 * i, cols.trans(cp)), (3 * (p.count + i), cols.rot(cp))]
                    {
                        if let Some(c) = col {
                            for rr in 0..p.rows() {
                                for k in 0..3 {
                                    j[(row + rr, c + k)] += p.sqrt_info[(rr, local + k)];
                                }
                            }
                        }
                    }
                }
                row += p.rows();
            }
        }
        debug_assert_eq!(row, rows);
        Ok((j, r))
    }

    fn apply_step(&self, traj: &Trajectory, cols: &ColumnMap, step: &DVector<f64>) -> Trajectory {
        let mut out = traj.clone();
        let n = traj.control_point_count();
        for cp in self.first_active..n {
            if let Some(c) = cols.trans(cp) {
                let d = Vector3::new(step[c], step[c + 1], step[c + 2]);
                out.translation.control_points_mut()[cp] += d;
            }
            if let Some(c) = cols.rot(cp) {
                let d = Vector3::new(step[c], step[c + 1], step[c + 2]);
                let r = &mut out.rotation.control_points_mut()[cp];
                *r = r.compose(&exp_map(&d));
            }
        }
        out
    }

    /// Damped Gauss-Newton minimization of the window cost. Accepted
    /// iterations strictly decrease the cost.
    pub fn optimize(&mut self, cfg: &LmConfig) -> Result<ConvergenceReport, BackendError> {
        if self.blocks.is_empty() || self.active_count() == 0 {
            return Err(BackendError::EmptyWindow);
        }
        let cols = ColumnMap {
            first_active: self.first_active,
            n_active: self.active_count(),
        };
        let mut traj = self.trajectory.clone();
        let mut cost = self.cost_of(&traj)?;
        let initial_cost = cost;
        let mut lambda = cfg.lambda_init;
        let mut accepted_costs = Vec::new();
        let mut rank_deficient = false;
        let mut gradient_norm = f64::INFINITY;
        let mut iterations = 0;

        for _ in 0..cfg.max_iterations {
            iterations += 1;
            let (j, r) = self.linearize(&traj, &cols)?;
            let h = j.transpose() * &j;
            let g = j.transpose() * &r;
            gradient_norm = g.amax();
            if gradient_norm < cfg.gradient_tolerance {
                break;
            }
            let mut keep_going = false;
            for _ in 0..8 {
                let mut damped = h.clone();
                for k in 0..damped.nrows() {
                    damped[(k, k)] += lambda * damped[(k, k)].max(1e-6);
                }
                let step = match damped.cholesky() {
                    Some(ch) => ch.solve(&(-&g)),
                    None => {
                        rank_deficient = true;
                        lambda *= cfg.lambda_up;
                        continue;
                    }
                };
                let candidate = self.apply_step(&traj, &cols, &step);
                let c_new = self.cost_of(&candidate)?;
                if c_new < cost {
                    let rel = (cost - c_new) / cost.max(1e-300);
                    traj = candidate;
                    cost = c_new;
                    accepted_costs.push(c_new);
                    lambda = (lambda * cfg.lambda_down).max(1e-12);
                    // stop once accepted steps stop changing the cost
                    keep_going = rel >= cfg.cost_tolerance;
                    break;
                }
                lambda *= cfg.lambda_up;
            }
            if !keep_going {
                break;
            }
        }
        self.trajectory = traj;
        Ok(ConvergenceReport {
            iterations,
            initial_cost,
            final_cost: cost,
            accepted_costs,
            rank_deficient,
            gradient_norm,
        })
    }

    /// Freeze every control point before `new_first_active`, folding the
    /// residual blocks that touch the dropped ones into a linearized
    /// prior over the surviving boundary control points. Sliding by zero
    /// leaves the window unchanged.
    pub fn slide_and_marginalize(&mut self, new_first_active: usize) -> Result<(), BackendError> {
        if new_first_active < self.first_active {
            return Err(BackendError::SlideBackwards {
                target: new_first_active,
                current: self.first_active,
            });
        }
        if new_first_active == self.first_active {
            return Ok(());
        }
        let n = self.trajectory.control_point_count();
        let new_first = new_first_active.min(n);

        // blocks touching a dropped control point get marginalized
        let mut touching = Vec::new();
        let mut keep = Vec::new();
        for b in self.blocks.drain(..) {
            let (lo, hi) = b.support(&self.trajectory)?;
            let touches = lo < new_first && hi >= self.first_active;
            if touches {
                touching.push(b);
            } else {
                keep.push(b);
            }
        }
        self.blocks = keep;

        // boundary: active cps touched by the marginalized system,
        // at least l_w-wide when possible
        let mut boundary_end = new_first;
        for b in &touching {
            let (_, hi) = b.support(&self.trajectory)?;
            boundary_end = boundary_end.max(hi + 1);
        }
        if let Some(p) = &self.prior {
            boundary_end = boundary_end.max(p.first_cp + p.count);
        }
        boundary_end = boundary_end.min(n);

        if touching.is_empty() && self.prior.as_ref().map_or(true, |p| p.first_cp >= new_first) {
            // nothing couples the dropped points to the survivors
            self.first_active = new_first;
            return Ok(());
        }

        // linearize the departing system over [first_active, boundary_end)
        let sub = SlidingWindow {
            trajectory: self.trajectory.clone(),
            blocks: touching,
            first_active: self.first_active,
            prior: self.prior.take(),
            huber_delta: self.huber_delta,
        };
        let cols = ColumnMap {
            first_active: self.first_active,
            n_active: boundary_end - self.first_active,
        };
        let (j, r) = sub.linearize_span(&cols)?;
        let h = j.transpose() * &j;
        let g = j.transpose() * &r;

        // Schur complement: drop [first_active, new_first)
        let nd = 3 * (new_first - self.first_active); // per block kind
        let total_cp = boundary_end - self.first_active;
        let keep_cp = boundary_end - new_first;
        // reorder columns [trans_all | rot_all] → [drop | keep]
        let mut order = Vec::with_capacity(6 * total_cp);
        for i in 0..(new_first - self.first_active) {
            order.push(3 * i); // trans drop start indices
        }
        for i in 0..(new_first - self.first_active) {
            order.push(3 * (total_cp + i)); // rot drop
        }
        for i in (new_first - self.first_active)..total_cp {
            order.push(3 * i);
        }
        for i in (new_first - self.first_active)..total_cp {
            order.push(3 * (total_cp + i));
        }
        let dim = 6 * total_cp;
        let mut perm = DMatrix::<f64>::zeros(dim, dim);
        for (new_block, &old_start) in order.iter().enumerate() {
            for k in 0..3 {
                perm[(3 * new_block + k, old_start + k)] = 1.0;
            }
        }
        let hp = &perm * h * perm.transpose();
        let gp = &perm * g;
        let nd_all = 2 * nd;
        let nk_all = 6 * keep_cp;
        let h_dd = hp.view((0, 0), (nd_all, nd_all)).into_owned();
        let h_dk = hp.view((0, nd_all), (nd_all, nk_all)).into_owned();
        let h_kk = hp.view((nd_all, nd_all), (nk_all, nk_all)).into_owned();
        let g_d = gp.rows(0, nd_all).into_owned();
        let g_k = gp.rows(nd_all, nk_all).into_owned();

        let h_dd_inv = pseudo_inverse(&h_dd);
        let h_marg = &h_kk - h_dk.transpose() * &h_dd_inv * &h_dk;
        let g_marg = g_k - h_dk.transpose() * &h_dd_inv * g_d;

        let (sqrt_info, rhs) = sqrt_factor(&h_marg, &g_marg);
        let trans_lin = self.trajectory.translation.control_points()[new_first..boundary_end].to_vec();
        let rot_lin = self.trajectory.rotation.control_points()[new_first..boundary_end].to_vec();
        self.prior = Some(MarginalPrior {
            first_cp: new_first,
            count: keep_cp,
            trans_lin,
            rot_lin,
            sqrt_info,
            rhs,
        });
        self.first_active = new_first;
        Ok(())
    }

    /// Linearization used by marginalization: identical assembly, but the
    /// caller controls the column span.
    fn linearize_span(&self, cols: &ColumnMap) -> Result<(DMatrix<f64>, DVector<f64>), BackendError> {
        self.linearize(&self.trajectory, cols)
    }
}

fn put_rows12(j: &mut DMatrix<f64>, row: usize, col: Option<usize>, block: &Matrix3<f64>) {
    if let Some(c) = col {
        for rr in 0..2 {
            for cc in 0..3 {
                j[(row + 1 + rr, c + cc)] += block[(rr, cc)];
            }
        }
    }
}

fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let tol = eig.eigenvalues.amax() * 1e-12 + 1e-300;
    let mut inv_vals = eig.eigenvalues.clone();
    for v in inv_vals.iter_mut() {
        *v = if *v > tol { 1.0 / *v } else { 0.0 };
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose()
}

/// Square-root factorization of a PSD information matrix with gradient:
/// rows of `S` with `SᵀS = H` and `Sᵀ·rhs = g`.
fn sqrt_factor(h: &DMatrix<f64>, g: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let eig = h.clone().symmetric_eigen();
    let tol = eig.eigenvalues.amax().max(0.0) * 1e-12 + 1e-300;
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for (i, &v) in eig.eigenvalues.iter().enumerate() {
        if v > tol {
            let s = v.sqrt();
            let vec = eig.eigenvectors.column(i);
            rows.push(vec.transpose() * s);
            rhs.push((vec.transpose() * g)[0] / s);
        }
    }
    if rows.is_empty() {
        return (DMatrix::zeros(0, h.ncols()), DVector::zeros(0));
    }
    let s = DMatrix::from_rows(&rows);
    (s, DVector::from_vec(rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ekf::{gravity_vector, ImuSample, OdomSample};
    use crate::spline::KnotVector;
    use factors::{preintegrate_imu, preintegrate_odom};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn window_length_branches() {
        let p = WindowPolicy::default();
        assert_eq!(window_length(0.15, &p), 5);
        assert_eq!(window_length(0.01, &p), 30);
        assert_eq!(window_length(0.06, &p), 12);
    }

    #[test]
    fn window_length_monotone_non_increasing() {
        let p = WindowPolicy::default();
        let mut prev = usize::MAX;
        for i in 0..200 {
            let alpha = i as f64 * 0.001;
            let l = window_length(alpha, &p);
            assert!(l <= prev, "window grew at density {alpha}");
            assert!((p.l_min..=p.l_max).contains(&l));
            prev = l;
        }
    }

    /// Uniform-knot trajectory whose control points follow a smooth
    /// planar motion.
    fn smooth_trajectory(n_cp: usize, dt: f64) -> Trajectory {
        let knots =
            KnotVector::new((0..n_cp + 4).map(|i| (i as f64 * dt).into()).collect()).unwrap();
        let mut trans = Vec::new();
        let mut rot = Vec::new();
        for m in 0..n_cp {
            let g = (m as f64 + 1.0) * dt; // roughly the greville time
            trans.push(Vector3::new(
                0.2 * g,
                0.5 * (0.4 * g).sin(),
                0.0,
            ));
            rot.push(Rotation::from_yaw(0.3 * (0.5 * g).sin()));
        }
        Trajectory::new(knots, trans, rot).unwrap()
    }

    fn interior_time(traj: &Trajectory, f: f64) -> Timestamp {
        let lo = traj.knots().support_start();
        let hi = traj.knots().support_end();
        Timestamp::new(lo + (hi - lo) * f)
    }

    /// Noise-free IMU samples synthesized from the trajectory's own
    /// derivatives.
    fn imu_from_trajectory(traj: &Trajectory, t0: Timestamp, t1: Timestamp, n: usize) -> Vec<ImuSample> {
        (0..=n)
            .map(|i| {
                let t = Timestamp::new(t0.seconds() + (t1.seconds() - t0.seconds()) * i as f64 / n as f64);
                let r = traj.rotation.evaluate(t).unwrap();
                let acc = traj.translation.evaluate(t, 2).unwrap();
                ImuSample {
                    t,
                    gyro: traj.rotation.angular_velocity(t).unwrap(),
                    accel: r.apply_inverse(&(acc + gravity_vector())),
                }
            })
            .collect()
    }

    fn odom_from_trajectory(traj: &Trajectory, t0: Timestamp, t1: Timestamp, n: usize) -> Vec<OdomSample> {
        (0..=n)
            .map(|i| {
                let t = Timestamp::new(t0.seconds() + (t1.seconds() - t0.seconds()) * i as f64 / n as f64);
                let r = traj.rotation.evaluate(t).unwrap();
                let v = traj.translation.evaluate(t, 1).unwrap();
                let v_body = r.apply_inverse(&v);
                OdomSample {
                    t,
                    linear_velocity: v_body.x,
                    angular_velocity: traj.rotation.angular_velocity(t).unwrap().z,
                }
            })
            .collect()
    }

    #[test]
    fn consistent_imu_block_has_zero_residual() {
        let traj = smooth_trajectory(10, 0.5);
        let t0 = interior_time(&traj, 0.2);
        let t1 = interior_time(&traj, 0.5);
        let samples = imu_from_trajectory(&traj, t0, t1, 200);
        let preint = preintegrate_imu(&samples, &Vector3::zeros(), &Vector3::zeros()).unwrap();
        let a = endpoint(&traj, t0).unwrap();
        let b = endpoint(&traj, t1).unwrap();
        let res = imu_residual(&preint, &Vector3::zeros(), &Vector3::zeros(), &a, &b);
        assert!(res.r[0].norm() < 1e-6, "rotation residual {:?}", res.r[0]);
        assert!(res.r[1].norm() < 1e-6, "velocity residual {:?}", res.r[1]);
        assert!(res.r[2].norm() < 1e-6, "position residual {:?}", res.r[2]);
    }

    #[test]
    fn pure_gravity_imu_on_constant_velocity_spline() {
        // constant-velocity, identity-attitude trajectory: the IMU sees
        // exactly gravity and the whole residual vanishes
        let knots = KnotVector::new((0..12).map(|i| (i as f64 * 0.5).into()).collect()).unwrap();
        let v = Vector3::new(0.2, -0.1, 0.0);
        let trans: Vec<Vector3<f64>> = (0..8)
            .map(|m| {
                let g = (knots.raw()[m + 1] + knots.raw()[m + 2] + knots.raw()[m + 3]) / 3.0;
                v * g
            })
            .collect();
        let rot = vec![Rotation::identity(); 8];
        let traj = Trajectory::new(knots, trans, rot).unwrap();
        let (t0, t1) = (Timestamp::new(1.8), Timestamp::new(2.6));
        let samples: Vec<ImuSample> = (0..=100)
            .map(|i| ImuSample {
                t: Timestamp::new(1.8 + 0.8 * i as f64 / 100.0),
                gyro: Vector3::zeros(),
                accel: gravity_vector(),
            })
            .collect();
        let preint = preintegrate_imu(&samples, &Vector3::zeros(), &Vector3::zeros()).unwrap();
        let a = endpoint(&traj, t0).unwrap();
        let b = endpoint(&traj, t1).unwrap();
        let res = imu_residual(&preint, &Vector3::zeros(), &Vector3::zeros(), &a, &b);
        assert!(res.r[1].norm() < 1e-9, "accel residual {:?}", res.r[1]);
        assert!(res.r[2].norm() < 1e-9);
    }

    #[test]
    fn straight_line_odom_block_has_zero_residual() {
        // nonholonomic-consistent case: straight line, heading along the
        // velocity
        let knots = KnotVector::new((0..12).map(|i| (i as f64 * 0.5).into()).collect()).unwrap();
        let v = Vector3::new(0.25, 0.0, 0.0);
        let trans: Vec<Vector3<f64>> = (0..8)
            .map(|m| {
                let g = (knots.raw()[m + 1] + knots.raw()[m + 2] + knots.raw()[m + 3]) / 3.0;
                v * g
            })
            .collect();
        let traj = Trajectory::new(knots, trans, vec![Rotation::identity(); 8]).unwrap();
        let (t0, t1) = (Timestamp::new(1.8), Timestamp::new(3.2));
        let samples = odom_from_trajectory(&traj, t0, t1, 200);
        let preint = preintegrate_odom(&samples).unwrap();
        let a = endpoint(&traj, t0).unwrap();
        let b = endpoint(&traj, t1).unwrap();
        let res = odom_residual(&preint, &a, &b);
        assert!(res.r.norm() < 1e-6, "residual {:?}", res.r);
    }

    #[test]
    fn stationary_odom_block_has_zero_residual() {
        let knots = KnotVector::new((0..12).map(|i| (i as f64 * 0.5).into()).collect()).unwrap();
        let traj = Trajectory::new(
            knots,
            vec![Vector3::new(1.0, 2.0, 0.0); 8],
            vec![Rotation::from_yaw(0.4); 8],
        )
        .unwrap();
        let samples: Vec<OdomSample> = (0..=50)
            .map(|i| OdomSample {
                t: Timestamp::new(1.8 + i as f64 * 0.02),
                linear_velocity: 0.0,
                angular_velocity: 0.0,
            })
            .collect();
        let preint = preintegrate_odom(&samples).unwrap();
        let a = endpoint(&traj, Timestamp::new(1.8)).unwrap();
        let b = endpoint(&traj, Timestamp::new(2.8)).unwrap();
        let res = odom_residual(&preint, &a, &b);
        assert!(res.r.norm() < 1e-12, "residual {:?}", res.r);
    }

    fn window_with_all_block_kinds(seed: u64) -> SlidingWindow {
        let mut rng = StdRng::seed_from_u64(seed);
        let traj = smooth_trajectory(10, 0.5);
        let t0 = interior_time(&traj, 0.25);
        let t1 = interior_time(&traj, 0.55);
        let tr = interior_time(&traj, 0.7);
        let imu = preintegrate_imu(
            &imu_from_trajectory(&traj, t0, t1, 60),
            &Vector3::new(0.002, -0.001, 0.001),
            &Vector3::new(0.01, 0.0, -0.02),
        )
        .unwrap();
        let odom = preintegrate_odom(&odom_from_trajectory(&traj, t0, t1, 60)).unwrap();
        let mut w = SlidingWindow::new(traj);
        w.huber_delta = Some(0.15);
        let anchor = Vector3::new(rng.gen_range(2.0..4.0), rng.gen_range(-2.0..2.0), 1.8);
        let p = w.trajectory.translation.evaluate(tr, 0).unwrap();
        w.blocks.push(ResidualBlock::Range {
            t: tr,
            reference: anchor,
            range: (p - anchor).norm() + rng.gen_range(-0.1..0.1),
            sigma: 0.05,
        });
        w.blocks.push(ResidualBlock::RangeSummed {
            t: tr,
            terms: vec![
                (anchor, (p - anchor).norm() + 0.02),
                (anchor + Vector3::new(1.0, 2.0, 0.0), (p - anchor - Vector3::new(1.0, 2.0, 0.0)).norm() - 0.03),
            ],
            sigma: 0.05,
        });
        w.blocks.push(ResidualBlock::Imu {
            preint: imu,
            sigma_rot: 0.01,
            sigma_vel: 0.02,
            sigma_pos: 0.02,
        });
        w.blocks.push(ResidualBlock::Odom {
            preint: odom,
            sigma_yaw: 0.01,
            sigma_disp: 0.01,
        });
        w.blocks.push(ResidualBlock::Pose {
            t: t0,
            position: w.trajectory.translation.evaluate(t0, 0).unwrap() + Vector3::new(0.01, -0.02, 0.0),
            rotation: w.trajectory.rotation.evaluate(t0).unwrap(),
            sigma_pos: 0.1,
            sigma_rot: 0.05,
        });
        w
    }

    #[test]
    fn jacobians_match_finite_differences() {
        for seed in 0..10 {
            let w = window_with_all_block_kinds(seed);
            let cols = ColumnMap {
                first_active: w.first_active,
                n_active: w.active_count(),
            };
            let (j, r0) = w.linearize(&w.trajectory, &cols).unwrap();
            let h = 1e-6;
            let n = w.trajectory.control_point_count();
            for cp in 0..n {
                for axis in 0..3 {
                    // translation
                    let mut t2 = w.trajectory.clone();
                    t2.translation.control_points_mut()[cp][axis] += h;
                    let (_, r1) = w.linearize(&t2, &cols).unwrap();
                    let fd = (&r1 - &r0) / h;
                    let col = cols.trans(cp).unwrap() + axis;
                    for row in 0..r0.len() {
                        let a = j[(row, col)];
                        let b = fd[row];
                        assert!(
                            (a - b).abs() < 1e-4 * (1.0 + b.abs()),
                            "trans cp {cp} axis {axis} row {row}: {a} vs {b} (seed {seed})"
                        );
                    }
                    // rotation
                    let mut t3 = w.trajectory.clone();
                    let mut d = Vector3::zeros();
                    d[axis] = h;
                    let r = &mut t3.rotation.control_points_mut()[cp];
                    *r = r.compose(&exp_map(&d));
                    let (_, r2) = w.linearize(&t3, &cols).unwrap();
                    let fd = (&r2 - &r0) / h;
                    let col = cols.rot(cp).unwrap() + axis;
                    for row in 0..r0.len() {
                        let a = j[(row, col)];
                        let b = fd[row];
                        assert!(
                            (a - b).abs() < 1e-4 * (1.0 + b.abs()),
                            "rot cp {cp} axis {axis} row {row}: {a} vs {b} (seed {seed})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn zero_residuals_are_a_fixed_point() {
        let traj = smooth_trajectory(10, 0.5);
        let t = interior_time(&traj, 0.5);
        let p = traj.translation.evaluate(t, 0).unwrap();
        let anchor = Vector3::new(3.0, 1.0, 0.0);
        let mut w = SlidingWindow::new(traj);
        w.blocks.push(ResidualBlock::Range {
            t,
            reference: anchor,
            range: (p - anchor).norm(),
            sigma: 0.05,
        });
        let before = w.trajectory.translation.control_points().to_vec();
        let report = w.optimize(&LmConfig::default()).unwrap();
        assert!(report.final_cost < 1e-20);
        assert!(report.accepted_costs.is_empty(), "no step should be taken");
        assert_eq!(w.trajectory.translation.control_points(), &before[..]);
    }

    #[test]
    fn single_range_converges_to_the_sphere() {
        let traj = smooth_trajectory(8, 0.5);
        let t = interior_time(&traj, 0.95);
        let anchor = Vector3::new(4.0, 2.0, 0.0);
        let mut w = SlidingWindow::new(traj);
        let n = w.trajectory.control_point_count();
        w.first_active = n - 1; // one free control point
        let p = w.trajectory.translation.evaluate(t, 0).unwrap();
        // make sure the free control point supports t
        assert!(w.trajectory.knots().find_span(t).unwrap() >= n - 1);
        let range = (p - anchor).norm() + 0.4;
        w.blocks.push(ResidualBlock::Range {
            t,
            reference: anchor,
            range,
            sigma: 0.05,
        });
        let report = w.optimize(&LmConfig::default()).unwrap();
        let p_final = w.trajectory.translation.evaluate(t, 0).unwrap();
        assert!(
            ((p_final - anchor).norm() - range).abs() < 1e-8,
            "distance error {} after {} iterations",
            ((p_final - anchor).norm() - range).abs(),
            report.iterations
        );
        // accepted costs strictly decrease
        for pair in report.accepted_costs.windows(2) {
            assert!(pair[1] < pair[0]);
        }
    }

    #[test]
    fn accepted_costs_strictly_decrease_on_noisy_window() {
        let mut w = window_with_all_block_kinds(3);
        // perturb the trajectory so the solver has work to do
        let mut rng = StdRng::seed_from_u64(4);
        for cp in w.trajectory.translation.control_points_mut() {
            *cp += Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0);
        }
        let report = w.optimize(&LmConfig::default()).unwrap();
        assert!(report.final_cost < report.initial_cost);
        for pair in report.accepted_costs.windows(2) {
            assert!(pair[1] < pair[0], "cost increased: {pair:?}");
        }
    }

    #[test]
    fn zero_slide_is_identity() {
        let mut w = window_with_all_block_kinds(5);
        let blocks_before = w.blocks.len();
        let traj_before = w.trajectory.translation.control_points().to_vec();
        w.slide_and_marginalize(0).unwrap();
        assert_eq!(w.blocks.len(), blocks_before);
        assert!(w.prior.is_none());
        assert_eq!(w.trajectory.translation.control_points(), &traj_before[..]);
    }

    #[test]
    fn slide_freezes_exactly_the_dropped_points() {
        let mut w = window_with_all_block_kinds(6);
        let frozen_before: Vec<Vector3<f64>> =
            w.trajectory.translation.control_points()[..4].to_vec();
        let eval_t = interior_time(&w.trajectory, 0.4);
        let before = w.trajectory.translation.evaluate(eval_t, 0).unwrap();
        w.slide_and_marginalize(4).unwrap();
        assert_eq!(w.first_active, 4);
        // trajectory evaluation unchanged before re-optimization
        let after = w.trajectory.translation.evaluate(eval_t, 0).unwrap();
        assert_eq!(before, after);
        // optimization never writes the frozen points
        let _ = w.optimize(&LmConfig::default());
        for (a, b) in w.trajectory.translation.control_points()[..4]
            .iter()
            .zip(&frozen_before)
        {
            assert_eq!(a, b, "frozen control point moved");
        }
    }

    #[test]
    fn two_window_sliding_matches_full_batch() {
        // a noise-free short sequence solved (a) in one batch and (b) in
        // two windows with marginalization must agree closely
        let truth = smooth_trajectory(12, 0.5);
        let anchors = [
            Vector3::new(-1.0, -1.0, 0.0),
            Vector3::new(4.0, -1.5, 0.0),
            Vector3::new(2.0, 3.0, 0.0),
        ];
        let make_blocks = |traj: &Trajectory| {
            let mut blocks = Vec::new();
            blocks.push(ResidualBlock::Pose {
                t: interior_time(traj, 0.02),
                position: truth
                    .translation
                    .evaluate(interior_time(traj, 0.02), 0)
                    .unwrap(),
                rotation: truth.rotation.evaluate(interior_time(traj, 0.02)).unwrap(),
                sigma_pos: 0.001,
                sigma_rot: 0.001,
            });
            for i in 0..14 {
                let t = interior_time(traj, 0.03 + 0.068 * i as f64);
                let p = truth.translation.evaluate(t, 0).unwrap();
                for a in &anchors {
                    blocks.push(ResidualBlock::Range {
                        t,
                        reference: *a,
                        range: (p - a).norm(),
                        sigma: 0.05,
                    });
                }
            }
            for i in 0..7 {
                let t0 = interior_time(traj, 0.03 + 0.136 * i as f64);
                let t1 = interior_time(traj, 0.03 + 0.136 * (i as f64 + 1.0)).min_t(traj);
                let imu = preintegrate_imu(
                    &imu_from_trajectory(&truth, t0, t1, 60),
                    &Vector3::zeros(),
                    &Vector3::zeros(),
                )
                .unwrap();
                blocks.push(ResidualBlock::Imu {
                    preint: imu,
                    sigma_rot: 0.01,
                    sigma_vel: 0.02,
                    sigma_pos: 0.02,
                });
            }
            blocks
        };

        // perturbed initial guess shared by both runs
        let mut init = truth.clone();
        let mut rng = StdRng::seed_from_u64(10);
        for cp in init.translation.control_points_mut() {
            *cp += Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.0);
        }

        let mut batch = SlidingWindow::new(init.clone());
        batch.blocks = make_blocks(&init);
        batch.optimize(&LmConfig::default()).unwrap();

        let mut sliding = SlidingWindow::new(init.clone());
        sliding.blocks = make_blocks(&init);
        // first pass: optimize everything, then slide and re-optimize
        sliding.optimize(&LmConfig::default()).unwrap();
        sliding.slide_and_marginalize(6).unwrap();
        sliding.optimize(&LmConfig::default()).unwrap();

        for i in 0..16 {
            let t = interior_time(&truth, 0.05 + 0.055 * i as f64);
            let pb = batch.trajectory.translation.evaluate(t, 0).unwrap();
            let ps = sliding.trajectory.translation.evaluate(t, 0).unwrap();
            assert!(
                (pb - ps).norm() < 1e-3,
                "batch and sliding disagree at {t:?}: {pb:?} vs {ps:?}"
            );
        }
    }

    trait MinT {
        fn min_t(self, traj: &Trajectory) -> Timestamp;
    }
    impl MinT for Timestamp {
        fn min_t(self, traj: &Trajectory) -> Timestamp {
            let hi = traj.knots().support_end();
            if self.seconds() > hi {
                Timestamp::new(hi)
            } else {
                self
            }
        }
    }
}
