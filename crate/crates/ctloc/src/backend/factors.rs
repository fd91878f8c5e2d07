//! Measurement factors of the sliding-window graph: virtual-anchor
//! ranges, pre-integrated IMU blocks, and pre-integrated odometer blocks,
//! each with analytic Jacobians with respect to the spline control
//! points.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::ekf::{gravity_vector, ImuSample, OdomSample};
use crate::geom::{
    exp_map, hat, log_map, right_jacobian, right_jacobian_inv, Rotation, Timestamp,
};

/// Summed range residual over the virtual anchors seen at one time,
/// together with the per-anchor terms retained for robust weighting.
pub fn va_range_residual(x: &Vector3<f64>, terms: &[(Vector3<f64>, f64)]) -> (f64, Vec<f64>) {
    let per: Vec<f64> = terms.iter().map(|(p, r)| r - (x - p).norm()).collect();
    (per.iter().sum(), per)
}

/// IMU increments compounded between two ranging epochs, with first-order
/// bias Jacobians. Midpoint integration.
#[derive(Debug, Clone)]
pub struct ImuPreintegration {
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub delta_r: Rotation,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    /// Bias values the increments were integrated with.
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub dr_dbg: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    pub dp_dbg: Matrix3<f64>,
    pub dp_dba: Matrix3<f64>,
    pub sample_count: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum FactorError {
    #[error("pre-integration block needs at least two samples")]
    BlockTooShort,
}

/// Compound an IMU block with the given bias estimates.
pub fn preintegrate_imu(
    samples: &[ImuSample],
    gyro_bias: &Vector3<f64>,
    accel_bias: &Vector3<f64>,
) -> Result<ImuPreintegration, FactorError> {
    if samples.len() < 2 {
        return Err(FactorError::BlockTooShort);
    }
    let mut p = ImuPreintegration {
        t_start: samples[0].t,
        t_end: samples[samples.len() - 1].t,
        delta_r: Rotation::identity(),
        delta_v: Vector3::zeros(),
        delta_p: Vector3::zeros(),
        gyro_bias: *gyro_bias,
        accel_bias: *accel_bias,
        dr_dbg: Matrix3::zeros(),
        dv_dbg: Matrix3::zeros(),
        dv_dba: Matrix3::zeros(),
        dp_dbg: Matrix3::zeros(),
        dp_dba: Matrix3::zeros(),
        sample_count: samples.len(),
    };
    for w in samples.windows(2) {
        let dt = w[1].t.since(w[0].t);
        if dt <= 0.0 {
            continue;
        }
        let omega = 0.5 * (w[0].gyro + w[1].gyro) - gyro_bias;
        let accel = 0.5 * (w[0].accel + w[1].accel) - accel_bias;
        let r_mid = p.delta_r.compose(&exp_map(&(omega * (0.5 * dt))));
        let acc = r_mid.apply(&accel);
        let rm_mid = r_mid.matrix();
        let da_dbg = -rm_mid * hat(&accel) * p.dr_dbg;

        p.dp_dbg += p.dv_dbg * dt + 0.5 * da_dbg * dt * dt;
        p.dp_dba += p.dv_dba * dt - 0.5 * rm_mid * dt * dt;
        p.dv_dbg += da_dbg * dt;
        p.dv_dba -= rm_mid * dt;
        let step = exp_map(&(omega * dt));
        p.dr_dbg = step.matrix().transpose() * p.dr_dbg - right_jacobian(&(omega * dt)) * dt;

        p.delta_p += p.delta_v * dt + 0.5 * acc * dt * dt;
        p.delta_v += acc * dt;
        p.delta_r = p.delta_r.compose(&step);
    }
    Ok(p)
}

impl ImuPreintegration {
    pub fn duration(&self) -> f64 {
        self.t_end.since(self.t_start)
    }

    /// First-order correction of the increments to new bias estimates.
    pub fn corrected(
        &self,
        gyro_bias: &Vector3<f64>,
        accel_bias: &Vector3<f64>,
    ) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        let dbg = gyro_bias - self.gyro_bias;
        let dba = accel_bias - self.accel_bias;
        let dr = self.delta_r.compose(&exp_map(&(self.dr_dbg * dbg)));
        let dv = self.delta_v + self.dv_dbg * dbg + self.dv_dba * dba;
        let dp = self.delta_p + self.dp_dbg * dbg + self.dp_dba * dba;
        (dr, dv, dp)
    }
}

/// Odometer increments compounded between two ranging epochs: relative
/// yaw and planar displacement in the start frame, standard signs.
#[derive(Debug, Clone)]
pub struct OdomPreintegration {
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub delta_yaw: f64,
    pub delta_d: Vector2<f64>,
    pub sample_count: usize,
}

pub fn preintegrate_odom(samples: &[OdomSample]) -> Result<OdomPreintegration, FactorError> {
    if samples.len() < 2 {
        return Err(FactorError::BlockTooShort);
    }
    let mut yaw = 0.0_f64;
    let mut d = Vector2::zeros();
    for w in samples.windows(2) {
        let h = w[1].t.since(w[0].t);
        if h <= 0.0 {
            continue;
        }
        let yaw0 = yaw;
        yaw += 0.5 * (w[0].angular_velocity + w[1].angular_velocity) * h;
        let f0 = Vector2::new(
            w[0].linear_velocity * yaw0.cos(),
            w[0].linear_velocity * yaw0.sin(),
        );
        let f1 = Vector2::new(
            w[1].linear_velocity * yaw.cos(),
            w[1].linear_velocity * yaw.sin(),
        );
        d += 0.5 * (f0 + f1) * h;
    }
    Ok(OdomPreintegration {
        t_start: samples[0].t,
        t_end: samples[samples.len() - 1].t,
        delta_yaw: yaw,
        delta_d: d,
        sample_count: samples.len(),
    })
}

/// Endpoint state the factor residuals consume, with the chain-rule
/// pieces back to the control points.
#[derive(Debug, Clone)]
pub struct EndpointLinearization {
    pub first_trans_cp: usize,
    pub first_rot_cp: usize,
    /// Non-cumulative weights of the four translation control points.
    pub weights: [f64; 4],
    pub weight_dots: [f64; 4],
    pub rotation: Rotation,
    /// Right-tangent Jacobians of the rotation w.r.t. the four rotation
    /// control points.
    pub rot_jacobians: [Matrix3<f64>; 4],
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

/// Pre-integrated IMU residual between two spline states:
/// `[Log(ΔRᵀ·R_aᵀR_b); R_aᵀ(v_b−v_a+gT)−Δv; R_aᵀ(p_b−p_a−v_aT+½gT²)−Δp]`.
#[derive(Debug, Clone)]
pub struct ImuResidual {
    pub r: [Vector3<f64>; 3],
    /// Per-endpoint Jacobian factors: d(residual row-block)/d(δa), d/d(δb)
    /// for rotation perturbations, and the translation coefficients.
    pub d_er_da: Matrix3<f64>,
    pub d_er_db: Matrix3<f64>,
    pub d_ev_da: Matrix3<f64>,
    pub d_ep_da: Matrix3<f64>,
    pub ra_t: Matrix3<f64>,
    pub dt: f64,
}

pub fn imu_residual(
    preint: &ImuPreintegration,
    gyro_bias: &Vector3<f64>,
    accel_bias: &Vector3<f64>,
    a: &EndpointLinearization,
    b: &EndpointLinearization,
) -> ImuResidual {
    let (delta_r, delta_v, delta_p) = preint.corrected(gyro_bias, accel_bias);
    let dt = preint.duration();
    let g = gravity_vector();
    let r_ab = a.rotation.between(&b.rotation);
    let e_r = log_map(&delta_r.inverse().compose(&r_ab));
    let u_v = b.velocity - a.velocity + g * dt;
    let u_p = b.position - a.position - a.velocity * dt + 0.5 * g * dt * dt;
    let ra_t = a.rotation.matrix().transpose();
    let e_v = ra_t * u_v - delta_v;
    let e_p = ra_t * u_p - delta_p;

    let jr_inv = right_jacobian_inv(&e_r);
    ImuResidual {
        r: [e_r, e_v, e_p],
        d_er_da: -jr_inv * r_ab.matrix().transpose(),
        d_er_db: jr_inv,
        d_ev_da: hat(&(ra_t * u_v)),
        d_ep_da: hat(&(ra_t * u_p)),
        ra_t,
        dt,
    }
}

/// Pre-integrated odometer residual between two spline states:
/// `[yaw(R_aᵀR_b) − Δψ; (R_aᵀ(p_b−p_a))_xy − Δd]`.
#[derive(Debug, Clone)]
pub struct OdomResidual {
    pub r: Vector3<f64>,
    pub d_yaw_da: Vector3<f64>,
    pub d_yaw_db: Vector3<f64>,
    pub d_ed_da: Matrix3<f64>,
    pub ra_t: Matrix3<f64>,
}

pub fn odom_residual(
    preint: &OdomPreintegration,
    a: &EndpointLinearization,
    b: &EndpointLinearization,
) -> OdomResidual {
    let r_ab = a.rotation.between(&b.rotation);
    let psi = log_map(&r_ab);
    let ra_t = a.rotation.matrix().transpose();
    let u = b.position - a.position;
    let d_body = ra_t * u;
    let r = Vector3::new(
        psi.z - preint.delta_yaw,
        d_body.x - preint.delta_d.x,
        d_body.y - preint.delta_d.y,
    );
    // yaw row: e₃ᵀ·δψ with δψ = Jr⁻¹(ψ)(δb − R_abᵀ δa)
    let jr_inv = right_jacobian_inv(&psi);
    let d_yaw_db = jr_inv.transpose() * Vector3::z();
    let d_yaw_da = -(r_ab.matrix() * d_yaw_db);
    OdomResidual {
        r,
        d_yaw_da,
        d_yaw_db,
        d_ed_da: hat(&d_body),
        ra_t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_imu(gyro: Vector3<f64>, accel: Vector3<f64>, duration: f64, n: usize) -> Vec<ImuSample> {
        (0..=n)
            .map(|i| ImuSample {
                t: Timestamp::new(duration * i as f64 / n as f64),
                gyro,
                accel,
            })
            .collect()
    }

    #[test]
    fn summed_residual_matches_terms() {
        let x = Vector3::zeros();
        let (sum, per) = va_range_residual(
            &x,
            &[
                (Vector3::new(3.0, 4.0, 0.0), 5.0),
                (Vector3::new(0.0, 2.0, 0.0), 2.1),
            ],
        );
        assert!((per[0] - 0.0).abs() < 1e-12);
        assert!((per[1] - 0.1).abs() < 1e-12);
        assert!((sum - 0.1).abs() < 1e-12);
    }

    #[test]
    fn stationary_preintegration_cancels_gravity_in_place() {
        // body at rest: the accelerometer measures +g in the body frame,
        // so the integrated increments carry g·T and ½g·T², which the
        // residual's gravity terms cancel against the spline state
        let samples = const_imu(Vector3::zeros(), gravity_vector(), 1.0, 100);
        let p = preintegrate_imu(&samples, &Vector3::zeros(), &Vector3::zeros()).unwrap();
        assert!((p.delta_v - gravity_vector()).norm() < 1e-9);
        assert!((p.delta_p - 0.5 * gravity_vector()).norm() < 1e-9);
        assert!(p.delta_r.angle_to(&Rotation::identity()) < 1e-12);
    }

    #[test]
    fn rotation_preintegration_matches_closed_form() {
        let samples = const_imu(Vector3::new(0.0, 0.0, 0.7), Vector3::zeros(), 2.0, 400);
        let p = preintegrate_imu(&samples, &Vector3::zeros(), &Vector3::zeros()).unwrap();
        assert!(p.delta_r.angle_to(&exp_map(&Vector3::new(0.0, 0.0, 1.4))) < 1e-9);
    }

    #[test]
    fn bias_jacobians_match_finite_differences() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(50);
        let samples: Vec<ImuSample> = (0..=60)
            .map(|i| ImuSample {
                t: Timestamp::new(i as f64 * 0.01),
                gyro: Vector3::new(
                    0.2 + 0.1 * (i as f64 * 0.1).sin(),
                    -0.1,
                    0.4 + rng.gen_range(-0.01..0.01),
                ),
                accel: Vector3::new(0.3, 0.1 * (i as f64 * 0.2).cos(), 9.7),
            })
            .collect();
        let bg = Vector3::new(0.01, -0.005, 0.002);
        let ba = Vector3::new(0.02, 0.01, -0.03);
        let p0 = preintegrate_imu(&samples, &bg, &ba).unwrap();
        let h = 1e-6;
        for axis in 0..3 {
            let mut dbg = Vector3::zeros();
            dbg[axis] = h;
            let p1 = preintegrate_imu(&samples, &(bg + dbg), &ba).unwrap();
            let (rc, vc, pc) = p0.corrected(&(bg + dbg), &ba);
            assert!(
                (log_map(&p1.delta_r.between(&rc))).norm() < 1e-8,
                "rotation bias jacobian axis {axis}"
            );
            assert!((p1.delta_v - vc).norm() < 1e-6);
            assert!((p1.delta_p - pc).norm() < 1e-6);

            let mut dba = Vector3::zeros();
            dba[axis] = h;
            let p2 = preintegrate_imu(&samples, &bg, &(ba + dba)).unwrap();
            let (_, vc2, pc2) = p0.corrected(&bg, &(ba + dba));
            assert!((p2.delta_v - vc2).norm() < 1e-9);
            assert!((p2.delta_p - pc2).norm() < 1e-9);
        }
    }

    #[test]
    fn odom_preintegration_straight_and_arc() {
        let straight: Vec<OdomSample> = (0..=100)
            .map(|i| OdomSample {
                t: Timestamp::new(i as f64 * 0.01),
                linear_velocity: 1.0,
                angular_velocity: 0.0,
            })
            .collect();
        let p = preintegrate_odom(&straight).unwrap();
        assert!((p.delta_yaw).abs() < 1e-12);
        assert!((p.delta_d - Vector2::new(1.0, 0.0)).norm() < 1e-12);

        // quarter circle: chord 2√2/π at unit speed over 1 s
        let arc: Vec<OdomSample> = (0..=2000)
            .map(|i| OdomSample {
                t: Timestamp::new(i as f64 * 0.0005),
                linear_velocity: 1.0,
                angular_velocity: std::f64::consts::FRAC_PI_2,
            })
            .collect();
        let p = preintegrate_odom(&arc).unwrap();
        assert!((p.delta_yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
        let expected = 2.0 * std::f64::consts::SQRT_2 / std::f64::consts::PI;
        assert!((p.delta_d.norm() - expected).abs() < 1e-3);
    }

    #[test]
    fn block_too_short_is_an_error() {
        let one = const_imu(Vector3::zeros(), Vector3::zeros(), 0.0, 0);
        assert!(preintegrate_imu(&one[..1], &Vector3::zeros(), &Vector3::zeros()).is_err());
        assert!(preintegrate_odom(&[]).is_err());
    }
}
