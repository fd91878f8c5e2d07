//! Cumulative cubic B-spline on SO(3).
//!
//! A span blends four control rotations as
//! `R(t) = C_0 · Π_{j=1..3} Exp(λ_j(t)·Ψ_j)` with
//! `Ψ_j = Log(C_{j−1}⁻¹ C_j)`. The body angular velocity and the
//! right-tangent Jacobians with respect to the control rotations follow
//! from the product rule with the right Jacobian of Exp.

use nalgebra::{Matrix3, Vector3};

use super::basis::{cumulative_basis, CumulativeBasis};
use super::knots::KnotVector;
use super::SplineError;
use crate::geom::{exp_map, log_map, right_jacobian, right_jacobian_inv, Rotation, Timestamp};

#[derive(Debug, Clone)]
pub struct RotationSpline {
    knots: KnotVector,
    control_points: Vec<Rotation>,
}

impl RotationSpline {
    pub fn new(knots: KnotVector, control_points: Vec<Rotation>) -> Result<Self, SplineError> {
        if control_points.len() != knots.control_point_count() {
            return Err(SplineError::ControlPointCount {
                expected: knots.control_point_count(),
                got: control_points.len(),
            });
        }
        Ok(RotationSpline {
            knots,
            control_points,
        })
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn control_points(&self) -> &[Rotation] {
        &self.control_points
    }

    pub fn control_points_mut(&mut self) -> &mut [Rotation] {
        &mut self.control_points
    }

    pub fn basis_at(&self, t: Timestamp) -> Result<CumulativeBasis, SplineError> {
        let s = self.knots.find_span(t)?;
        cumulative_basis(&self.knots, s, t)
    }

    fn segment(&self, basis: &CumulativeBasis) -> SegmentProducts {
        let i = basis.first_control_point();
        let c = &self.control_points;
        let psi = [
            log_map(&c[i].between(&c[i + 1])),
            log_map(&c[i + 1].between(&c[i + 2])),
            log_map(&c[i + 2].between(&c[i + 3])),
        ];
        let factors = [
            exp_map(&(basis.lambda[0] * psi[0])),
            exp_map(&(basis.lambda[1] * psi[1])),
            exp_map(&(basis.lambda[2] * psi[2])),
        ];
        SegmentProducts {
            first: i,
            psi,
            factors,
        }
    }

    /// Rotation at `t`.
    pub fn evaluate(&self, t: Timestamp) -> Result<Rotation, SplineError> {
        let basis = self.basis_at(t)?;
        Ok(self.evaluate_with_basis(&basis))
    }

    pub fn evaluate_with_basis(&self, basis: &CumulativeBasis) -> Rotation {
        let seg = self.segment(basis);
        let mut r = self.control_points[seg.first];
        for f in &seg.factors {
            r = r.compose(f);
        }
        r
    }

    /// Body-frame angular velocity `(Rᵀ Ṙ)ᵛ` at `t`, rad/s.
    pub fn angular_velocity(&self, t: Timestamp) -> Result<Vector3<f64>, SplineError> {
        let basis = self.basis_at(t)?;
        Ok(self.angular_velocity_with_basis(&basis))
    }

    pub fn angular_velocity_with_basis(&self, basis: &CumulativeBasis) -> Vector3<f64> {
        let seg = self.segment(basis);
        let ldot = basis.lambda_dot();
        // ω = Σ_j (Π_{l>j} A_l)ᵀ · λ̇_j · Jr(λ_j Ψ_j) · Ψ_j
        let mut omega = Vector3::zeros();
        for j in 0..3 {
            let wj = ldot[j] * (right_jacobian(&(basis.lambda[j] * seg.psi[j])) * seg.psi[j]);
            let mut carried = wj;
            for f in seg.factors.iter().skip(j + 1) {
                carried = f.apply_inverse(&carried);
            }
            omega += carried;
        }
        omega
    }

    /// Rotation at `t` together with the right-tangent Jacobians with
    /// respect to the four active control rotations: perturbing control
    /// point `first+m` by `Exp(δ_m)` on the right perturbs `R(t)` by
    /// `Exp(J_m δ_m)` on the right, to first order.
    pub fn evaluate_with_jacobians(
        &self,
        basis: &CumulativeBasis,
    ) -> (Rotation, [Matrix3<f64>; 4], usize) {
        let seg = self.segment(basis);
        let mut r = self.control_points[seg.first];
        for f in &seg.factors {
            r = r.compose(f);
        }

        // Suffix products P_j = Π_{l=j..3} A_l (1-indexed); P_4 = I.
        let mut suffix = [Matrix3::identity(); 4];
        for j in (0..3).rev() {
            suffix[j] = seg.factors[j].matrix() * suffix[j + 1];
        }

        let mut jac = [Matrix3::<f64>::zeros(); 4];
        // Direct factor C_0: δR += P_1ᵀ δ_0.
        jac[0] = suffix[0].transpose();
        // Factor A_j contributes P_{j+1}ᵀ · Jr(λ_jΨ_j)·λ_j · δΨ_j with
        // δΨ_j = Jr⁻¹(Ψ_j)(δ_j − D_jᵀ δ_{j−1}), D_j = Exp(Ψ_j).
        for j in 0..3 {
            let lam = basis.lambda[j];
            let front = suffix[j + 1].transpose()
                * (lam * right_jacobian(&(lam * seg.psi[j])))
                * right_jacobian_inv(&seg.psi[j]);
            let d = exp_map(&seg.psi[j]).matrix();
            jac[j + 1] += front;
            jac[j] -= front * d.transpose();
        }
        (r, jac, seg.first)
    }

    pub fn push(&mut self, knot: Timestamp, control_point: Rotation) -> Result<(), SplineError> {
        self.knots.push(knot)?;
        self.control_points.push(control_point);
        Ok(())
    }
}

struct SegmentProducts {
    first: usize,
    psi: [Vector3<f64>; 3],
    factors: [Rotation; 3],
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn uniform(n: usize, dt: f64) -> KnotVector {
        KnotVector::new((0..n).map(|i| Timestamp::new(i as f64 * dt)).collect()).unwrap()
    }

    fn random_rotation(rng: &mut StdRng, scale: f64) -> Rotation {
        exp_map(&Vector3::new(
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
        ))
    }

    fn random_spline(rng: &mut StdRng, n_ctrl: usize) -> RotationSpline {
        let mut t = 0.0;
        let mut ks = vec![Timestamp::new(0.0)];
        for _ in 0..(n_ctrl + 3) {
            t += rng.gen_range(0.2..1.2);
            ks.push(Timestamp::new(t));
        }
        // successive control rotations stay within a moderate angle so the
        // relative logs are well-conditioned
        let mut cps = vec![random_rotation(rng, 1.0)];
        for _ in 1..n_ctrl {
            let step = random_rotation(rng, 0.6);
            cps.push(cps.last().unwrap().compose(&step));
        }
        RotationSpline::new(KnotVector::new(ks).unwrap(), cps).unwrap()
    }

    #[test]
    fn identity_control_points_give_identity() {
        let s = RotationSpline::new(uniform(10, 1.0), vec![Rotation::identity(); 6]).unwrap();
        for i in 0..10 {
            let t = Timestamp::new(3.0 + 0.3 * i as f64);
            assert!(s.evaluate(t).unwrap().angle_to(&Rotation::identity()) < 1e-14);
            assert!(s.angular_velocity(t).unwrap().norm() < 1e-14);
        }
    }

    #[test]
    fn constant_rate_spin_is_reproduced() {
        // Control rotations sampled from a constant-rate yaw spin on
        // uniform knots reproduce the spin rate in the interior.
        let omega0 = 0.7;
        let dt = 0.5;
        let knots = uniform(12, dt);
        let cps: Vec<Rotation> = (0..8)
            .map(|m| {
                let g = (knots.raw()[m + 1] + knots.raw()[m + 2] + knots.raw()[m + 3]) / 3.0;
                exp_map(&Vector3::new(0.0, 0.0, omega0 * g))
            })
            .collect();
        let s = RotationSpline::new(knots, cps).unwrap();
        for i in 0..15 {
            let t = Timestamp::new(1.5 + i as f64 * 0.15);
            let w = s.angular_velocity(t).unwrap();
            assert!(
                (w - Vector3::new(0.0, 0.0, omega0)).norm() < 1e-6,
                "angular velocity {w:?} at {t:?}"
            );
        }
    }

    #[test]
    fn angular_velocity_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..40 {
            let s = random_spline(&mut rng, 8);
            let lo = s.knots().support_start();
            let hi = s.knots().support_end();
            let t = rng.gen_range((lo + 0.01)..(hi - 0.01));
            let h = 1e-5;
            let rm = s.evaluate(Timestamp::new(t - h)).unwrap();
            let rp = s.evaluate(Timestamp::new(t + h)).unwrap();
            // body rate ≈ Log(R(t−h)⁻¹ R(t+h)) / 2h
            let fd = log_map(&rm.between(&rp)) / (2.0 * h);
            let w = s.angular_velocity(Timestamp::new(t)).unwrap();
            assert!((w - fd).norm() < 1e-5, "{w:?} vs {fd:?}");
        }
    }

    #[test]
    fn control_point_jacobians_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(37);
        for _ in 0..25 {
            let s = random_spline(&mut rng, 8);
            let lo = s.knots().support_start();
            let hi = s.knots().support_end();
            let t = Timestamp::new(rng.gen_range((lo + 0.01)..(hi - 0.01)));
            let basis = s.basis_at(t).unwrap();
            let (r0, jac, first) = s.evaluate_with_jacobians(&basis);
            let h = 1e-6;
            for m in 0..4 {
                for axis in 0..3 {
                    let mut delta = Vector3::zeros();
                    delta[axis] = h;
                    let mut pert = s.clone();
                    pert.control_points_mut()[first + m] =
                        s.control_points()[first + m].compose(&exp_map(&delta));
                    let r1 = pert.evaluate(t).unwrap();
                    let fd = log_map(&r0.between(&r1)) / h;
                    let analytic = jac[m].column(axis);
                    assert!(
                        (fd - analytic).norm() < 1e-4 * (1.0 + fd.norm()),
                        "cp {m} axis {axis}: fd {fd:?} vs {analytic:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn rotation_continuity_at_interior_knots() {
        let mut rng = StdRng::seed_from_u64(41);
        let s = random_spline(&mut rng, 9);
        let n = s.knots().control_point_count();
        for span in 4..n {
            let k = Timestamp::new(s.knots().raw()[span]);
            let left = cumulative_basis(s.knots(), span - 1, k).unwrap();
            let right = cumulative_basis(s.knots(), span, k).unwrap();
            let rl = s.evaluate_with_basis(&left);
            let rr = s.evaluate_with_basis(&right);
            assert!(rl.angle_to(&rr) < 1e-9, "rotation jump at span {span}");
            let wl = s.angular_velocity_with_basis(&left);
            let wr = s.angular_velocity_with_basis(&right);
            assert!((wl - wr).norm() < 1e-9, "rate jump at span {span}");
        }
    }
}
