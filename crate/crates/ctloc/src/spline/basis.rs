//! Cumulative blending coefficients for cubic B-splines on arbitrary
//! non-decreasing knots.
//!
//! For a span `[t_s, t_{s+1})` the four active basis functions are cubic
//! polynomials in the normalized time `u = (t − t_s)/(t_{s+1} − t_s)`.
//! They are built by running the Cox–de Boor recurrence symbolically on
//! polynomial coefficients over the local knot window, then converted to
//! cumulative form by suffix-summing. On uniform knots this reproduces the
//! classical cumulative cubic matrix, which the tests pin down.

use super::knots::KnotVector;
use super::SplineError;

/// Cubic polynomial in `u`, lowest power first.
pub(crate) type Poly = [f64; 4];

fn poly_mul_affine(p: &Poly, a: f64, b: f64) -> Poly {
    // (a + b·u) · p; the product never exceeds degree 3 for order 4.
    let mut out = [0.0; 4];
    for (i, &c) in p.iter().enumerate() {
        out[i] += a * c;
        if i + 1 < 4 {
            out[i + 1] += b * c;
        }
    }
    out
}

fn poly_eval(p: &Poly, u: f64) -> f64 {
    ((p[3] * u + p[2]) * u + p[1]) * u + p[0]
}

fn poly_derivative(p: &Poly) -> Poly {
    [p[1], 2.0 * p[2], 3.0 * p[3], 0.0]
}

/// The four order-4 basis polynomials `B_{s−3+r}` (r = 0..3) restricted to
/// span `s`, as polynomials in `u`.
pub(crate) fn basis_polynomials(knots: &[f64], s: usize) -> [Poly; 4] {
    let delta = knots[s + 1] - knots[s];
    // level k holds B_{s−k+1+r, k} at index r
    let mut level: Vec<Poly> = vec![[1.0, 0.0, 0.0, 0.0]];
    for k in 2..=4usize {
        let mut next: Vec<Poly> = vec![[0.0; 4]; k];
        for (r, slot) in next.iter_mut().enumerate() {
            let m = s + 1 + r - k;
            let mut acc = [0.0; 4];
            if r >= 1 {
                let d = knots[m + k - 1] - knots[m];
                if d > 0.0 {
                    let t = poly_mul_affine(&level[r - 1], (knots[s] - knots[m]) / d, delta / d);
                    for i in 0..4 {
                        acc[i] += t[i];
                    }
                }
            }
            if r + 2 <= k {
                let d = knots[m + k] - knots[m + 1];
                if d > 0.0 {
                    let t =
                        poly_mul_affine(&level[r], (knots[m + k] - knots[s]) / d, -delta / d);
                    for i in 0..4 {
                        acc[i] += t[i];
                    }
                }
            }
            *slot = acc;
        }
        level = next;
    }
    [level[0], level[1], level[2], level[3]]
}

/// Cumulative blending coefficients λ_j(t) for one evaluable span.
///
/// `lambda[j−1]` multiplies the j-th control-point difference; the implied
/// non-cumulative weights sum to one and satisfy
/// `1 ≥ λ_1 ≥ λ_2 ≥ λ_3 ≥ 0` inside the span.
#[derive(Debug, Clone)]
pub struct CumulativeBasis {
    /// Knot span index `s`: the basis covers `[t_s, t_{s+1})` and blends
    /// control points `s−3 .. s`.
    pub segment: usize,
    /// Normalized time inside the span.
    pub u: f64,
    /// λ_1..λ_3 evaluated at `u`.
    pub lambda: [f64; 3],
    du_dt: f64,
    lambda_polys: [Poly; 3],
}

impl CumulativeBasis {
    /// First active control-point index (`segment − 3`).
    pub fn first_control_point(&self) -> usize {
        self.segment - 3
    }

    /// dλ_j/dt.
    pub fn lambda_dot(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for j in 0..3 {
            out[j] = poly_eval(&poly_derivative(&self.lambda_polys[j]), self.u) * self.du_dt;
        }
        out
    }

    /// d²λ_j/dt².
    pub fn lambda_ddot(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for j in 0..3 {
            let dd = poly_derivative(&poly_derivative(&self.lambda_polys[j]));
            out[j] = poly_eval(&dd, self.u) * self.du_dt * self.du_dt;
        }
        out
    }

    /// Non-cumulative weights of the four active control points.
    pub fn weights(&self) -> [f64; 4] {
        let [l1, l2, l3] = self.lambda;
        [1.0 - l1, l1 - l2, l2 - l3, l3]
    }

    /// Time derivatives of the non-cumulative weights.
    pub fn weight_dots(&self) -> [f64; 4] {
        let [d1, d2, d3] = self.lambda_dot();
        [-d1, d1 - d2, d2 - d3, d3]
    }

    /// Second time derivatives of the non-cumulative weights.
    pub fn weight_ddots(&self) -> [f64; 4] {
        let [d1, d2, d3] = self.lambda_ddot();
        [-d1, d1 - d2, d2 - d3, d3]
    }
}

/// Evaluate the cumulative blending coefficients of `knots` at `t` inside
/// span `segment`.
pub fn cumulative_basis(
    knots: &KnotVector,
    segment: usize,
    t: crate::geom::Timestamp,
) -> Result<CumulativeBasis, SplineError> {
    let k = knots.raw();
    if segment + 4 >= k.len() || segment < 3 {
        return Err(SplineError::OutOfSupport {
            t: t.seconds(),
            lo: knots.support_start(),
            hi: knots.support_end(),
        });
    }
    let (t0, t1) = (k[segment], k[segment + 1]);
    let delta = t1 - t0;
    if delta <= 0.0 {
        return Err(SplineError::DegenerateSpan { segment });
    }
    let ts = t.seconds();
    // Closed at the right end so the final knot is queryable.
    if ts < t0 || ts > t1 {
        return Err(SplineError::OutOfSupport {
            t: ts,
            lo: t0,
            hi: t1,
        });
    }
    let u = (ts - t0) / delta;
    let polys = basis_polynomials(k, segment);
    // Suffix sums convert the basis weights to cumulative coefficients.
    let mut lambda_polys = [[0.0; 4]; 3];
    for j in 1..=3 {
        let mut acc = [0.0; 4];
        for poly in polys.iter().skip(j) {
            for i in 0..4 {
                acc[i] += poly[i];
            }
        }
        lambda_polys[j - 1] = acc;
    }
    let lambda = [
        poly_eval(&lambda_polys[0], u),
        poly_eval(&lambda_polys[1], u),
        poly_eval(&lambda_polys[2], u),
    ];
    Ok(CumulativeBasis {
        segment,
        u,
        lambda,
        du_dt: 1.0 / delta,
        lambda_polys,
    })
}
