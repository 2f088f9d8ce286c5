//! Scalar building blocks: soft minimum, smooth saturation and p-norms.
//!
//! Everything here is evaluated in shifted form so that large sharpness values
//! (ρ in the thousands) and large p (p = 100) stay finite in double precision.

use crate::error::{Error, Result};

/// Sharpness ρ of the soft minimum. Larger values track the true minimum more
/// closely at the cost of steeper gradients near switching points.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Sharpness(f64);

impl Sharpness {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::invalid(format!("sharpness must be positive and finite, got {rho}")));
        }
        Ok(Sharpness(rho))
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

fn check_values(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("soft minimum of an empty list"));
    }
    let mut min = f64::INFINITY;
    for &z in values {
        if !z.is_finite() {
            return Err(Error::invalid(format!("soft minimum argument is not finite: {z}")));
        }
        min = min.min(z);
    }
    Ok(min)
}

/// `-(1/ρ)·log Σ exp(-ρ·z_i)`.
///
/// Computed as `z_min - (1/ρ)·log Σ exp(-ρ·(z_i - z_min))`; every exponent is
/// non-positive and at least one term equals one.
pub fn softmin(rho: Sharpness, values: &[f64]) -> Result<f64> {
    let min = check_values(values)?;
    if values.len() == 1 {
        return Ok(values[0]);
    }
    let rho = rho.get();
    let sum: f64 = values.iter().map(|&z| (-rho * (z - min)).exp()).sum();
    Ok(min - sum.ln() / rho)
}

/// Soft minimum together with its normalized weights
/// `w_i = exp(-ρ(z_i - z_min)) / Σ_j exp(-ρ(z_j - z_min))`.
///
/// The weights are the partial derivatives of the soft minimum with respect to
/// each argument; they are nonnegative and sum to one.
pub fn softmin_with_weights(rho: Sharpness, values: &[f64]) -> Result<(f64, Vec<f64>)> {
    let min = check_values(values)?;
    let rho = rho.get();
    let mut weights: Vec<f64> = values.iter().map(|&z| (-rho * (z - min)).exp()).collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    let value = if values.len() == 1 { values[0] } else { min - sum.ln() / rho };
    Ok((value, weights))
}

/// Smooth saturation `ū·tanh(a/ū)`: odd, strictly increasing, unit slope at the
/// origin and strictly inside `(-ū, ū)`.
#[inline]
pub fn csat(limit: f64, a: f64) -> f64 {
    debug_assert!(limit > 0.0);
    limit * (a / limit).tanh()
}

/// Derivative of [`csat`] with respect to its argument, `1 - tanh²(a/ū)`.
#[inline]
pub fn csat_derivative(limit: f64, a: f64) -> f64 {
    let t = (a / limit).tanh();
    1.0 - t * t
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0) || p.is_nan() {
        return Err(Error::invalid(format!("p-norm requires p >= 1, got {p}")));
    }
    Ok(())
}

/// `(Σ|x_i|^p)^{1/p}` evaluated as `M·(Σ(|x_i|/M)^p)^{1/p}` with `M = max|x_i|`.
pub fn pnorm(p: f64, x: &[f64]) -> Result<f64> {
    check_p(p)?;
    let max = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Ok(0.0);
    }
    if p.is_infinite() {
        return Ok(max);
    }
    let sum: f64 = x.iter().map(|v| (v.abs() / max).powf(p)).sum();
    Ok(max * sum.powf(1.0 / p))
}

/// Gradient of [`pnorm`]: `sign(x_i)·(|x_i|/‖x‖_p)^{p-1}`. Returns zeros at the
/// origin, where the norm is not differentiable.
pub fn pnorm_gradient(p: f64, x: &[f64]) -> Result<Vec<f64>> {
    let norm = pnorm(p, x)?;
    if norm == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    Ok(x
        .iter()
        .map(|&v| v.signum() * (v.abs() / norm).powf(p - 1.0))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rho(v: f64) -> Sharpness {
        Sharpness::new(v).unwrap()
    }

    #[test]
    fn softmin_equal_arguments() {
        let v = softmin(rho(100.0), &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(v, 1.0 - 2f64.ln() / 100.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.993069, epsilon = 1e-6);
    }

    #[test]
    fn softmin_single_argument_is_exact() {
        assert_eq!(softmin(rho(5.0), &[7.3]).unwrap(), 7.3);
    }

    #[test]
    fn softmin_two_values_matches_log1p() {
        // -ln(1 + e^{-10}) evaluated with log1p, which is exact to rounding here.
        let oracle = -(-10f64).exp().ln_1p();
        let v = softmin(rho(1.0), &[0.0, 10.0]).unwrap();
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(v, -4.5399e-5, epsilon = 1e-9);
    }

    #[test]
    fn softmin_rejects_bad_input() {
        assert!(softmin(rho(1.0), &[]).is_err());
        assert!(softmin(rho(1.0), &[1.0, f64::NAN]).is_err());
        assert!(softmin(rho(1.0), &[1.0, f64::INFINITY]).is_err());
        assert!(Sharpness::new(0.0).is_err());
        assert!(Sharpness::new(-1.0).is_err());
    }

    #[test]
    fn softmin_large_magnitudes_stay_finite() {
        let v = softmin(rho(1e4), &[1e6, -1e6, 3.0]).unwrap();
        assert!(v.is_finite());
        assert!(v < -1e6 + 1e-9);
        // The correction term is below one ulp of 1e6.
        let v = softmin(rho(1e4), &[1e6, 1e6 + 1.0]).unwrap();
        assert!(v.is_finite() && v <= 1e6);
    }

    #[test]
    fn weights_sum_to_one() {
        let (v, w) = softmin_with_weights(rho(100.0), &[0.3, 0.31, 2.0, -0.1]).unwrap();
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        assert_eq!(v, softmin(rho(100.0), &[0.3, 0.31, 2.0, -0.1]).unwrap());
    }

    #[test]
    fn softmin_converges_with_sharpness() {
        let z = [0.4, 0.41, 1.3, 0.9];
        let mut prev = f64::INFINITY;
        for k in 1..=6 {
            let gap = (softmin(rho(10f64.powi(k)), &z).unwrap() - 0.4).abs();
            assert!(gap <= prev);
            prev = gap;
        }
    }

    #[test]
    fn csat_examples() {
        assert_eq!(csat(1.5, 0.0), 0.0);
        let d = 1.5 - csat(1.5, 100.0);
        assert!(d >= 0.0 && d < 1e-12);
        assert_abs_diff_eq!(csat(1.0, 0.5), 0.462117, epsilon = 1e-6);
        assert_abs_diff_eq!(csat_derivative(1.5, 0.0), 1.0);
    }

    #[test]
    fn pnorm_examples() {
        assert_eq!(pnorm(100.0, &[0.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(pnorm(2.0, &[3.0, 4.0]).unwrap(), 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pnorm(100.0, &[1.0, 1.0]).unwrap(), 2f64.powf(0.01), epsilon = 1e-15);
        assert_abs_diff_eq!(pnorm(100.0, &[1.0, 1.0]).unwrap(), 1.006956, epsilon = 1e-6);
        assert!(pnorm(0.5, &[1.0]).is_err());
        // Raw |x|^100 would overflow here.
        assert_abs_diff_eq!(pnorm(100.0, &[1e5, 0.0]).unwrap(), 1e5, epsilon = 1e-9);
    }

    #[test]
    fn pnorm_gradient_matches_finite_differences() {
        let x = [0.7, -1.3];
        let g = pnorm_gradient(100.0, &x).unwrap();
        let d = 1e-6;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += d;
            xm[i] -= d;
            let fd = (pnorm(100.0, &xp).unwrap() - pnorm(100.0, &xm).unwrap()) / (2.0 * d);
            assert_abs_diff_eq!(g[i], fd, epsilon = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn fact_one_bounds(z in prop::collection::vec(-50.0..50.0f64, 2..40), r in 0.1..1e3f64) {
            let v = softmin(rho(r), &z).unwrap();
            let min = z.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(v < min || (v - min).abs() <= 1e-12 * min.abs().max(1.0));
            prop_assert!(min - (z.len() as f64).ln() / r <= v + 1e-12);
        }

        #[test]
        fn softmin_permutation_and_monotonicity(
            z in prop::collection::vec(-5.0..5.0f64, 2..10),
            bump in 0.0..1.0f64,
            idx in 0usize..10,
        ) {
            let r = rho(7.0);
            let v = softmin(r, &z).unwrap();
            let mut rev = z.clone();
            rev.reverse();
            prop_assert!((softmin(r, &rev).unwrap() - v).abs() <= 1e-12);
            let mut up = z.clone();
            let i = idx % up.len();
            up[i] += bump;
            prop_assert!(softmin(r, &up).unwrap() >= v - 1e-12);
        }

        #[test]
        fn csat_properties(a in -50.0..50.0f64, limit in 0.1..5.0f64) {
            let c = csat(limit, a);
            prop_assert!(c.abs() < limit || (c.abs() - limit).abs() < 1e-15);
            prop_assert_eq!(csat(limit, -a), -c);
            let slope = (csat(limit, a + 1e-6) - c) / 1e-6;
            prop_assert!(slope >= 0.0 && slope <= 1.0 + 1e-6);
        }

        #[test]
        fn pnorm_ordering(x in prop::collection::vec(-10.0..10.0f64, 1..6), p in 1.0..50.0f64, extra in 0.0..50.0f64) {
            let q = p + extra;
            prop_assert!(pnorm(q, &x).unwrap() <= pnorm(p, &x).unwrap() * (1.0 + 1e-12));
            let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let n = x.len() as f64;
            let gap = (pnorm(100.0, &x).unwrap() - max).abs();
            prop_assert!(gap <= max * (n.powf(0.01) - 1.0) + 1e-12);
        }
    }
}
