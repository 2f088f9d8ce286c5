//! Minimum-intervention QP: `min ‖û - u_d‖²` over the polytope intersected
//! with one halfspace, by primal active-set iteration.
//!
//! All constraints are handled in the form `g_i·û ≤ h_i`; the halfspace
//! `c·û + d ≥ 0` becomes the last row `-c·û ≤ d`.

use nalgebra::{DMatrix, DVector};

use super::{AffineHalfspace, ControlPolytope};
use crate::error::{Error, Result};

/// Accepted constraint violation of a returned point.
pub const CONSTRAINT_TOL: f64 = 1e-9;
/// Accepted stationarity / complementarity residual.
pub const KKT_TOL: f64 = 1e-8;
pub const MAX_ACTIVE_SET_ITERATIONS: usize = 50;

/// Below this norm the halfspace normal is treated as zero.
const DEGENERATE_NORMAL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    /// Multipliers for `A·û ≤ b` followed by the halfspace row; stationarity
    /// reads `(û - u_d) + Σ λ_i g_i = 0`.
    pub multipliers: DVector<f64>,
    pub iterations: usize,
}

impl QpSolution {
    /// Stationarity residual `‖(û - u_d) + Gᵀλ‖` for the stacked rows `G`.
    pub fn stationarity_residual(&self, poly: &ControlPolytope, halfspace: &AffineHalfspace, u_d: &DVector<f64>) -> f64 {
        let (g, _) = stacked(poly, halfspace);
        ((&self.u - u_d) + g.tr_mul(&self.multipliers)).norm()
    }

    /// `max_i |λ_i · (h_i - g_i·û)|`.
    pub fn complementarity_residual(&self, poly: &ControlPolytope, halfspace: &AffineHalfspace) -> f64 {
        let (g, h) = stacked(poly, halfspace);
        let slack = h - g * &self.u;
        slack.component_mul(&self.multipliers).amax()
    }
}

fn stacked(poly: &ControlPolytope, halfspace: &AffineHalfspace) -> (DMatrix<f64>, DVector<f64>) {
    let r = poly.num_constraints();
    let m = poly.dim();
    let mut g = DMatrix::zeros(r + 1, m);
    g.rows_mut(0, r).copy_from(poly.a());
    g.row_mut(r).copy_from(&(-&halfspace.c).transpose());
    let mut h = DVector::zeros(r + 1);
    h.rows_mut(0, r).copy_from(poly.b());
    h[r] = halfspace.d;
    (g, h)
}

/// Projects `u_d` onto `S_U ∩ {c·û + d ≥ 0}`.
///
/// Fails with [`Error::Infeasible`] when the intersection is empty. A
/// vanishing normal `c` reduces the halfspace to the sign test `d ≥ 0`.
pub fn solve_qp(poly: &ControlPolytope, halfspace: &AffineHalfspace, u_d: &DVector<f64>) -> Result<QpSolution> {
    let m = poly.dim();
    let r = poly.num_constraints();
    for (v, ctx) in [(&halfspace.c, "halfspace normal"), (u_d, "desired control")] {
        if v.len() != m {
            return Err(Error::DimensionMismatch { context: ctx, expected: m, actual: v.len() });
        }
    }
    if u_d.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("desired control is not finite"));
    }

    let (g, h) = stacked(poly, halfspace);
    let degenerate = halfspace.c.norm() <= DEGENERATE_NORMAL;
    if degenerate && halfspace.d < -CONSTRAINT_TOL {
        return Err(Error::Infeasible);
    }
    // Rows taking part in the iteration.
    let rows: Vec<usize> = if degenerate { (0..r).collect() } else { (0..=r).collect() };

    let feasible = |u: &DVector<f64>| rows.iter().all(|&i| g.row(i).dot(&u.transpose()) <= h[i]);
    if feasible(u_d) {
        return Ok(QpSolution { u: u_d.clone(), multipliers: DVector::zeros(r + 1), iterations: 0 });
    }

    let mut x = if degenerate {
        poly.feasible_point().clone()
    } else {
        let start = poly.max_linear(&halfspace.c)?;
        if start.value + halfspace.d < -CONSTRAINT_TOL {
            return Err(Error::Infeasible);
        }
        start.argmax
    };

    let mut working: Vec<usize> = Vec::new();
    for iter in 1..=MAX_ACTIVE_SET_ITERATIONS {
        let residual = &x - u_d;
        let (step, lambda) = equality_step(&g, &working, &residual)?;

        if step.norm() <= 1e-13 * (1.0 + x.norm()) {
            let most_negative = lambda
                .iter()
                .enumerate()
                .filter(|(_, l)| **l < -1e-13)
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k);
            match most_negative {
                None => {
                    let mut multipliers = DVector::zeros(r + 1);
                    for (k, &row) in working.iter().enumerate() {
                        multipliers[row] = lambda[k].max(0.0);
                    }
                    return Ok(QpSolution { u: x, multipliers, iterations: iter });
                }
                Some(k) => {
                    working.remove(k);
                }
            }
            continue;
        }

        let mut alpha = 1.0;
        let mut blocking = None;
        for &i in &rows {
            if working.contains(&i) {
                continue;
            }
            let gi = g.row(i);
            let rate = gi.dot(&step.transpose());
            if rate > 1e-14 {
                let gap = (h[i] - gi.dot(&x.transpose())).max(0.0);
                let a = gap / rate;
                if a < alpha {
                    alpha = a;
                    blocking = Some(i);
                }
            }
        }
        x += step * alpha;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    Err(Error::IterationLimit { solver: "active-set QP", iterations: MAX_ACTIVE_SET_ITERATIONS })
}

/// Minimizes `½‖r + p‖²` subject to `g_i·p = 0` for the working rows.
/// Returns the step `p` and the working-set multipliers `λ` with
/// `p + r + G_Wᵀλ = 0`.
fn equality_step(g: &DMatrix<f64>, working: &[usize], residual: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if working.is_empty() {
        return Ok((-residual, DVector::zeros(0)));
    }
    let m = g.ncols();
    let gw = DMatrix::from_fn(working.len(), m, |i, j| g[(working[i], j)]);
    let gram = &gw * gw.transpose();
    let rhs = -(&gw * residual);
    let lambda = gram
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InternalContract("working set became linearly dependent".into()))?;
    let step = -residual - gw.tr_mul(&lambda);
    Ok((step, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    fn half(c: DVector<f64>, d: f64) -> AffineHalfspace {
        AffineHalfspace::new(c, d).unwrap()
    }

    #[test]
    fn interior_desired_control_is_returned_exactly() {
        let poly = ControlPolytope::symmetric_box(1.0, 2).unwrap();
        let ud = dvector![0.3, -0.2];
        let sol = solve_qp(&poly, &half(dvector![1.0, 0.0], 5.0), &ud).unwrap();
        assert_eq!(sol.u, ud);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn one_dimensional_projection() {
        let poly = ControlPolytope::symmetric_box(1.5, 1).unwrap();
        // û ≥ 0.5
        let hs = half(dvector![1.0], -0.5);
        let sol = solve_qp(&poly, &hs, &dvector![0.0]).unwrap();
        assert_abs_diff_eq!(sol.u[0], 0.5, epsilon = 1e-12);
        assert!(sol.stationarity_residual(&poly, &hs, &dvector![0.0]) <= KKT_TOL);
    }

    #[test]
    fn projection_onto_diagonal_halfspace() {
        let poly = ControlPolytope::symmetric_box(1.0, 2).unwrap();
        let hs = half(dvector![1.0, 1.0], -1.0);
        let ud = dvector![0.0, 0.0];
        let sol = solve_qp(&poly, &hs, &ud).unwrap();
        assert_abs_diff_eq!(sol.u[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.u[1], 0.5, epsilon = 1e-12);
        assert!(sol.stationarity_residual(&poly, &hs, &ud) <= KKT_TOL);
        assert!(sol.complementarity_residual(&poly, &hs) <= KKT_TOL);
        assert_abs_diff_eq!(sol.multipliers[4], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn box_corner_projection() {
        let poly = ControlPolytope::symmetric_box(1.0, 2).unwrap();
        let hs = half(dvector![1.0, 0.0], 10.0);
        let ud = dvector![3.0, -4.0];
        let sol = solve_qp(&poly, &hs, &ud).unwrap();
        assert_abs_diff_eq!(sol.u[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.u[1], -1.0, epsilon = 1e-12);
        assert!(sol.stationarity_residual(&poly, &hs, &ud) <= KKT_TOL);
    }

    #[test]
    fn infeasible_intersection() {
        let poly = ControlPolytope::symmetric_box(1.0, 2).unwrap();
        let hs = half(dvector![1.0, 1.0], -3.0);
        assert_eq!(solve_qp(&poly, &hs, &dvector![0.0, 0.0]).unwrap_err(), Error::Infeasible);
    }

    #[test]
    fn degenerate_normal_reduces_to_polytope_projection() {
        let poly = ControlPolytope::symmetric_box(1.0, 2).unwrap();
        let sol = solve_qp(&poly, &half(dvector![0.0, 0.0], 0.2), &dvector![2.0, 0.5]).unwrap();
        assert_abs_diff_eq!(sol.u[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.u[1], 0.5, epsilon = 1e-12);
        assert_eq!(
            solve_qp(&poly, &half(dvector![0.0, 0.0], -0.2), &dvector![2.0, 0.5]).unwrap_err(),
            Error::Infeasible
        );
    }

    #[test]
    fn optimality_against_random_feasible_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let poly = ControlPolytope::symmetric_box(1.0, 2).unwrap();
        let hs = half(dvector![0.7, -1.2], -0.4);
        let ud = dvector![-0.8, 0.9];
        let sol = solve_qp(&poly, &hs, &ud).unwrap();
        let best = (&sol.u - &ud).norm();
        let mut checked = 0;
        while checked < 1000 {
            let u = dvector![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            if hs.value(&u) >= 0.0 {
                assert!((&u - &ud).norm() >= best - 1e-9);
                checked += 1;
            }
        }
    }
}
