//! Sampled forward-invariance check of an ellipsoidal backup set, and the
//! robot's `P_b` synthesis built on it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use softmin_cbf::dynamics::rk4_step;
use softmin_cbf::ClosedLoopField;

use crate::lyapunov;
use crate::models::{Ellipsoid, RobotParams};

/// Violation threshold on the set margin.
pub const INVARIANCE_TOL: f64 = 1e-6;
/// Integration step of the backup-only simulations.
pub const CHECK_STEP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub samples: usize,
    pub horizon: f64,
    /// Smallest `level - (x - c)ᵀP(x - c)` seen over all runs and times.
    pub min_margin: f64,
    pub worst_start: Vec<f64>,
    pub pass: bool,
}

/// Draws `samples` starts in the set (half uniform inside, half on the
/// boundary), runs `u = u_b` for `horizon` seconds and records the smallest
/// margin. Passes iff that margin stays above `-1e-6`.
pub fn check_invariance(
    field: &ClosedLoopField,
    set: &Ellipsoid,
    samples: usize,
    horizon: f64,
    seed: u64,
) -> anyhow::Result<InvarianceReport> {
    anyhow::ensure!(samples >= 100, "invariance check needs at least 100 samples");
    anyhow::ensure!(horizon > 0.0, "invariance horizon must be positive");
    anyhow::ensure!(set.level > 0.0, "backup set level must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = sample_set(set, samples, &mut rng);

    let steps = (horizon / CHECK_STEP).ceil() as usize;
    let dt = horizon / steps as f64;
    let mut min_margin = f64::INFINITY;
    let mut worst_start = starts[0].clone();
    for x0 in &starts {
        let mut x = x0.clone();
        let mut run_min = set.margin(&x);
        for _ in 0..steps {
            x = rk4_step(|p| field.system.rate(p, &field.backup.control(p)), &x, dt);
            if !x.iter().all(|v| v.is_finite()) {
                run_min = f64::NEG_INFINITY;
                break;
            }
            run_min = run_min.min(set.margin(&x));
        }
        if run_min < min_margin {
            min_margin = run_min;
            worst_start = x0.clone();
        }
    }
    Ok(InvarianceReport {
        samples,
        horizon,
        min_margin,
        worst_start: worst_start.iter().copied().collect(),
        pass: min_margin >= -INVARIANCE_TOL,
    })
}

/// Half of the points uniform inside (by rejection from the bounding box),
/// half exactly on the boundary along Gaussian directions.
pub fn sample_set<R: Rng>(set: &Ellipsoid, samples: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let n = set.center.len();
    let half = set.half_widths();
    let mut out = Vec::with_capacity(samples);
    while out.len() < samples / 2 {
        let x = DVector::from_fn(n, |i, _| set.center[i] + half[i] * rng.gen_range(-1.0..=1.0));
        if set.margin(&x) >= 0.0 {
            out.push(x);
        }
    }
    while out.len() < samples {
        let d = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = d.dot(&(&set.p * &d));
        if q > 0.0 {
            out.push(&set.center + d * (set.level / q).sqrt());
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct RobotSynthesis {
    #[serde(skip)]
    pub p: DMatrix<f64>,
    pub residual: f64,
    pub min_eigenvalue: f64,
    pub c_b_requested: f64,
    pub c_b: f64,
    pub report: InvarianceReport,
}

/// `P_b` from `AᵀP + PA = -I` for the unsaturated closed loop, then a sampled
/// invariance check of `{h_b ≥ 0}` under the saturated backup control. If the
/// requested level fails, it is shrunk by bisection to the largest passing
/// level found.
pub fn synthesize_robot_pb(params: &RobotParams, samples: usize, horizon: f64, seed: u64) -> anyhow::Result<RobotSynthesis> {
    let a = params.closed_loop_matrix();
    let p = lyapunov::solve_lyapunov(&a)?;
    let residual = lyapunov::residual(&a, &p);
    let min_eigenvalue = SymmetricEigen::new(p.clone()).eigenvalues.min();

    let set = Ellipsoid { center: DVector::from_row_slice(&params.x_b), p: p.clone(), level: params.c_b };
    let bundle = crate::models::build_robot_with_set(params, set.clone(), 1.0)?;
    let mut report = check_invariance(&bundle.field, &set, samples, horizon, seed)?;
    let mut c_b = params.c_b;
    if !report.pass {
        let (mut lo, mut hi) = (0.0, params.c_b);
        let mut best = None;
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            let r = check_invariance(&bundle.field, &set.with_level(mid), samples, horizon, seed)?;
            if r.pass {
                lo = mid;
                best = Some((mid, r));
            } else {
                hi = mid;
            }
        }
        let (level, r) = best.ok_or_else(|| anyhow::anyhow!("no positive backup level passes the invariance check"))?;
        c_b = level;
        report = r;
    }
    Ok(RobotSynthesis { p, residual, min_eigenvalue, c_b_requested: params.c_b, c_b, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use softmin_cbf::{BackupPolicy, SystemModel};

    #[test]
    fn contractive_linear_system_passes() {
        let system = SystemModel::new(2, 2, |x: &DVector<f64>| -x, |_x: &DVector<f64>| DMatrix::identity(2, 2));
        let backup = BackupPolicy::new(2, |_x: &DVector<f64>| dvector![0.0, 0.0], |_x: &DVector<f64>| 0.0, |_x: &DVector<f64>| dvector![0.0, 0.0]);
        let field = ClosedLoopField::new(system, backup).unwrap();
        // P = I/2 solves the Lyapunov equation for A = -I.
        let set = Ellipsoid { center: dvector![0.0, 0.0], p: DMatrix::identity(2, 2) * 0.5, level: 1.0 };
        let r = check_invariance(&field, &set, 200, 5.0, 1).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn boundary_samples_lie_on_boundary() {
        let set = Ellipsoid { center: dvector![1.0, -1.0], p: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]), level: 0.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = sample_set(&set, 100, &mut rng);
        assert!(pts.iter().all(|x| set.margin(x) >= -1e-12));
        assert!(pts[50..].iter().all(|x| set.margin(x).abs() <= 1e-12));
    }

    #[test]
    fn robot_synthesis_keeps_requested_level() {
        let s = synthesize_robot_pb(&RobotParams::default(), 200, 10.0, 5).unwrap();
        assert!(s.residual <= 1e-10);
        assert!(s.min_eigenvalue > 0.0);
        assert!(s.report.pass);
        assert_eq!(s.c_b, 0.0034);
    }
}
