//! Small dense solvers over the admissible-control polytope
//! `S_U = {u : A_u·u ≤ b_u}`.
//!
//! - [`ControlPolytope::max_linear`] maximizes a linear functional (box fast
//!   path, dense simplex otherwise).
//! - [`solve_qp`] projects a desired control onto the polytope intersected with
//!   one affine halfspace, using a primal active-set iteration.

#[cfg(any(test, feature = "oracles"))]
pub mod oracle;
mod qp;
mod simplex;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use simplex::LpOutcome;

pub use qp::{solve_qp, QpSolution, CONSTRAINT_TOL, KKT_TOL, MAX_ACTIVE_SET_ITERATIONS};

/// Convex, bounded, nonempty polytope `{u : A·u ≤ b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPolytope {
    a: DMatrix<f64>,
    b: DVector<f64>,
    /// Per-axis `(lo, hi)` when the rows encode exactly an axis-aligned box.
    bounds: Option<(DVector<f64>, DVector<f64>)>,
    feasible_point: DVector<f64>,
}

/// Result of [`ControlPolytope::max_linear`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMax {
    pub value: f64,
    pub argmax: DVector<f64>,
}

/// `{û : c·û + d ≥ 0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineHalfspace {
    pub c: DVector<f64>,
    pub d: f64,
}

impl AffineHalfspace {
    pub fn new(c: DVector<f64>, d: f64) -> Result<Self> {
        if c.iter().any(|v| !v.is_finite()) || !d.is_finite() {
            return Err(Error::invalid("halfspace coefficients must be finite"));
        }
        Ok(AffineHalfspace { c, d })
    }

    pub fn value(&self, u: &DVector<f64>) -> f64 {
        self.c.dot(u) + self.d
    }
}

impl ControlPolytope {
    /// Builds the polytope, verifying nonemptiness with a phase-one LP and
    /// boundedness with `2m` support LPs.
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let (r, m) = a.shape();
        if m == 0 {
            return Err(Error::invalid("control dimension must be positive"));
        }
        if b.len() != r {
            return Err(Error::DimensionMismatch { context: "polytope offsets", expected: r, actual: b.len() });
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("polytope data must be finite"));
        }

        let mut lo = DVector::zeros(m);
        let mut hi = DVector::zeros(m);
        let mut feasible_point = None;
        for axis in 0..m {
            for (sign, out) in [(1.0, &mut hi), (-1.0, &mut lo)] {
                let mut c = DVector::zeros(m);
                c[axis] = sign;
                match simplex::maximize(&a, &b, &c)? {
                    LpOutcome::Optimal { value, point } => {
                        out[axis] = sign * value;
                        feasible_point.get_or_insert(point);
                    }
                    LpOutcome::Infeasible => return Err(Error::EmptyPolytope),
                    LpOutcome::Unbounded => return Err(Error::UnboundedPolytope { axis }),
                }
            }
        }
        let feasible_point = feasible_point.expect("m > 0 support problems were solved");
        let bounds = detect_box(&a, &b).filter(|(blo, bhi)| {
            // Only trust the box form if it agrees with the support values.
            (blo - &lo).amax() <= 1e-12 * (1.0 + lo.amax()) && (bhi - &hi).amax() <= 1e-12 * (1.0 + hi.amax())
        });
        Ok(ControlPolytope { a, b, bounds, feasible_point })
    }

    /// Axis-aligned box `lo ≤ u ≤ hi`.
    pub fn from_box(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        let m = lo.len();
        if hi.len() != m {
            return Err(Error::DimensionMismatch { context: "box bounds", expected: m, actual: hi.len() });
        }
        if m == 0 {
            return Err(Error::invalid("control dimension must be positive"));
        }
        if lo.iter().chain(hi.iter()).any(|v| !v.is_finite()) {
            return Err(Error::UnboundedPolytope { axis: 0 });
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
            return Err(Error::EmptyPolytope);
        }
        let mut a = DMatrix::zeros(2 * m, m);
        let mut b = DVector::zeros(2 * m);
        for k in 0..m {
            a[(2 * k, k)] = 1.0;
            b[2 * k] = hi[k];
            a[(2 * k + 1, k)] = -1.0;
            b[2 * k + 1] = -lo[k];
        }
        let feasible_point = (&lo + &hi) * 0.5;
        Ok(ControlPolytope { a, b, bounds: Some((lo, hi)), feasible_point })
    }

    /// `[-limit, limit]^m`.
    pub fn symmetric_box(limit: f64, m: usize) -> Result<Self> {
        Self::from_box(DVector::from_element(m, -limit), DVector::from_element(m, limit))
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_constraints(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn box_bounds(&self) -> Option<(&DVector<f64>, &DVector<f64>)> {
        self.bounds.as_ref().map(|(l, h)| (l, h))
    }

    pub fn feasible_point(&self) -> &DVector<f64> {
        &self.feasible_point
    }

    /// `max_i (A·u - b)_i`, negative inside.
    pub fn max_violation(&self, u: &DVector<f64>) -> f64 {
        (&self.a * u - &self.b).max()
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        self.max_violation(u) <= tol
    }

    /// Maximum of `c·û` over the polytope and one maximizer.
    pub fn max_linear(&self, c: &DVector<f64>) -> Result<LinearMax> {
        self.check_dim(c)?;
        match &self.bounds {
            Some((lo, hi)) => {
                let mut argmax = DVector::zeros(self.dim());
                let mut value = 0.0;
                for k in 0..self.dim() {
                    argmax[k] = if c[k] > 0.0 {
                        hi[k]
                    } else if c[k] < 0.0 {
                        lo[k]
                    } else {
                        0.5 * (lo[k] + hi[k])
                    };
                    value += c[k] * argmax[k];
                }
                Ok(LinearMax { value, argmax })
            }
            None => self.max_linear_simplex(c),
        }
    }

    /// General path of [`max_linear`](Self::max_linear), bypassing the box shortcut.
    pub fn max_linear_simplex(&self, c: &DVector<f64>) -> Result<LinearMax> {
        self.check_dim(c)?;
        if c.iter().all(|v| *v == 0.0) {
            return Ok(LinearMax { value: 0.0, argmax: self.feasible_point.clone() });
        }
        match simplex::maximize(&self.a, &self.b, c)? {
            LpOutcome::Optimal { value, point } => Ok(LinearMax { value, argmax: point }),
            LpOutcome::Infeasible => Err(Error::InternalContract("polytope became empty".into())),
            LpOutcome::Unbounded => Err(Error::InternalContract("polytope became unbounded".into())),
        }
    }

    fn check_dim(&self, c: &DVector<f64>) -> Result<()> {
        if c.len() != self.dim() {
            return Err(Error::DimensionMismatch { context: "linear functional", expected: self.dim(), actual: c.len() });
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("linear functional is not finite"));
        }
        Ok(())
    }
}

/// Recovers `(lo, hi)` if every row has exactly one nonzero and each axis has
/// both an upper and a lower row.
fn detect_box(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = a.ncols();
    let mut lo = DVector::from_element(m, f64::NEG_INFINITY);
    let mut hi = DVector::from_element(m, f64::INFINITY);
    for i in 0..a.nrows() {
        let row = a.row(i);
        let nz: Vec<usize> = (0..m).filter(|&k| row[k] != 0.0).collect();
        if nz.len() != 1 {
            return None;
        }
        let k = nz[0];
        let bound = b[i] / row[k];
        if row[k] > 0.0 {
            hi[k] = hi[k].min(bound);
        } else {
            lo[k] = lo[k].max(bound);
        }
    }
    if lo.iter().chain(hi.iter()).all(|v| v.is_finite()) {
        Some((lo, hi))
    } else {
        None
    }
}
