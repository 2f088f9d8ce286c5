//! Dense two-phase tableau simplex for `max cᵀu  s.t.  A·u ≤ b`, `u` free.
//!
//! The free variables are split as `u = u⁺ - u⁻` and every row gets a slack.
//! Rows with negative right-hand side are negated and receive an artificial
//! variable for phase one. Pivoting follows Bland's rule throughout.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-11;
const MAX_PIVOTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LpOutcome {
    Optimal { value: f64, point: DVector<f64> },
    Infeasible,
    Unbounded,
}

struct Tableau {
    /// Constraint rows, last column is the right-hand side.
    rows: Vec<Vec<f64>>,
    /// Reduced costs, last entry is minus the objective value.
    obj: Vec<f64>,
    basis: Vec<usize>,
    /// Columns that may enter the basis.
    allowed: Vec<bool>,
}

impl Tableau {
    fn width(&self) -> usize {
        self.obj.len() - 1
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.rows[row][col];
        for v in self.rows[row].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[row].clone();
        for (i, r) in self.rows.iter_mut().enumerate() {
            if i != row {
                let f = r[col];
                if f != 0.0 {
                    for (v, pv) in r.iter_mut().zip(&pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        let f = self.obj[col];
        if f != 0.0 {
            for (v, pv) in self.obj.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
        }
        self.basis[row] = col;
    }

    fn set_objective(&mut self, costs: &[f64]) {
        let w = self.width();
        self.obj = costs.to_vec();
        self.obj.push(0.0);
        for (i, &bv) in self.basis.iter().enumerate() {
            let cb = self.obj[bv];
            if cb != 0.0 {
                for j in 0..=w {
                    self.obj[j] -= cb * self.rows[i][j];
                }
            }
        }
    }

    /// Runs Bland-rule pivots until optimal. Returns `false` on unboundedness.
    fn optimize(&mut self) -> Result<bool> {
        let w = self.width();
        for _ in 0..MAX_PIVOTS {
            let entering = (0..w).find(|&j| self.allowed[j] && self.obj[j] > PIVOT_TOL);
            let Some(col) = entering else {
                return Ok(true);
            };
            let mut leave: Option<(usize, f64)> = None;
            for (i, r) in self.rows.iter().enumerate() {
                let a = r[col];
                if a > PIVOT_TOL {
                    let ratio = r[w] / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - PIVOT_TOL
                                || ((ratio - lr).abs() <= PIVOT_TOL && self.basis[i] < self.basis[li])
                            {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            match leave {
                Some((row, _)) => self.pivot(row, col),
                None => return Ok(false),
            }
        }
        Err(Error::IterationLimit { solver: "simplex", iterations: MAX_PIVOTS })
    }

    fn value(&self) -> f64 {
        -self.obj[self.width()]
    }
}

/// Maximizes `c·u` over `{u : A·u ≤ b}`.
pub(crate) fn maximize(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>) -> Result<LpOutcome> {
    let (r, m) = a.shape();
    let negative: Vec<usize> = (0..r).filter(|&i| b[i] < 0.0).collect();
    let n_art = negative.len();
    // Columns: u⁺ (m), u⁻ (m), slack (r), artificial (n_art).
    let slack0 = 2 * m;
    let art0 = slack0 + r;
    let width = art0 + n_art;

    let mut rows = Vec::with_capacity(r);
    let mut basis = Vec::with_capacity(r);
    let mut art_index = 0;
    for i in 0..r {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        let mut row = vec![0.0; width + 1];
        for j in 0..m {
            row[j] = sign * a[(i, j)];
            row[m + j] = -sign * a[(i, j)];
        }
        row[slack0 + i] = sign;
        row[width] = sign * b[i];
        if sign < 0.0 {
            row[art0 + art_index] = 1.0;
            basis.push(art0 + art_index);
            art_index += 1;
        } else {
            basis.push(slack0 + i);
        }
        rows.push(row);
    }

    let mut tab = Tableau {
        rows,
        obj: vec![0.0; width + 1],
        basis,
        allowed: vec![true; width],
    };

    if n_art > 0 {
        let mut phase1 = vec![0.0; width];
        for v in phase1.iter_mut().skip(art0) {
            *v = -1.0;
        }
        tab.set_objective(&phase1);
        tab.optimize()?;
        let scale = 1.0 + b.amax();
        if tab.value() < -1e-9 * scale {
            return Ok(LpOutcome::Infeasible);
        }
        // Drive remaining zero-level artificials out of the basis.
        let mut i = 0;
        while i < tab.rows.len() {
            if tab.basis[i] >= art0 {
                match (0..art0).find(|&j| tab.rows[i][j].abs() > PIVOT_TOL) {
                    Some(col) => tab.pivot(i, col),
                    None => {
                        tab.rows.remove(i);
                        tab.basis.remove(i);
                        continue;
                    }
                }
            }
            i += 1;
        }
        for j in art0..width {
            tab.allowed[j] = false;
        }
    }

    let mut costs = vec![0.0; width];
    for j in 0..m {
        costs[j] = c[j];
        costs[m + j] = -c[j];
    }
    tab.set_objective(&costs);
    if !tab.optimize()? {
        return Ok(LpOutcome::Unbounded);
    }

    let mut point = DVector::zeros(m);
    for (i, &bv) in tab.basis.iter().enumerate() {
        let v = tab.rows[i][width];
        if bv < m {
            point[bv] += v;
        } else if bv < 2 * m {
            point[bv - m] -= v;
        }
    }
    Ok(LpOutcome::Optimal { value: c.dot(&point), point })
}
