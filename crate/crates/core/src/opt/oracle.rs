//! Slow reference solvers used to cross-check the simplex and the active-set
//! QP. Only compiled for tests or with the `oracles` feature.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{AffineHalfspace, ControlPolytope, LinearMax};
use crate::error::{Error, Result};

const RANK_TOL: f64 = 1e-10;
const FEAS_TOL: f64 = 1e-10;
const LEVELS: usize = 3;

/// Maximizes `c·û` by checking every vertex of the polytope (all `m`-subsets
/// of rows solved as equalities).
pub fn vertex_enumeration_max(poly: &ControlPolytope, c: &DVector<f64>) -> Result<LinearMax> {
    let m = poly.dim();
    if c.len() != m {
        return Err(Error::DimensionMismatch { context: "linear functional", expected: m, actual: c.len() });
    }
    let mut best: Option<LinearMax> = None;
    for subset in subsets(poly.num_constraints(), m) {
        let Some(v) = intersection_point(poly.a(), poly.b(), &subset) else {
            continue;
        };
        if poly.max_violation(&v) > 1e-9 * (1.0 + poly.b().amax()) {
            continue;
        }
        let value = c.dot(&v);
        if best.as_ref().map_or(true, |b| value > b.value) {
            best = Some(LinearMax { value, argmax: v });
        }
    }
    best.ok_or(Error::EmptyPolytope)
}

/// Grid-search answer and the pitch of the finest grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub u: DVector<f64>,
    pub pitch: f64,
}

/// Nearest-point search on grids laid over every face of the feasible set
/// (vertices, edges, facets, interior), refined twice around the incumbent.
///
/// Gridding each face separately keeps the error at the pitch scale even when
/// the minimizer sits on the boundary. `grid_density` points per axis; the
/// first window covers the bounding box, later windows span ±3 pitches.
pub fn brute_force_qp_oracle(
    poly: &ControlPolytope,
    halfspace: &AffineHalfspace,
    u_d: &DVector<f64>,
    grid_density: usize,
) -> Result<OracleSolution> {
    let m = poly.dim();
    if m > 3 {
        return Err(Error::invalid("grid oracle supports at most three inputs"));
    }
    if grid_density < 3 {
        return Err(Error::invalid("grid density must be at least 3"));
    }
    let (g, h) = stacked(poly, halfspace);
    let rows = g.nrows();
    let scale = 1.0 + h.amax();
    let feasible = |u: &DVector<f64>| (&g * u - &h).max() <= FEAS_TOL * scale;

    let faces: Vec<Face> = (0..=m)
        .flat_map(|k| subsets(rows, k))
        .filter_map(|s| Face::new(&g, &h, &s))
        .collect();

    let support: Vec<(f64, f64)> = (0..m)
        .map(|k| {
            let mut c = DVector::zeros(m);
            c[k] = 1.0;
            let hi = poly.max_linear(&c).map(|r| r.value);
            c[k] = -1.0;
            let lo = poly.max_linear(&c).map(|r| -r.value);
            Ok((lo?, hi?))
        })
        .collect::<Result<_>>()?;
    let mut center = DVector::from_iterator(m, support.iter().map(|(l, u)| 0.5 * (l + u)));
    let mut half_width = 0.5 * support.iter().map(|(l, u)| (u - l).powi(2)).sum::<f64>().sqrt();
    half_width = half_width.max(1e-12);

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut pitch = 0.0;
    for _ in 0..LEVELS {
        pitch = 2.0 * half_width / (grid_density - 1) as f64;
        for face in &faces {
            let origin = face.project(&center);
            let d = face.basis.ncols();
            let mut idx = vec![0usize; d];
            loop {
                let mut u = origin.clone();
                for (axis, &i) in idx.iter().enumerate() {
                    let t = -half_width + pitch * i as f64;
                    u += face.basis.column(axis) * t;
                }
                if feasible(&u) {
                    let dist = (&u - u_d).norm_squared();
                    if best.as_ref().map_or(true, |(b, _)| dist < *b) {
                        best = Some((dist, u));
                    }
                }
                if !advance(&mut idx, grid_density) {
                    break;
                }
            }
        }
        let Some((_, incumbent)) = &best else {
            return Err(Error::Infeasible);
        };
        center = incumbent.clone();
        half_width = 3.0 * pitch;
    }
    let (_, u) = best.ok_or(Error::Infeasible)?;
    Ok(OracleSolution { u, pitch })
}

/// Affine hull `{u : G_S u = h_S}` of a candidate face.
struct Face {
    rows: DMatrix<f64>,
    rhs: DVector<f64>,
    gram_inv: DMatrix<f64>,
    basis: DMatrix<f64>,
}

impl Face {
    fn new(g: &DMatrix<f64>, h: &DVector<f64>, subset: &[usize]) -> Option<Face> {
        let m = g.ncols();
        let k = subset.len();
        let rows = DMatrix::from_fn(k, m, |i, j| g[(subset[i], j)]);
        let rhs = DVector::from_fn(k, |i, _| h[subset[i]]);
        let gram_inv = if k == 0 {
            DMatrix::zeros(0, 0)
        } else {
            let gram = &rows * rows.transpose();
            let eig = SymmetricEigen::new(gram.clone());
            let top = eig.eigenvalues.amax();
            if eig.eigenvalues.min() <= RANK_TOL * top.max(1.0) {
                return None;
            }
            gram.try_inverse()?
        };
        let normal = rows.transpose() * &rows;
        let eig = SymmetricEigen::new(normal);
        let top = eig.eigenvalues.amax().max(1.0);
        let null: Vec<usize> = (0..m).filter(|&j| eig.eigenvalues[j].abs() <= RANK_TOL * top).collect();
        let basis = DMatrix::from_fn(m, null.len(), |i, j| eig.eigenvectors[(i, null[j])]);
        Some(Face { rows, rhs, gram_inv, basis })
    }

    fn project(&self, p: &DVector<f64>) -> DVector<f64> {
        if self.rows.nrows() == 0 {
            return p.clone();
        }
        let r = &self.rows * p - &self.rhs;
        p - self.rows.transpose() * (&self.gram_inv * r)
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

fn intersection_point(a: &DMatrix<f64>, b: &DVector<f64>, subset: &[usize]) -> Option<DVector<f64>> {
    let m = a.ncols();
    let sub = DMatrix::from_fn(m, m, |i, j| a[(subset[i], j)]);
    let rhs = DVector::from_fn(m, |i, _| b[subset[i]]);
    let lu = sub.clone().lu();
    let det = lu.determinant();
    if det.abs() <= 1e-12 * sub.norm().powi(m as i32).max(1e-300) {
        return None;
    }
    lu.solve(&rhs)
}

/// All `k`-element subsets of `0..n` in lexicographic order.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

fn advance(idx: &mut [usize], density: usize) -> bool {
    for i in idx.iter_mut() {
        *i += 1;
        if *i < density {
            return true;
        }
        *i = 0;
    }
    false
}
