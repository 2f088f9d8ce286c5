//! Plant and backup-policy descriptions, and RK4 propagation of the backup
//! flow `φ(x, τ)` together with its sensitivity `Q(x, τ) = ∂φ/∂x`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type VectorField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
/// One `n×n` Jacobian per column of the input matrix.
pub type ColumnJacobians = Arc<dyn Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>;

/// Predicted states with norm above this are treated as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e9;

/// Control-affine plant `ẋ = f(x) + g(x)·u`.
#[derive(Clone)]
pub struct SystemModel {
    n: usize,
    m: usize,
    drift: VectorField,
    input: MatrixField,
    drift_jacobian: Option<MatrixField>,
    input_jacobian: Option<ColumnJacobians>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("analytic", &self.has_analytic_jacobians())
            .finish()
    }
}

impl SystemModel {
    pub fn new<F, G>(n: usize, m: usize, drift: F, input: G) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        SystemModel {
            n,
            m,
            drift: Arc::new(drift),
            input: Arc::new(input),
            drift_jacobian: None,
            input_jacobian: None,
        }
    }

    /// Attach `∂f/∂x` and `∂g_j/∂x` for each input column `j`.
    pub fn with_jacobians<JF, JG>(mut self, drift_jacobian: JF, input_jacobian: JG) -> Self
    where
        JF: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        JG: Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    {
        self.drift_jacobian = Some(Arc::new(drift_jacobian));
        self.input_jacobian = Some(Arc::new(input_jacobian));
        self
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.drift_jacobian.is_some() && self.input_jacobian.is_some()
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }

    pub fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.input)(x)
    }

    /// `f(x) + g(x)·u`.
    pub fn rate(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut dx = self.drift(x);
        dx.gemv(1.0, &self.input_matrix(x), u, 1.0);
        dx
    }

    pub(crate) fn check_state(&self, x: &DVector<f64>, context: &'static str) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.n,
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("{context}: state is not finite")));
        }
        Ok(())
    }
}

/// Backup controller `u_b` with its backup safe set `{x : h_b(x) ≥ 0}`.
#[derive(Clone)]
pub struct BackupPolicy {
    m: usize,
    control: VectorField,
    control_jacobian: Option<MatrixField>,
    barrier: ScalarField,
    barrier_gradient: VectorField,
}

impl fmt::Debug for BackupPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackupPolicy")
            .field("m", &self.m)
            .field("analytic", &self.control_jacobian.is_some())
            .finish()
    }
}

impl BackupPolicy {
    pub fn new<U, H, DH>(m: usize, control: U, barrier: H, barrier_gradient: DH) -> Self
    where
        U: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        H: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        DH: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        BackupPolicy {
            m,
            control: Arc::new(control),
            control_jacobian: None,
            barrier: Arc::new(barrier),
            barrier_gradient: Arc::new(barrier_gradient),
        }
    }

    /// Attach `∂u_b/∂x` (an `m×n` matrix).
    pub fn with_control_jacobian<J>(mut self, jacobian: J) -> Self
    where
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.control_jacobian = Some(Arc::new(jacobian));
        self
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.control)(x)
    }

    pub fn barrier(&self, x: &DVector<f64>) -> f64 {
        (self.barrier)(x)
    }

    pub fn barrier_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.barrier_gradient)(x)
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.control_jacobian.is_some()
    }
}

/// Closed-loop field under the backup control, `f̃(x) = f(x) + g(x)·u_b(x)`.
#[derive(Debug, Clone)]
pub struct ClosedLoopField {
    pub system: SystemModel,
    pub backup: BackupPolicy,
}

impl ClosedLoopField {
    pub fn new(system: SystemModel, backup: BackupPolicy) -> Result<Self> {
        if system.input_dim() != backup.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "backup control",
                expected: system.input_dim(),
                actual: backup.input_dim(),
            });
        }
        Ok(ClosedLoopField { system, backup })
    }

    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    /// Unchecked evaluation used on the hot path.
    pub(crate) fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        self.system.rate(x, &self.backup.control(x))
    }

    /// `f(x) + g(x)·u_b(x)`, with dimension checks on inputs and outputs.
    pub fn ftilde(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.system.check_state(x, "ftilde")?;
        let n = self.state_dim();
        let m = self.system.input_dim();
        let drift = self.system.drift(x);
        let g = self.system.input_matrix(x);
        let u = self.backup.control(x);
        if drift.len() != n {
            return Err(Error::DimensionMismatch { context: "drift output", expected: n, actual: drift.len() });
        }
        if g.nrows() != n || g.ncols() != m {
            return Err(Error::DimensionMismatch { context: "input matrix columns", expected: m, actual: g.ncols() });
        }
        if u.len() != m {
            return Err(Error::DimensionMismatch { context: "backup control output", expected: m, actual: u.len() });
        }
        Ok(drift + g * u)
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.system.has_analytic_jacobians() && self.backup.has_analytic_jacobian()
    }

    /// `∂f̃/∂x`: chain rule when every Jacobian is supplied, central
    /// differences otherwise.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.system.check_state(x, "jacobian_ftilde")?;
        Ok(self.jacobian_unchecked(x))
    }

    pub(crate) fn jacobian_unchecked(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self.analytic_jacobian(x) {
            Some(j) => j,
            None => self.finite_difference_jacobian(x),
        }
    }

    /// `f′(x) + Σ_j g_j′(x)·u_b,j(x) + g(x)·u_b′(x)`, if all parts are known.
    pub fn analytic_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let jf = self.system.drift_jacobian.as_ref()?;
        let jg = self.system.input_jacobian.as_ref()?;
        let ju = self.backup.control_jacobian.as_ref()?;
        let u = self.backup.control(x);
        let mut jac = jf(x);
        for (col_jac, uj) in jg(x).iter().zip(u.iter()) {
            if *uj != 0.0 {
                jac += col_jac * *uj;
            }
        }
        jac += self.system.input_matrix(x) * ju(x);
        Some(jac)
    }

    /// Central differences with step `1e-6·max(1, |x_i|)`.
    pub fn finite_difference_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut jac = DMatrix::zeros(n, n);
        let mut probe = x.clone();
        for i in 0..n {
            let step = 1e-6 * x[i].abs().max(1.0);
            probe[i] = x[i] + step;
            let plus = self.eval(&probe);
            probe[i] = x[i] - step;
            let minus = self.eval(&probe);
            probe[i] = x[i];
            jac.set_column(i, &((plus - minus) / (2.0 * step)));
        }
        jac
    }
}

/// Backup flow sampled at `i·T_s`, `i = 0..=N`.
#[derive(Debug, Clone)]
pub struct FlowTable {
    pub states: Vec<DVector<f64>>,
    /// Empty when propagated without sensitivities.
    pub sensitivities: Vec<DMatrix<f64>>,
    pub times: Vec<f64>,
}

impl FlowTable {
    pub fn horizon_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn terminal_state(&self) -> &DVector<f64> {
        self.states.last().expect("flow table holds at least the initial state")
    }

    pub fn has_sensitivities(&self) -> bool {
        !self.sensitivities.is_empty()
    }
}

/// One classical RK4 step of `ẋ = rhs(x)`.
pub fn rk4_step<F>(rhs: F, x: &DVector<f64>, dt: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let k1 = rhs(x);
    let k2 = rhs(&(x + &k1 * (0.5 * dt)));
    let k3 = rhs(&(x + &k2 * (0.5 * dt)));
    let k4 = rhs(&(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

fn rk4_joint_step(
    field: &ClosedLoopField,
    phi: &DVector<f64>,
    q: &DMatrix<f64>,
    dt: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let stage = |p: &DVector<f64>, s: &DMatrix<f64>| (field.eval(p), field.jacobian_unchecked(p) * s);

    let (k1, l1) = stage(phi, q);
    let (k2, l2) = stage(&(phi + &k1 * (0.5 * dt)), &(q + &l1 * (0.5 * dt)));
    let (k3, l3) = stage(&(phi + &k2 * (0.5 * dt)), &(q + &l2 * (0.5 * dt)));
    let (k4, l4) = stage(&(phi + &k3 * dt), &(q + &l3 * dt));

    let phi_next = phi + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let q_next = q + (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (dt / 6.0);
    (phi_next, q_next)
}

fn check_grid(samples: usize, sample_time: f64, substeps: usize) -> Result<()> {
    if samples == 0 {
        return Err(Error::invalid("horizon must contain at least one sample"));
    }
    if !(sample_time.is_finite() && sample_time > 0.0) {
        return Err(Error::invalid(format!("sample time must be positive, got {sample_time}")));
    }
    if substeps == 0 {
        return Err(Error::invalid("substeps must be at least 1"));
    }
    Ok(())
}

fn diverged(x: &DVector<f64>) -> bool {
    x.iter().any(|v| !v.is_finite()) || x.norm() > DIVERGENCE_BOUND
}

/// Integrates `dφ/dτ = f̃(φ)` and `dQ/dτ = f̃′(φ)·Q` from `(x, I)` with
/// `substeps` RK4 steps per sample interval and records both at every sample.
pub fn propagate_flow(
    field: &ClosedLoopField,
    x: &DVector<f64>,
    samples: usize,
    sample_time: f64,
    substeps: usize,
) -> Result<FlowTable> {
    field.system.check_state(x, "propagate_flow")?;
    check_grid(samples, sample_time, substeps)?;
    let n = x.len();
    let dt = sample_time / substeps as f64;

    let mut states = Vec::with_capacity(samples + 1);
    let mut sensitivities = Vec::with_capacity(samples + 1);
    let mut times = Vec::with_capacity(samples + 1);
    let mut phi = x.clone();
    let mut q = DMatrix::identity(n, n);
    states.push(phi.clone());
    sensitivities.push(q.clone());
    times.push(0.0);

    for i in 1..=samples {
        for _ in 0..substeps {
            let (p, s) = rk4_joint_step(field, &phi, &q, dt);
            phi = p;
            q = s;
        }
        if diverged(&phi) || q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { sample: i, time: i as f64 * sample_time });
        }
        states.push(phi.clone());
        sensitivities.push(q.clone());
        times.push(i as f64 * sample_time);
    }
    Ok(FlowTable { states, sensitivities, times })
}

/// Same grid as [`propagate_flow`] without the sensitivity matrices.
pub fn propagate_states(
    field: &ClosedLoopField,
    x: &DVector<f64>,
    samples: usize,
    sample_time: f64,
    substeps: usize,
) -> Result<FlowTable> {
    field.system.check_state(x, "propagate_states")?;
    check_grid(samples, sample_time, substeps)?;
    let dt = sample_time / substeps as f64;

    let mut states = Vec::with_capacity(samples + 1);
    let mut times = Vec::with_capacity(samples + 1);
    let mut phi = x.clone();
    states.push(phi.clone());
    times.push(0.0);
    for i in 1..=samples {
        for _ in 0..substeps {
            phi = rk4_step(|p| field.eval(p), &phi, dt);
        }
        if diverged(&phi) {
            return Err(Error::Divergence { sample: i, time: i as f64 * sample_time });
        }
        states.push(phi.clone());
        times.push(i as f64 * sample_time);
    }
    Ok(FlowTable { states, sensitivities: Vec::new(), times })
}
