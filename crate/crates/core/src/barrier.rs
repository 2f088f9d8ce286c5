//! Sampled barrier `h̄_*`, soft-minimum barrier `h`, its gradient through the
//! flow sensitivities, Lie derivatives and sampled Lipschitz estimates.
//!
//! Both barriers are built from the same `N + 2` arguments:
//! `h_s(φ(x, i·T_s))` for `i = 0..=N` followed by `h_b(φ(x, N·T_s))`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{self, BackupPolicy, ClosedLoopField, FlowTable, ScalarField, VectorField};
use crate::error::{Error, Result};
use crate::math::{self, Sharpness};

/// Multiplier applied to sampled Lipschitz maxima.
pub const LIPSCHITZ_INFLATION: f64 = 1.1;

/// Minimum sample count accepted by the Lipschitz estimators.
pub const MIN_LIPSCHITZ_SAMPLES: usize = 1000;

/// Safe set `{x : h_s(x) ≥ 0}` with the gradient of `h_s`.
#[derive(Clone)]
pub struct SafetySpec {
    value: ScalarField,
    gradient: VectorField,
}

impl fmt::Debug for SafetySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SafetySpec")
    }
}

impl SafetySpec {
    pub fn new<H, DH>(value: H, gradient: DH) -> Self
    where
        H: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        DH: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        SafetySpec {
            value: Arc::new(value),
            gradient: Arc::new(gradient),
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierConfig {
    pub rho: Sharpness,
    /// Number of sample intervals `N` in the prediction horizon.
    pub horizon_steps: usize,
    /// Sample interval `T_s` in seconds.
    pub sample_time: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub kappa: f64,
    /// RK4 steps per sample interval.
    pub substeps: usize,
}

impl BarrierConfig {
    pub const DEFAULT_SUBSTEPS: usize = 5;

    pub fn validate(&self) -> Result<()> {
        if self.horizon_steps == 0 {
            return Err(Error::invalid("horizon_steps must be at least 1"));
        }
        if !(self.sample_time.is_finite() && self.sample_time > 0.0) {
            return Err(Error::invalid("sample_time must be positive"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::invalid("alpha must be positive"));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::invalid("epsilon must be nonnegative"));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::invalid("kappa must be positive"));
        }
        if self.substeps == 0 {
            return Err(Error::invalid("substeps must be at least 1"));
        }
        Ok(())
    }

    /// `T = N·T_s`.
    pub fn horizon(&self) -> f64 {
        self.horizon_steps as f64 * self.sample_time
    }

    /// Number of soft-minimum arguments, `N + 2`.
    pub fn argument_count(&self) -> usize {
        self.horizon_steps + 2
    }
}

/// Everything the controller needs from one barrier evaluation at `x`.
#[derive(Debug, Clone)]
pub struct BarrierEval {
    pub h: f64,
    pub hbar_star: f64,
    pub grad_h: DVector<f64>,
    pub lf_h: f64,
    /// `∂h/∂x · g(x)`, one entry per input.
    pub lg_h: DVector<f64>,
    /// Soft-minimum weights over the `N + 2` arguments.
    pub weights: Vec<f64>,
    pub flow: FlowTable,
}

/// Axis-aligned box used for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl Domain {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch { context: "domain bounds", expected: lo.len(), actual: hi.len() });
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| !(l.is_finite() && h.is_finite() && l <= h)) {
            return Err(Error::invalid("domain bounds must be finite with lo <= hi"));
        }
        Ok(Domain { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lo.iter().zip(self.hi.iter()).map(|(&l, &h)| if l == h { l } else { rng.gen_range(l..h) }),
        )
    }
}

/// The `N + 2` barrier arguments along a flow.
pub fn barrier_arguments(safety: &SafetySpec, backup: &BackupPolicy, flow: &FlowTable) -> Vec<f64> {
    let mut args: Vec<f64> = flow.states.iter().map(|s| safety.value(s)).collect();
    args.push(backup.barrier(flow.terminal_state()));
    args
}

/// `min{ h_s(φ(x, i·T_s)) : i = 0..=N } ∪ { h_b(φ(x, N·T_s)) }`.
pub fn hbar_star(safety: &SafetySpec, backup: &BackupPolicy, flow: &FlowTable) -> f64 {
    barrier_arguments(safety, backup, flow)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// Soft minimum over the same arguments as [`hbar_star`].
pub fn h_softmin(safety: &SafetySpec, backup: &BackupPolicy, flow: &FlowTable, rho: Sharpness) -> Result<f64> {
    math::softmin(rho, &barrier_arguments(safety, backup, flow))
}

/// Evaluates `h`, `h̄_*`, `∂h/∂x`, `L_f h` and `L_g h` at `x`.
///
/// The gradient is the weight-averaged chain `Σ w_i · h′(φ_i) · Q_i`, with the
/// weights taken from the shifted soft minimum so they never overflow.
pub fn barrier_eval(
    field: &ClosedLoopField,
    safety: &SafetySpec,
    cfg: &BarrierConfig,
    x: &DVector<f64>,
) -> Result<BarrierEval> {
    let flow = dynamics::propagate_flow(field, x, cfg.horizon_steps, cfg.sample_time, cfg.substeps)?;
    let args = barrier_arguments(safety, &field.backup, &flow);
    let (h, weights) = math::softmin_with_weights(cfg.rho, &args)?;
    let hbar = args.iter().cloned().fold(f64::INFINITY, f64::min);

    let n = x.len();
    let mut grad = DVector::zeros(n);
    for (i, (state, q)) in flow.states.iter().zip(&flow.sensitivities).enumerate() {
        let w = weights[i];
        if w > 0.0 {
            grad.gemv_tr(w, q, &safety.gradient(state), 1.0);
        }
    }
    let w_terminal = weights[flow.states.len()];
    if w_terminal > 0.0 {
        let q = flow.sensitivities.last().expect("non-empty flow");
        grad.gemv_tr(w_terminal, q, &field.backup.barrier_gradient(flow.terminal_state()), 1.0);
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::InternalContract("barrier gradient is not finite".into()));
    }

    let lf_h = grad.dot(&field.system.drift(x));
    let lg_h = field.system.input_matrix(x).tr_mul(&grad);
    Ok(BarrierEval {
        h,
        hbar_star: hbar,
        grad_h: grad,
        lf_h,
        lg_h,
        weights,
        flow,
    })
}

/// `(h(x), h̄_*(x))` from a states-only propagation.
pub fn barrier_levels(
    field: &ClosedLoopField,
    safety: &SafetySpec,
    cfg: &BarrierConfig,
    x: &DVector<f64>,
) -> Result<(f64, f64)> {
    let flow = dynamics::propagate_states(field, x, cfg.horizon_steps, cfg.sample_time, cfg.substeps)?;
    let args = barrier_arguments(safety, &field.backup, &flow);
    let h = math::softmin(cfg.rho, &args)?;
    Ok((h, args.into_iter().fold(f64::INFINITY, f64::min)))
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < MIN_LIPSCHITZ_SAMPLES {
        return Err(Error::invalid(format!(
            "Lipschitz estimation needs at least {MIN_LIPSCHITZ_SAMPLES} samples, got {samples}"
        )));
    }
    Ok(())
}

/// Sampled Lipschitz constant of `h_s`: `1.1 · max ‖∇h_s(x)‖₂` over `samples`
/// seeded uniform draws from `domain`.
pub fn estimate_lipschitz_hs(safety: &SafetySpec, domain: &Domain, samples: usize, seed: u64) -> Result<f64> {
    check_samples(samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max = 0.0_f64;
    for _ in 0..samples {
        let x = domain.sample(&mut rng);
        max = max.max(safety.gradient(&x).norm());
    }
    Ok(LIPSCHITZ_INFLATION * max)
}

/// Sampled bound on `‖f̃(x)‖₂` over points with `h̄_*(x) ≥ 0`, inflated by 10%.
///
/// Points whose predicted flow diverges are skipped; they cannot belong to the
/// sampled set.
pub fn estimate_lphi(
    field: &ClosedLoopField,
    safety: &SafetySpec,
    cfg: &BarrierConfig,
    domain: &Domain,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    check_samples(samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max: Option<f64> = None;
    for _ in 0..samples {
        let x = domain.sample(&mut rng);
        let flow = match dynamics::propagate_states(field, &x, cfg.horizon_steps, cfg.sample_time, cfg.substeps) {
            Ok(flow) => flow,
            Err(Error::Divergence { .. }) => continue,
            Err(e) => return Err(e),
        };
        if hbar_star(safety, &field.backup, &flow) >= 0.0 {
            let speed = field.ftilde(&x)?.norm();
            max = Some(max.map_or(speed, |m: f64| m.max(speed)));
        }
    }
    max.map(|m| LIPSCHITZ_INFLATION * m)
        .ok_or_else(|| Error::Estimation("no sampled point has a nonnegative sampled barrier".into()))
}

/// Margin `½·T_s·l_φ·l_s` that makes sample-time safety hold between samples.
pub fn epsilon_threshold(lipschitz_hs: f64, lipschitz_phi: f64, sample_time: f64) -> Result<f64> {
    if [lipschitz_hs, lipschitz_phi, sample_time].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("Lipschitz constants and sample time must be nonnegative"));
    }
    Ok(0.5 * sample_time * lipschitz_phi * lipschitz_hs)
}

/// Largest sampled value of `h` over `domain`. Used to check that a chosen
/// `ε` leaves room for `h - ε ≥ 0` somewhere.
pub fn sampled_sup_h(
    field: &ClosedLoopField,
    safety: &SafetySpec,
    cfg: &BarrierConfig,
    domain: &Domain,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sup = f64::NEG_INFINITY;
    for _ in 0..samples {
        let x = domain.sample(&mut rng);
        match barrier_levels(field, safety, cfg, &x) {
            Ok((h, _)) => sup = sup.max(h),
            Err(Error::Divergence { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if sup.is_finite() {
        Ok(sup)
    } else {
        Err(Error::Estimation("no sample produced a finite barrier value".into()))
    }
}
