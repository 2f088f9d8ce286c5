//! The safety filter and its zero-order-hold simulation loop.

use std::fmt;
use std::time::Instant;

use nalgebra::DVector;

use crate::barrier::{self, BarrierConfig, BarrierEval, SafetySpec};
use crate::dynamics::{rk4_step, ClosedLoopField, DIVERGENCE_BOUND};
use crate::error::{Error, Result};
use crate::opt::{solve_qp, AffineHalfspace, ControlPolytope};

/// Which branch of the control law produced the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// `γ < 0`: the backup control is applied unchanged.
    Backup,
    /// `0 ≤ γ < κ`: homotopy between backup and QP control.
    Blend,
    /// `γ ≥ κ`: the QP solution is applied unchanged.
    Qp,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Backup => "backup",
            Mode::Blend => "blend",
            Mode::Qp => "qp",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backup" => Ok(Mode::Backup),
            "blend" => Ok(Mode::Blend),
            "qp" => Ok(Mode::Qp),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub barrier: BarrierConfig,
    pub polytope: ControlPolytope,
}

impl ControllerConfig {
    pub fn new(barrier: BarrierConfig, polytope: ControlPolytope) -> Result<Self> {
        barrier.validate()?;
        Ok(ControllerConfig { barrier, polytope })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerOutput {
    pub u: DVector<f64>,
    pub h: f64,
    pub hbar_star: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub mode: Mode,
    /// QP solution; `None` in backup mode, where the QP is never formed.
    pub u_star: Option<DVector<f64>>,
    pub u_b: DVector<f64>,
}

/// `β = L_f h + α(h - ε) + max_{û ∈ S_U} L_g h·û`.
pub fn feasibility_beta(eval: &BarrierEval, cfg: &BarrierConfig, poly: &ControlPolytope) -> Result<f64> {
    let lp = poly.max_linear(&eval.lg_h)?;
    Ok(eval.lf_h + cfg.alpha * (eval.h - cfg.epsilon) + lp.value)
}

/// `γ = min(h - ε, β)`.
pub fn gamma(h: f64, beta: f64, epsilon: f64) -> f64 {
    (h - epsilon).min(beta)
}

/// Piecewise-linear ramp: 0 below zero, `a/κ` on `[0, κ]`, 1 above.
pub fn sigma(a: f64, kappa: f64) -> f64 {
    if a < 0.0 {
        0.0
    } else if a > kappa {
        1.0
    } else {
        a / kappa
    }
}

/// Safety filter bound to one plant, backup policy and safe set.
#[derive(Debug, Clone)]
pub struct SafetyFilter {
    pub field: ClosedLoopField,
    pub safety: SafetySpec,
    pub config: ControllerConfig,
}

impl SafetyFilter {
    pub fn new(field: ClosedLoopField, safety: SafetySpec, config: ControllerConfig) -> Result<Self> {
        let m = field.system.input_dim();
        if config.polytope.dim() != m {
            return Err(Error::DimensionMismatch { context: "control polytope", expected: m, actual: config.polytope.dim() });
        }
        config.barrier.validate()?;
        Ok(SafetyFilter { field, safety, config })
    }

    pub fn state_dim(&self) -> usize {
        self.field.system.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.field.system.input_dim()
    }

    /// Barrier evaluation at `x` with the filter's configuration.
    pub fn evaluate(&self, x: &DVector<f64>) -> Result<BarrierEval> {
        barrier::barrier_eval(&self.field, &self.safety, &self.config.barrier, x)
    }

    /// `(h, h̄_*)` without sensitivities.
    pub fn levels(&self, x: &DVector<f64>) -> Result<(f64, f64)> {
        barrier::barrier_levels(&self.field, &self.safety, &self.config.barrier, x)
    }

    /// One control tick: barrier evaluation, `β`, `γ`, then either the backup
    /// control or the blend of backup and QP control.
    pub fn filter_control(&self, x: &DVector<f64>, u_d: &DVector<f64>) -> Result<ControllerOutput> {
        let m = self.input_dim();
        if u_d.len() != m {
            return Err(Error::DimensionMismatch { context: "desired control", expected: m, actual: u_d.len() });
        }
        if u_d.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("desired control is not finite"));
        }
        let cfg = &self.config.barrier;
        let eval = self.evaluate(x)?;
        let beta = feasibility_beta(&eval, cfg, &self.config.polytope)?;
        let g = gamma(eval.h, beta, cfg.epsilon);
        let u_b = self.field.backup.control(x);

        if g < 0.0 {
            return Ok(ControllerOutput {
                u: u_b.clone(),
                h: eval.h,
                hbar_star: eval.hbar_star,
                beta,
                gamma: g,
                sigma: 0.0,
                mode: Mode::Backup,
                u_star: None,
                u_b,
            });
        }

        let halfspace = AffineHalfspace::new(eval.lg_h.clone(), eval.lf_h + cfg.alpha * (eval.h - cfg.epsilon))?;
        let u_star = match solve_qp(&self.config.polytope, &halfspace, u_d) {
            Ok(sol) => sol.u,
            Err(Error::Infeasible) => {
                return Err(Error::InternalContract(format!("QP infeasible although gamma = {g:e} is nonnegative")))
            }
            Err(e) => return Err(e),
        };
        let s = sigma(g, cfg.kappa);
        let (u, mode) = if g >= cfg.kappa {
            (u_star.clone(), Mode::Qp)
        } else {
            (&u_b * (1.0 - s) + &u_star * s, Mode::Blend)
        };
        Ok(ControllerOutput {
            u,
            h: eval.h,
            hbar_star: eval.hbar_star,
            beta,
            gamma: g,
            sigma: s,
            mode,
            u_star: Some(u_star),
            u_b,
        })
    }

    /// Closed-loop simulation with the control held constant over each tick.
    ///
    /// Produces `round(duration / delta_t) + 1` rows. On plant divergence the
    /// rows recorded so far are returned inside the failure.
    pub fn simulate<F>(
        &self,
        x0: &DVector<f64>,
        desired: F,
        duration: f64,
        delta_t: f64,
        options: &SimulationOptions,
    ) -> std::result::Result<TrajectoryLog, SimulationFailure>
    where
        F: Fn(f64, &DVector<f64>) -> DVector<f64>,
    {
        let started = Instant::now();
        let mut log = TrajectoryLog {
            rows: Vec::new(),
            fine_grid: Vec::new(),
            delta_t,
            wall_time: 0.0,
        };
        let fail = |error: Error, mut log: TrajectoryLog| {
            log.wall_time = started.elapsed().as_secs_f64();
            SimulationFailure { error, partial: log }
        };
        if let Err(e) = check_timing(duration, delta_t, options) {
            return Err(fail(e, log));
        }
        if let Err(e) = self.field.system.check_state(x0, "simulate") {
            return Err(fail(e, log));
        }
        let ticks = (duration / delta_t).round() as usize;
        let dt = delta_t / options.plant_substeps as f64;
        let fine_every = options.fine_grid_factor.map(|k| options.plant_substeps / k);

        let mut x = x0.clone();
        for k in 0..=ticks {
            let t = k as f64 * delta_t;
            let u_d = desired(t, &x);
            let out = match self.filter_control(&x, &u_d) {
                Ok(out) => out,
                Err(e) => return Err(fail(e, log)),
            };
            log.rows.push(TrajectoryRow {
                t,
                x: x.clone(),
                u: out.u.clone(),
                u_desired: u_d,
                h: out.h,
                hbar_star: out.hbar_star,
                h_s: self.safety.value(&x),
                beta: out.beta,
                gamma: out.gamma,
                mode: out.mode,
            });
            if let Some(every) = fine_every {
                if let Err(e) = self.push_fine(&mut log, t, &x) {
                    return Err(fail(e, log));
                }
                if k == ticks {
                    break;
                }
                for s in 1..=options.plant_substeps {
                    x = rk4_step(|p| self.field.system.rate(p, &out.u), &x, dt);
                    if plant_diverged(&x) {
                        return Err(fail(Error::Divergence { sample: k + 1, time: t + s as f64 * dt }, log));
                    }
                    if s % every == 0 && s != options.plant_substeps {
                        if let Err(e) = self.push_fine(&mut log, t + s as f64 * dt, &x) {
                            return Err(fail(e, log));
                        }
                    }
                }
            } else {
                if k == ticks {
                    break;
                }
                for _ in 0..options.plant_substeps {
                    x = rk4_step(|p| self.field.system.rate(p, &out.u), &x, dt);
                }
                if plant_diverged(&x) {
                    return Err(fail(Error::Divergence { sample: k + 1, time: t + delta_t }, log));
                }
            }
        }
        log.wall_time = started.elapsed().as_secs_f64();
        Ok(log)
    }

    fn push_fine(&self, log: &mut TrajectoryLog, t: f64, x: &DVector<f64>) -> Result<()> {
        let (h, hbar_star) = self.levels(x)?;
        log.fine_grid.push(FineSample { t, x: x.clone(), h_s: self.safety.value(x), h, hbar_star });
        Ok(())
    }
}

fn plant_diverged(x: &DVector<f64>) -> bool {
    x.iter().any(|v| !v.is_finite()) || x.norm() > DIVERGENCE_BOUND
}

fn check_timing(duration: f64, delta_t: f64, options: &SimulationOptions) -> Result<()> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::invalid(format!("duration must be positive, got {duration}")));
    }
    if !(delta_t.is_finite() && delta_t > 0.0) {
        return Err(Error::invalid(format!("control period must be positive, got {delta_t}")));
    }
    if options.plant_substeps == 0 {
        return Err(Error::invalid("plant substeps must be at least 1"));
    }
    if let Some(k) = options.fine_grid_factor {
        if k == 0 || options.plant_substeps % k != 0 {
            return Err(Error::invalid("fine grid factor must divide the plant substeps"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOptions {
    /// RK4 steps of the plant per control period.
    pub plant_substeps: usize,
    /// When set, `h_s`, `h` and `h̄_*` are also recorded this many times per
    /// control period (must divide `plant_substeps`).
    pub fine_grid_factor: Option<usize>,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions { plant_substeps: 10, fine_grid_factor: None }
    }
}

/// One control tick of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub u_desired: DVector<f64>,
    pub h: f64,
    pub hbar_star: f64,
    pub h_s: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mode: Mode,
}

/// Barrier values between control ticks.
#[derive(Debug, Clone, PartialEq)]
pub struct FineSample {
    pub t: f64,
    pub x: DVector<f64>,
    pub h_s: f64,
    pub h: f64,
    pub hbar_star: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<TrajectoryRow>,
    /// Empty unless a fine grid was requested; includes the tick instants.
    pub fine_grid: Vec<FineSample>,
    pub delta_t: f64,
    /// Seconds spent in the simulation loop.
    pub wall_time: f64,
}

impl TrajectoryLog {
    pub fn final_state(&self) -> Option<&DVector<f64>> {
        self.rows.last().map(|r| &r.x)
    }

    fn min_of(&self, f: impl Fn(&TrajectoryRow) -> f64) -> f64 {
        self.rows.iter().map(f).fold(f64::INFINITY, f64::min)
    }

    pub fn min_h_s(&self) -> f64 {
        self.min_of(|r| r.h_s)
    }

    pub fn min_hbar_star(&self) -> f64 {
        self.min_of(|r| r.hbar_star)
    }

    pub fn min_h(&self) -> f64 {
        self.min_of(|r| r.h)
    }

    pub fn min_beta(&self) -> f64 {
        self.min_of(|r| r.beta)
    }

    /// Largest `max_i (A·u - b)_i` over the logged controls.
    pub fn max_violation(&self, poly: &ControlPolytope) -> f64 {
        self.rows.iter().map(|r| poly.max_violation(&r.u)).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A simulation that stopped early, with everything logged before the stop.
#[derive(Debug, Clone)]
pub struct SimulationFailure {
    pub error: Error,
    pub partial: TrajectoryLog,
}

impl fmt::Display for SimulationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} logged ticks)", self.error, self.partial.rows.len())
    }
}

impl std::error::Error for SimulationFailure {}

impl From<SimulationFailure> for Error {
    fn from(f: SimulationFailure) -> Self {
        f.error
    }
}
