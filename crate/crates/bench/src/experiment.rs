//! Turns a configuration into model bundles and runs the sweeps.

use std::sync::OnceLock;

use anyhow::Context;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use softmin_cbf::barrier::{self, BarrierConfig};
use softmin_cbf::math::Sharpness;
use softmin_cbf::{ControllerConfig, Domain, SafetyFilter, SimulationOptions, TrajectoryLog};

use crate::config::{EpsilonPolicy, ExperimentConfig, ModelKind, RunSpec};
use crate::invariance::{self, InvarianceReport, RobotSynthesis};
use crate::models::{self, ModelBundle, PendulumParams, RobotParams};

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzReport {
    pub samples: usize,
    pub seed: u64,
    pub l_s: f64,
    pub l_phi: f64,
    pub epsilon_threshold: f64,
    /// Largest sampled `h`; an `ε` at or above it leaves no room for `h - ε ≥ 0`.
    pub sampled_sup_h: f64,
}

#[derive(Debug, Clone)]
pub enum Desired {
    Constant(DVector<f64>),
    /// `K·(x - goal)` for the robot.
    Goal { gain: nalgebra::DMatrix<f64>, goal: DVector<f64> },
}

impl Desired {
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Desired::Constant(u) => u.clone(),
            Desired::Goal { gain, goal } => gain * (x - goal),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunPlan {
    pub name: String,
    pub x0: DVector<f64>,
    pub epsilon: EpsilonPolicy,
    pub desired: Desired,
    pub goal: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub name: String,
    pub epsilon: f64,
    pub goal: Option<DVector<f64>>,
    pub log: TrajectoryLog,
    pub error: Option<String>,
}

impl RunOutcome {
    /// `‖position - goal position‖₂` at the last logged tick (first two coordinates).
    pub fn final_goal_distance(&self) -> Option<f64> {
        let goal = self.goal.as_ref()?;
        let x = self.log.final_state()?;
        Some(((x[0] - goal[0]).powi(2) + (x[1] - goal[1]).powi(2)).sqrt())
    }
}

/// A validated experiment ready to run.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub bundle: ModelBundle,
    pub barrier: BarrierConfig,
    pub default_epsilon: EpsilonPolicy,
    pub delta_t: f64,
    pub duration: f64,
    pub options: SimulationOptions,
    pub plans: Vec<RunPlan>,
    pub lipschitz_domain: Domain,
    pub robot_synthesis: Option<RobotSynthesis>,
    lipschitz: OnceLock<LipschitzReport>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> anyhow::Result<Self> {
        config.validate()?;
        let (bundle, robot_synthesis, robot_params) = match config.model {
            ModelKind::Pendulum => {
                let params = config.pendulum.clone().unwrap_or_default();
                (models::build_pendulum(&params)?, None, None)
            }
            ModelKind::Robot => {
                let mut params = config.robot.clone().unwrap_or_default();
                let synthesis = invariance::synthesize_robot_pb(
                    &params,
                    config.invariance.samples,
                    config.invariance.horizon,
                    config.seed,
                )?;
                let scale = params.hb_scale.unwrap_or(1.0 / params.c_b);
                params.c_b = synthesis.c_b;
                let set = models::Ellipsoid {
                    center: DVector::from_row_slice(&params.x_b),
                    p: synthesis.p.clone(),
                    level: synthesis.c_b,
                };
                let bundle = models::build_robot_with_set(&params, set, scale)?;
                (bundle, Some(synthesis), Some(params))
            }
        };

        let mut barrier = bundle.barrier;
        let b = &config.barrier;
        if let Some(rho) = b.rho {
            barrier.rho = Sharpness::new(rho)?;
        }
        barrier.horizon_steps = b.horizon_steps.unwrap_or(barrier.horizon_steps);
        barrier.sample_time = b.sample_time.unwrap_or(barrier.sample_time);
        barrier.alpha = b.alpha.unwrap_or(barrier.alpha);
        barrier.kappa = b.kappa.unwrap_or(barrier.kappa);
        barrier.substeps = b.substeps.unwrap_or(barrier.substeps);
        barrier.validate()?;
        let default_epsilon = match &b.epsilon {
            Some(e) => e.policy()?,
            None => EpsilonPolicy::Value(barrier.epsilon),
        };

        let n = bundle.state_dim();
        let m = bundle.field.system.input_dim();
        let plans = config
            .runs
            .iter()
            .map(|run| plan_run(run, n, m, default_epsilon, robot_params.as_ref()))
            .collect::<anyhow::Result<Vec<_>>>()?;

        let lipschitz_domain = match (&config.lipschitz.domain_lo, &config.lipschitz.domain_hi) {
            (Some(lo), Some(hi)) => Domain::new(DVector::from_row_slice(lo), DVector::from_row_slice(hi))?,
            (None, None) => bundle.domain.clone(),
            _ => anyhow::bail!("lipschitz.domain_lo and domain_hi must be given together"),
        };
        anyhow::ensure!(lipschitz_domain.dim() == n, "Lipschitz domain must have {n} coordinates");

        Ok(Experiment {
            delta_t: config.delta_t.unwrap_or(bundle.delta_t),
            duration: config.duration.unwrap_or(bundle.duration),
            options: SimulationOptions { plant_substeps: config.plant_substeps, fine_grid_factor: config.fine_grid_factor },
            barrier,
            default_epsilon,
            plans,
            lipschitz_domain,
            robot_synthesis,
            bundle,
            config,
            lipschitz: OnceLock::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// `l_s`, `l_φ`, the `ε` threshold and the sampled `sup h`, computed once.
    pub fn lipschitz(&self) -> anyhow::Result<&LipschitzReport> {
        if let Some(r) = self.lipschitz.get() {
            return Ok(r);
        }
        let samples = self.config.lipschitz.samples;
        let seed = self.seed();
        let b = &self.bundle;
        let l_s = barrier::estimate_lipschitz_hs(&b.safety, &self.lipschitz_domain, samples, seed)?;
        let l_phi = barrier::estimate_lphi(&b.field, &b.safety, &self.barrier, &self.lipschitz_domain, samples, seed)?;
        let epsilon_threshold = barrier::epsilon_threshold(l_s, l_phi, self.barrier.sample_time)?;
        let sampled_sup_h = barrier::sampled_sup_h(&b.field, &b.safety, &self.barrier, &self.lipschitz_domain, samples, seed)?;
        let report = LipschitzReport { samples, seed, l_s, l_phi, epsilon_threshold, sampled_sup_h };
        Ok(self.lipschitz.get_or_init(|| report))
    }

    pub fn lipschitz_if_computed(&self) -> Option<&LipschitzReport> {
        self.lipschitz.get()
    }

    pub fn resolve_epsilon(&self, policy: EpsilonPolicy) -> anyhow::Result<f64> {
        Ok(match policy {
            EpsilonPolicy::Value(v) => v,
            EpsilonPolicy::Threshold => self.lipschitz()?.epsilon_threshold,
        })
    }

    pub fn filter(&self, epsilon: f64) -> anyhow::Result<SafetyFilter> {
        let mut cfg = self.barrier;
        cfg.epsilon = epsilon;
        let controller = ControllerConfig::new(cfg, self.bundle.polytope.clone())?;
        Ok(SafetyFilter::new(self.bundle.field.clone(), self.bundle.safety.clone(), controller)?)
    }

    pub fn run(&self, plan: &RunPlan) -> anyhow::Result<RunOutcome> {
        let epsilon = self.resolve_epsilon(plan.epsilon)?;
        let filter = self.filter(epsilon)?;
        let desired = plan.desired.clone();
        let result = filter.simulate(&plan.x0, move |_t, x| desired.eval(x), self.duration, self.delta_t, &self.options);
        let (log, error) = match result {
            Ok(log) => (log, None),
            Err(f) => (f.partial, Some(f.error.to_string())),
        };
        Ok(RunOutcome { name: plan.name.clone(), epsilon, goal: plan.goal.clone(), log, error })
    }

    /// All runs in parallel; the output order follows the configuration.
    pub fn run_all(&self) -> anyhow::Result<Vec<RunOutcome>> {
        if self.plans.iter().any(|p| p.epsilon == EpsilonPolicy::Threshold) {
            self.lipschitz()?;
        }
        self.plans.par_iter().map(|p| self.run(p)).collect()
    }

    pub fn find_plan(&self, name: &str) -> anyhow::Result<&RunPlan> {
        self.plans
            .iter()
            .find(|p| p.name == name)
            .with_context(|| format!("no run named `{name}`"))
    }

    /// Sampled forward-invariance check of the model's backup set.
    pub fn check_invariance(&self) -> anyhow::Result<InvarianceReport> {
        let b = &self.bundle;
        invariance::check_invariance(&b.field, &b.backup_set, self.config.invariance.samples, self.config.invariance.horizon, self.seed())
    }
}

fn plan_run(
    run: &RunSpec,
    n: usize,
    m: usize,
    default_epsilon: EpsilonPolicy,
    robot: Option<&RobotParams>,
) -> anyhow::Result<RunPlan> {
    anyhow::ensure!(run.x0.len() == n, "run `{}`: x0 needs {n} entries", run.name);
    let epsilon = match &run.epsilon {
        Some(e) => e.policy()?,
        None => default_epsilon,
    };
    let goal = match &run.goal {
        Some(g) => {
            anyhow::ensure!(g.len() == n, "run `{}`: goal needs {n} entries", run.name);
            Some(DVector::from_row_slice(g))
        }
        None => None,
    };
    let desired = match (&run.u_d, &goal, robot) {
        (Some(u), _, _) => {
            anyhow::ensure!(u.len() == m, "run `{}`: u_d needs {m} entries", run.name);
            Desired::Constant(DVector::from_row_slice(u))
        }
        (None, Some(g), Some(params)) => Desired::Goal { gain: params.gain(), goal: g.clone() },
        (None, Some(_), None) => anyhow::bail!("run `{}`: goals are only supported for the robot", run.name),
        (None, None, _) => Desired::Constant(DVector::zeros(m)),
    };
    Ok(RunPlan { name: run.name.clone(), x0: DVector::from_row_slice(&run.x0), epsilon, desired, goal })
}

/// The eight pendulum runs: `θ_0 ∈ {0.5, 1, 1.5, 2}` with `ε = 0` and their
/// mirror images with the threshold `ε`.
pub fn pendulum_sweep_config(seed: u64) -> ExperimentConfig {
    let mut runs = Vec::new();
    for theta in [0.5, 1.0, 1.5, 2.0] {
        for (sign, eps) in [(1.0, crate::config::EpsilonSetting::Value(0.0)), (-1.0, crate::config::EpsilonSetting::Named("threshold".into()))] {
            let th = sign * theta;
            runs.push(RunSpec {
                name: format!("theta{th:+.1}"),
                x0: vec![th, 0.0],
                epsilon: Some(eps),
                goal: None,
                u_d: None,
            });
        }
    }
    ExperimentConfig {
        model: ModelKind::Pendulum,
        seed,
        duration: Some(20.0),
        delta_t: Some(0.1),
        plant_substeps: 10,
        fine_grid_factor: Some(10),
        barrier: Default::default(),
        lipschitz: Default::default(),
        invariance: Default::default(),
        grid: Default::default(),
        pendulum: Some(PendulumParams::default()),
        robot: None,
        runs,
    }
}

/// Start state of the robot runs: at rest beside the `(-0.75, -0.6)` obstacle,
/// where `h - ε < κ`.
pub const ROBOT_START: [f64; 4] = [-0.45, -0.5, 0.0, 0.0];

/// The three robot goals, all from [`ROBOT_START`].
pub fn robot_sweep_config(seed: u64) -> ExperimentConfig {
    let params = RobotParams::default();
    let goals = [[-0.7, 0.1], [0.45, 0.05], [0.3, -0.85]];
    let runs = goals
        .iter()
        .enumerate()
        .map(|(i, g)| RunSpec {
            name: format!("goal{}", i + 1),
            x0: ROBOT_START.to_vec(),
            epsilon: None,
            goal: Some(vec![g[0], g[1], 0.0, 0.0]),
            u_d: None,
        })
        .collect();
    ExperimentConfig {
        model: ModelKind::Robot,
        seed,
        duration: Some(10.0),
        delta_t: Some(0.02),
        plant_substeps: 10,
        fine_grid_factor: None,
        barrier: Default::default(),
        lipschitz: Default::default(),
        invariance: Default::default(),
        grid: Default::default(),
        pendulum: None,
        robot: Some(params),
        runs,
    }
}
