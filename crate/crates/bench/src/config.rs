//! TOML experiment configuration. Unknown keys are rejected everywhere.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use crate::models::{PendulumParams, RobotParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pendulum,
    Robot,
}

/// `epsilon = 0.1` or `epsilon = "threshold"` (`½·T_s·l_φ·l_s`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonSetting {
    Value(f64),
    Named(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonPolicy {
    Value(f64),
    Threshold,
}

impl EpsilonSetting {
    pub fn policy(&self) -> anyhow::Result<EpsilonPolicy> {
        match self {
            EpsilonSetting::Value(v) if v.is_finite() && *v >= 0.0 => Ok(EpsilonPolicy::Value(*v)),
            EpsilonSetting::Value(v) => bail!("epsilon must be a nonnegative number, got {v}"),
            EpsilonSetting::Named(s) if s == "threshold" => Ok(EpsilonPolicy::Threshold),
            EpsilonSetting::Named(s) => bail!("epsilon must be a number or \"threshold\", got \"{s}\""),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSection {
    pub rho: Option<f64>,
    pub horizon_steps: Option<usize>,
    pub sample_time: Option<f64>,
    pub alpha: Option<f64>,
    pub kappa: Option<f64>,
    pub substeps: Option<usize>,
    /// Default for runs that do not set their own.
    pub epsilon: Option<EpsilonSetting>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzSection {
    pub samples: usize,
    pub domain_lo: Option<Vec<f64>>,
    pub domain_hi: Option<Vec<f64>>,
}

impl Default for LipschitzSection {
    fn default() -> Self {
        LipschitzSection { samples: 20_000, domain_lo: None, domain_hi: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvarianceSection {
    pub samples: usize,
    pub horizon: f64,
}

impl Default for InvarianceSection {
    fn default() -> Self {
        InvarianceSection { samples: 200, horizon: 10.0 }
    }
}

/// Level-set grid over the first two state coordinates; remaining
/// coordinates are held at `fixed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub resolution: [usize; 2],
    pub lo: Option<[f64; 2]>,
    pub hi: Option<[f64; 2]>,
    pub fixed: Vec<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { resolution: [101, 101], lo: None, hi: None, fixed: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub epsilon: Option<EpsilonSetting>,
    /// Robot goal state; the desired control is `K·(x - goal)`.
    #[serde(default)]
    pub goal: Option<Vec<f64>>,
    /// Constant desired control (pendulum default: zero).
    #[serde(default)]
    pub u_d: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    #[serde(default)]
    pub seed: u64,
    pub duration: Option<f64>,
    pub delta_t: Option<f64>,
    #[serde(default = "default_plant_substeps")]
    pub plant_substeps: usize,
    /// Record barrier values this many times per control period.
    #[serde(default)]
    pub fine_grid_factor: Option<usize>,
    #[serde(default)]
    pub barrier: BarrierSection,
    #[serde(default)]
    pub lipschitz: LipschitzSection,
    #[serde(default)]
    pub invariance: InvarianceSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub pendulum: Option<PendulumParams>,
    #[serde(default)]
    pub robot: Option<RobotParams>,
    pub runs: Vec<RunSpec>,
}

fn default_plant_substeps() -> usize {
    10
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("invalid experiment configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match self.model {
            ModelKind::Pendulum if self.robot.is_some() => bail!("[robot] section given for a pendulum experiment"),
            ModelKind::Robot if self.pendulum.is_some() => bail!("[pendulum] section given for a robot experiment"),
            _ => {}
        }
        if self.runs.is_empty() {
            bail!("at least one [[runs]] entry is required");
        }
        let mut names = std::collections::BTreeSet::new();
        for run in &self.runs {
            if run.name.is_empty() || !run.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.+".contains(c)) {
                bail!("run name `{}` must be nonempty and use only [A-Za-z0-9-_.+]", run.name);
            }
            if !names.insert(run.name.as_str()) {
                bail!("duplicate run name `{}`", run.name);
            }
            if let Some(e) = &run.epsilon {
                e.policy().with_context(|| format!("run `{}`", run.name))?;
            }
            if self.model == ModelKind::Robot && run.goal.is_none() && run.u_d.is_none() {
                bail!("robot run `{}` needs a goal", run.name);
            }
        }
        if let Some(e) = &self.barrier.epsilon {
            e.policy()?;
        }
        for (v, what) in [(self.duration, "duration"), (self.delta_t, "delta_t")] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    bail!("{what} must be positive");
                }
            }
        }
        if self.plant_substeps == 0 {
            bail!("plant_substeps must be at least 1");
        }
        if let Some(k) = self.fine_grid_factor {
            if k == 0 || self.plant_substeps % k != 0 {
                bail!("fine_grid_factor must divide plant_substeps");
            }
        }
        if self.grid.resolution.iter().any(|&r| r < 2) {
            bail!("grid resolution must be at least 2 per axis");
        }
        Ok(())
    }
}
