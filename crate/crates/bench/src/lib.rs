//! Benchmark systems for the safety filter (an inverted pendulum and a planar
//! double-integrator robot), experiment configuration, CSV logs and the
//! command-line driver.

pub mod config;
pub mod experiment;
pub mod invariance;
pub mod lyapunov;
pub mod models;
pub mod output;

pub use config::{EpsilonPolicy, EpsilonSetting, ExperimentConfig, ModelKind, RunSpec};
pub use experiment::{Experiment, LipschitzReport, RunOutcome};
pub use models::{build_pendulum, build_robot, ModelBundle, PendulumParams, RobotMap, RobotParams};
