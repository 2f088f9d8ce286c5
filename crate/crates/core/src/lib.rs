//! Safety filter for control-affine systems `ẋ = f(x) + g(x)u` with inputs
//! restricted to a convex polytope.
//!
//! The filter predicts the closed-loop trajectory under a known backup
//! controller over a finite horizon, folds the sampled safety values into a
//! continuously differentiable soft-minimum barrier `h`, and then computes the
//! control in three steps:
//!
//! 1. a linear program over the input polytope gives the feasibility margin `β`,
//! 2. a minimum-intervention quadratic program gives `u_*` whenever
//!    `γ = min(h - ε, β) ≥ 0`,
//! 3. the output is the homotopy `(1 - σ(γ))·u_b + σ(γ)·u_*`, which collapses to
//!    the backup control `u_b` when `γ < 0`.
//!
//! Module map:
//!
//! - [`math`]: soft minimum, smooth saturation, p-norms.
//! - [`dynamics`]: plant and backup descriptions, joint RK4 propagation of the
//!   backup flow and its sensitivity matrix.
//! - [`barrier`]: sampled barrier, soft-minimum barrier, gradient and Lie
//!   derivatives, Lipschitz estimates.
//! - [`opt`]: dense simplex and active-set solvers over the input polytope.
//! - [`controller`]: the filter itself and the zero-order-hold simulation loop.

pub mod barrier;
pub mod controller;
pub mod dynamics;
mod error;
pub mod math;
pub mod opt;

pub use error::{Error, Result};

pub use barrier::{BarrierConfig, BarrierEval, Domain, SafetySpec};
pub use controller::{
    ControllerConfig, ControllerOutput, FineSample, Mode, SafetyFilter, SimulationFailure, SimulationOptions, TrajectoryLog,
    TrajectoryRow,
};
pub use dynamics::{BackupPolicy, ClosedLoopField, FlowTable, SystemModel};
pub use math::Sharpness;
pub use opt::{AffineHalfspace, ControlPolytope};
