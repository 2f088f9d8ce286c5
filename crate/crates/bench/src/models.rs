//! The inverted pendulum and the double-integrator ground robot.

use std::f64::consts::PI;

use nalgebra::{dvector, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use softmin_cbf::barrier::BarrierConfig;
use softmin_cbf::math::{self, csat, csat_derivative, Sharpness};
use softmin_cbf::{BackupPolicy, ClosedLoopField, ControlPolytope, Domain, SafetySpec, SystemModel};

use crate::lyapunov;

/// Ellipsoidal backup set `{x : (x - c)ᵀP(x - c) ≤ level}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    pub center: DVector<f64>,
    pub p: DMatrix<f64>,
    pub level: f64,
}

impl Ellipsoid {
    pub fn quadratic(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        d.dot(&(&self.p * &d))
    }

    /// `level - (x - c)ᵀP(x - c)`.
    pub fn margin(&self, x: &DVector<f64>) -> f64 {
        self.level - self.quadratic(x)
    }

    pub fn with_level(&self, level: f64) -> Ellipsoid {
        Ellipsoid { level, ..self.clone() }
    }

    /// Per-axis half widths of the bounding box, `sqrt(level·(P⁻¹)_ii)`.
    pub fn half_widths(&self) -> DVector<f64> {
        let inv = self.p.clone().try_inverse().expect("ellipsoid matrix is positive definite");
        DVector::from_fn(self.center.len(), |i, _| (self.level * inv[(i, i)]).max(0.0).sqrt())
    }
}

/// A plant with its backup policy, safe set and run defaults.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub name: &'static str,
    pub field: ClosedLoopField,
    pub safety: SafetySpec,
    pub polytope: ControlPolytope,
    pub barrier: BarrierConfig,
    pub delta_t: f64,
    pub duration: f64,
    /// Backup set used by the invariance check (`h_b` is a positive multiple
    /// of its margin).
    pub backup_set: Ellipsoid,
    /// Sampling box for Lipschitz estimates and level-set grids.
    pub domain: Domain,
}

impl ModelBundle {
    pub fn state_dim(&self) -> usize {
        self.field.state_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumParams {
    pub u_max: f64,
    pub gain: [f64; 2],
    pub c_b: f64,
    pub p_b: [[f64; 2]; 2],
    pub p_norm: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            u_max: 1.5,
            gain: [-3.0, -3.0],
            c_b: 0.07,
            p_b: [[1.25, 0.25], [0.25, 0.25]],
            p_norm: 100.0,
        }
    }
}

pub fn pendulum_defaults() -> BarrierConfig {
    BarrierConfig {
        rho: Sharpness::new(100.0).expect("positive"),
        horizon_steps: 50,
        sample_time: 0.1,
        alpha: 1.0,
        epsilon: 0.0,
        kappa: 0.05,
        substeps: BarrierConfig::DEFAULT_SUBSTEPS,
    }
}

/// `θ̈ = sin θ + u` about the upright equilibrium, `|u| ≤ ū`.
pub fn build_pendulum(params: &PendulumParams) -> anyhow::Result<ModelBundle> {
    let system = SystemModel::new(
        2,
        1,
        |x: &DVector<f64>| dvector![x[1], x[0].sin()],
        |_x: &DVector<f64>| DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
    )
    .with_jacobians(
        |x: &DVector<f64>| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, x[0].cos(), 0.0]),
        |_x: &DVector<f64>| vec![DMatrix::zeros(2, 2)],
    );

    let u_max = params.u_max;
    let k = DVector::from_row_slice(&params.gain);
    let p = DMatrix::from_row_slice(2, 2, &[params.p_b[0][0], params.p_b[0][1], params.p_b[1][0], params.p_b[1][1]]);
    let backup_set = Ellipsoid { center: DVector::zeros(2), p: p.clone(), level: params.c_b };

    let (k1, k2, k3) = (k.clone(), k.clone(), k);
    let (set1, set2) = (backup_set.clone(), backup_set.clone());
    let backup = BackupPolicy::new(
        1,
        move |x: &DVector<f64>| dvector![csat(u_max, k1.dot(x))],
        move |x: &DVector<f64>| set1.margin(x),
        move |x: &DVector<f64>| -2.0 * (&set2.p * x),
    )
    .with_control_jacobian(move |x: &DVector<f64>| {
        let d = csat_derivative(u_max, k2.dot(x));
        DMatrix::from_row_slice(1, 2, &[d * k3[0], d * k3[1]])
    });
    let field = ClosedLoopField::new(system, backup)?;

    let pn = params.p_norm;
    let safety = SafetySpec::new(
        move |x: &DVector<f64>| PI - math::pnorm(pn, x.as_slice()).expect("p >= 1"),
        move |x: &DVector<f64>| -DVector::from_vec(math::pnorm_gradient(pn, x.as_slice()).expect("p >= 1")),
    );

    Ok(ModelBundle {
        name: "pendulum",
        field,
        safety,
        polytope: ControlPolytope::symmetric_box(u_max, 1)?,
        barrier: pendulum_defaults(),
        delta_t: 0.1,
        duration: 20.0,
        backup_set,
        domain: Domain::new(dvector![-PI, -PI], dvector![PI, PI])?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Circle {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Planar map: rectangle walls, circular obstacles and a speed limit, merged
/// by a soft minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobotMap {
    /// `[x_min, x_max, y_min, y_max]`.
    pub bounds: [f64; 4],
    pub obstacles: Vec<Circle>,
    pub v_max: f64,
    pub rho_map: f64,
}

impl Default for RobotMap {
    fn default() -> Self {
        RobotMap {
            bounds: [-1.4, 1.4, -1.3, 1.1],
            obstacles: vec![
                Circle { center: [0.1, 0.55], radius: 0.2 },
                Circle { center: [-0.75, -0.6], radius: 0.2 },
                Circle { center: [0.75, -0.35], radius: 0.2 },
                Circle { center: [-0.35, -1.0], radius: 0.15 },
            ],
            v_max: 1.0,
            rho_map: 20.0,
        }
    }
}

impl RobotMap {
    fn terms(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
        let [x_lo, x_hi, y_lo, y_hi] = self.bounds;
        let e = |i: usize, s: f64| {
            let mut v = DVector::zeros(4);
            v[i] = s;
            v
        };
        let mut values = vec![x[0] - x_lo, x_hi - x[0], x[1] - y_lo, y_hi - x[1]];
        let mut grads = vec![e(0, 1.0), e(0, -1.0), e(1, 1.0), e(1, -1.0)];
        for c in &self.obstacles {
            let dx = x[0] - c.center[0];
            let dy = x[1] - c.center[1];
            let r = dx.hypot(dy);
            values.push(r - c.radius);
            let mut g = DVector::zeros(4);
            if r > 0.0 {
                g[0] = dx / r;
                g[1] = dy / r;
            }
            grads.push(g);
        }
        values.push(0.5 * (self.v_max * self.v_max - x[2] * x[2] - x[3] * x[3]));
        grads.push(dvector![0.0, 0.0, -x[2], -x[3]]);
        (values, grads)
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let (values, _) = self.terms(x);
        math::softmin(Sharpness::new(self.rho_map).expect("validated"), &values).expect("finite map terms")
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let (values, grads) = self.terms(x);
        let (_, w) = math::softmin_with_weights(Sharpness::new(self.rho_map).expect("validated"), &values)
            .expect("finite map terms");
        grads.iter().zip(w).fold(DVector::zeros(4), |acc, (g, wi)| acc + g * wi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobotParams {
    pub u_max: f64,
    pub k1: [f64; 4],
    pub k2: [f64; 4],
    pub x_b: [f64; 4],
    pub c_b: f64,
    /// Positive factor applied to `c_b - (x - x_b)ᵀP_b(x - x_b)`; the default
    /// `1/c_b` normalizes `h_b` to 1 at `x_b`.
    pub hb_scale: Option<f64>,
    pub map: RobotMap,
}

impl Default for RobotParams {
    fn default() -> Self {
        RobotParams {
            u_max: 1.0,
            k1: [-3.16, 0.0, -4.04, 0.0],
            k2: [0.0, -3.16, 0.0, -4.04],
            x_b: [-0.1, -0.3, 0.0, 0.0],
            c_b: 0.0034,
            hb_scale: None,
            map: RobotMap::default(),
        }
    }
}

impl RobotParams {
    pub fn gain(&self) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(2, 4);
        k.row_mut(0).copy_from_slice(&self.k1);
        k.row_mut(1).copy_from_slice(&self.k2);
        k
    }

    /// Linearization `A = A_0 + B·K` of the unsaturated closed loop.
    pub fn closed_loop_matrix(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        let k = self.gain();
        a.rows_mut(2, 2).copy_from(&k);
        a
    }

    /// Desired control `K·(x - x_g)`.
    pub fn desired_control(&self, x: &DVector<f64>, goal: &DVector<f64>) -> DVector<f64> {
        self.gain() * (x - goal)
    }
}

pub fn robot_defaults() -> BarrierConfig {
    BarrierConfig {
        rho: Sharpness::new(100.0).expect("positive"),
        horizon_steps: 30,
        sample_time: 0.1,
        alpha: 1.0,
        epsilon: 0.1,
        kappa: 0.1,
        substeps: BarrierConfig::DEFAULT_SUBSTEPS,
    }
}

/// Planar double integrator `q̈ = u`, `|u_i| ≤ ū`, with `P_b` from the
/// Lyapunov equation of the unsaturated closed loop.
pub fn build_robot(params: &RobotParams) -> anyhow::Result<ModelBundle> {
    anyhow::ensure!(params.c_b > 0.0, "robot c_b must be positive");
    anyhow::ensure!(params.map.rho_map > 0.0 && params.map.v_max > 0.0, "robot map needs positive rho_map and v_max");
    let scale = params.hb_scale.unwrap_or(1.0 / params.c_b);
    anyhow::ensure!(scale > 0.0 && scale.is_finite(), "hb_scale must be positive");

    let p = lyapunov::solve_lyapunov(&params.closed_loop_matrix())?;
    let backup_set = Ellipsoid { center: DVector::from_row_slice(&params.x_b), p, level: params.c_b };
    build_robot_with_set(params, backup_set, scale)
}

pub(crate) fn build_robot_with_set(params: &RobotParams, backup_set: Ellipsoid, scale: f64) -> anyhow::Result<ModelBundle> {
    let system = SystemModel::new(
        4,
        2,
        |x: &DVector<f64>| dvector![x[2], x[3], 0.0, 0.0],
        |_x: &DVector<f64>| {
            let mut g = DMatrix::zeros(4, 2);
            g[(2, 0)] = 1.0;
            g[(3, 1)] = 1.0;
            g
        },
    )
    .with_jacobians(
        |_x: &DVector<f64>| {
            let mut j = DMatrix::zeros(4, 4);
            j[(0, 2)] = 1.0;
            j[(1, 3)] = 1.0;
            j
        },
        |_x: &DVector<f64>| vec![DMatrix::zeros(4, 4), DMatrix::zeros(4, 4)],
    );

    let u_max = params.u_max;
    let k = params.gain();
    let xb = DVector::from_row_slice(&params.x_b);
    let (k_u, xb_u) = (k.clone(), xb.clone());
    let (k_j, xb_j) = (k, xb);
    let (set_v, set_g) = (backup_set.clone(), backup_set.clone());
    let backup = BackupPolicy::new(
        2,
        move |x: &DVector<f64>| (&k_u * (x - &xb_u)).map(|a| csat(u_max, a)),
        move |x: &DVector<f64>| scale * set_v.margin(x),
        move |x: &DVector<f64>| (&set_g.p * (x - &set_g.center)) * (-2.0 * scale),
    )
    .with_control_jacobian(move |x: &DVector<f64>| {
        let a = &k_j * (x - &xb_j);
        let mut j = k_j.clone();
        for i in 0..2 {
            let d = csat_derivative(u_max, a[i]);
            j.row_mut(i).scale_mut(d);
        }
        j
    });
    let field = ClosedLoopField::new(system, backup)?;

    let (map_v, map_g) = (params.map.clone(), params.map.clone());
    let safety = SafetySpec::new(move |x: &DVector<f64>| map_v.value(x), move |x: &DVector<f64>| map_g.gradient(x));

    let [x_lo, x_hi, y_lo, y_hi] = params.map.bounds;
    let v = params.map.v_max;
    Ok(ModelBundle {
        name: "robot",
        field,
        safety,
        polytope: ControlPolytope::symmetric_box(u_max, 2)?,
        barrier: robot_defaults(),
        delta_t: 0.02,
        duration: 10.0,
        backup_set,
        domain: Domain::new(dvector![x_lo, y_lo, -v, -v], dvector![x_hi, y_hi, v, v])?,
    })
}
