//! Whole-body control. One control tick assembles a quadratic program over
//! joint accelerations and contact wrenches, solves it under the floating
//! base dynamics, the internal rolling constraints, friction cones, and
//! actuation limits, then recovers actuated-joint torques through the
//! projected dynamics and integrates position/velocity commands for the
//! joint-level servos.
//!
//! Decision vector: `x = [q̈ (nv); F_1 … F_nc]` with each `F_i` a 6D contact
//! wrench `(τ; f)` acting on the robot at the contact frame origin, world
//! axes. Cost terms are `Σ_i w_i ‖J_i q̈ + J̇_i q̇ − ẍ_i^d‖²`,
//! `λ_q ‖q̈‖²`, `Σ_c w_F ‖F_c − F_c^d‖²`, and `λ_F ‖F_c‖²`, stated under the
//! `½ xᵀH x + gᵀx` convention (so `H` carries a factor 2).

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Isometry3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    com_motion_with, com_state_with, frame_jacobian_with, jacobian_dot_times_v_with,
    mass_matrix_with, nonlinear_effects_with, DynamicsError, KinState,
};
use crate::model::{JointKind, RobotModel, RobotState};
use crate::qp::{solve_qp, solve_qp_warm, QpError, QpProblem};
use crate::rolling::{
    pinv_rel, projected_dynamics, InternalConstraintSet, ProjectedDynamics, PINV_CUTOFF,
};

#[derive(Debug, Error)]
pub enum WbcError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("unknown contact frame {0:?}")]
    MissingContactFrame(String),
    #[error("task {task:?}: {problem}")]
    BadTask { task: String, problem: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("controller QP infeasible, worst constraint residual {residual:.3e}")]
    SolverInfeasible { residual: f64 },
    #[error(transparent)]
    Solver(QpError),
    #[error("controller config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("controller config parse: {0}")]
    Parse(#[from] toml::de::Error),
}

impl From<QpError> for WbcError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::InfeasibleProblem { residual } => WbcError::SolverInfeasible { residual },
            other => WbcError::Solver(other),
        }
    }
}

/// What a task controls. Dimensions: pose 6, orientation 3, height 1,
/// capture point 2, posture n_joints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Full 6D pose of a frame (feet during stance).
    FramePose,
    /// Orientation of a frame only (keeps the base level).
    FrameOrientation,
    /// World height of a frame origin (base height during squats).
    FrameHeight,
    /// Horizontal balance through the instantaneous capture point
    /// `ξ = c_xy + ċ_xy/ω`, `ω = √(g/c_z)`: the task commands the CoM
    /// acceleration `c̈_xy^d = ω (ξ̇^d − ċ_xy)` with
    /// `ξ̇^d = ṙ − kp (ξ − r)` toward the reference capture point `r`.
    Icp,
    /// All joint coordinates toward a reference posture.
    Posture,
}

/// One tracking objective in the controller cost.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Required for the frame-anchored kinds, ignored otherwise.
    #[serde(default)]
    pub frame: Option<String>,
    /// Scalar weight; the task contributes `weight·‖error‖²`.
    pub weight: f64,
    #[serde(default)]
    pub kp: f64,
    #[serde(default)]
    pub kd: f64,
}

/// Contact geometry and force limits shared by every stance foot.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ContactConfig {
    /// Tangential friction coefficient.
    pub mu: f64,
    /// Yaw-torque coefficient; defaults to `mu·(half_x + half_y)/2`.
    #[serde(default)]
    pub torsional_mu: Option<f64>,
    /// Foot half-length along x, m (center-of-pressure bound).
    pub half_x: f64,
    /// Foot half-width along y, m.
    pub half_y: f64,
    /// Cap on the normal force per contact, N.
    pub fz_max: f64,
    /// Weight on tracking the desired contact wrench.
    pub force_weight: f64,
}

/// One stance contact: a surface foot transmitting a 6D wrench.
#[derive(Debug, Clone)]
pub struct ContactSpec {
    pub frame: String,
    pub mu: f64,
    pub torsional_mu: f64,
    pub half_x: f64,
    pub half_y: f64,
    pub fz_max: f64,
    pub force_weight: f64,
    /// Desired wrench `(τ; f)` tracked by the cost, world axes at the
    /// contact frame.
    pub desired_force: Vector6<f64>,
}

impl ContactSpec {
    pub fn from_config(frame: &str, c: &ContactConfig) -> ContactSpec {
        ContactSpec {
            frame: frame.to_string(),
            mu: c.mu,
            torsional_mu: c.torsional_mu.unwrap_or(c.mu * (c.half_x + c.half_y) / 2.0),
            half_x: c.half_x,
            half_y: c.half_y,
            fz_max: c.fz_max,
            force_weight: c.force_weight,
            desired_force: Vector6::zeros(),
        }
    }
}

fn default_velocity_decay() -> f64 {
    0.1
}
fn default_position_decay() -> f64 {
    0.5
}

/// Controller configuration, loadable from the same structured-text format
/// as robot models.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct WbcConfig {
    /// Command integration step, s.
    pub dt: f64,
    /// Acceleration regularization `λ_q`.
    pub lambda_qdd: f64,
    /// Contact-force regularization `λ_F`.
    pub lambda_force: f64,
    /// Leak time constant pulling the integrated velocity command toward
    /// the measured velocity, s. Zero disables the leak.
    #[serde(default = "default_velocity_decay")]
    pub velocity_decay_time: f64,
    /// Leak time constant for the integrated position command, s.
    #[serde(default = "default_position_decay")]
    pub position_decay_time: f64,
    pub contact: ContactConfig,
    pub tasks: Vec<TaskSpec>,
}

impl WbcConfig {
    pub fn from_toml_str(s: &str) -> Result<WbcConfig, WbcError> {
        let cfg: WbcConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), WbcError> {
        let mut problems = Vec::new();
        if !(self.dt > 0.0) {
            problems.push("dt must be positive".to_string());
        }
        if !(self.lambda_qdd > 0.0) {
            problems.push("lambda_qdd must be positive".to_string());
        }
        if !(self.lambda_force > 0.0) {
            problems.push("lambda_force must be positive".to_string());
        }
        if self.velocity_decay_time < 0.0 || self.position_decay_time < 0.0 {
            problems.push("decay time constants must be nonnegative".to_string());
        }
        if !(self.contact.mu > 0.0) {
            problems.push("contact.mu must be positive".to_string());
        }
        if !(self.contact.half_x > 0.0 && self.contact.half_y > 0.0) {
            problems.push("contact half dimensions must be positive".to_string());
        }
        if !(self.contact.fz_max > 0.0) {
            problems.push("contact.fz_max must be positive".to_string());
        }
        if self.contact.force_weight < 0.0 {
            problems.push("contact.force_weight must be nonnegative".to_string());
        }
        if let Some(tm) = self.contact.torsional_mu {
            if !(tm > 0.0) {
                problems.push("contact.torsional_mu must be positive".to_string());
            }
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tasks {
            if !seen.insert(t.name.clone()) {
                problems.push(format!("duplicate task name {:?}", t.name));
            }
            if t.weight < 0.0 || t.kp < 0.0 || t.kd < 0.0 {
                problems.push(format!(
                    "task {:?}: weight and gains must be nonnegative",
                    t.name
                ));
            }
            let needs_frame = matches!(
                t.kind,
                TaskKind::FramePose | TaskKind::FrameOrientation | TaskKind::FrameHeight
            );
            if needs_frame && t.frame.is_none() {
                problems.push(format!("task {:?} requires a frame", t.name));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(WbcError::Config(problems.join("; ")))
        }
    }
}

/// Loads and validates a controller configuration file.
pub fn load_wbc_config<P: AsRef<Path>>(path: P) -> Result<WbcConfig, WbcError> {
    WbcConfig::from_toml_str(&std::fs::read_to_string(path)?)
}

/// Per-tick reference for one task. Spatial quantities follow the Jacobian
/// convention: world axes, frame-origin point, `(angular; linear)` order.
#[derive(Debug, Clone)]
pub enum TaskReference {
    Pose {
        pose: Isometry3<f64>,
        velocity: Vector6<f64>,
        acceleration: Vector6<f64>,
    },
    Orientation {
        rotation: UnitQuaternion<f64>,
        angular_velocity: Vector3<f64>,
        angular_acceleration: Vector3<f64>,
    },
    Height {
        z: f64,
        velocity: f64,
        acceleration: f64,
    },
    /// Reference capture point and its rate.
    Icp {
        point: Vector2<f64>,
        velocity: Vector2<f64>,
    },
    /// Reference over all joint coordinates (length nv − 6), declaration
    /// order.
    Posture {
        positions: DVector<f64>,
        velocities: DVector<f64>,
    },
}

/// Everything the controller is told on one tick. Tasks without an entry
/// command zero task acceleration; without `desired_forces` the contact
/// wrench targets default to the statics-consistent least-norm split,
/// inflated by `1 + λ_F/w_F` so the force regularizer shrinks it back to
/// exactly the statics solution.
#[derive(Debug, Clone, Default)]
pub struct ControlRefs {
    pub tasks: HashMap<String, TaskReference>,
    pub desired_forces: Option<Vec<Vector6<f64>>>,
}

/// Linearized friction cone of one surface contact: 11 rows `U` with
/// `U F ≥ 0` on the wrench `(τ_x, τ_y, τ_z, f_x, f_y, f_z)`. Rows, in
/// order: unilateral `f_z ≥ 0`; tangential `μ f_z ± f_x ≥ 0`,
/// `μ f_z ± f_y ≥ 0`; center of pressure `l_x f_z ∓ τ_y ≥ 0`,
/// `l_y f_z ∓ τ_x ≥ 0`; torsional `μ_z f_z ∓ τ_z ≥ 0`.
pub fn build_friction_cone(c: &ContactSpec) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(11, 6);
    u[(0, 5)] = 1.0;
    u[(1, 5)] = c.mu;
    u[(1, 3)] = -1.0;
    u[(2, 5)] = c.mu;
    u[(2, 3)] = 1.0;
    u[(3, 5)] = c.mu;
    u[(3, 4)] = -1.0;
    u[(4, 5)] = c.mu;
    u[(4, 4)] = 1.0;
    u[(5, 5)] = c.half_x;
    u[(5, 1)] = -1.0;
    u[(6, 5)] = c.half_x;
    u[(6, 1)] = 1.0;
    u[(7, 5)] = c.half_y;
    u[(7, 0)] = -1.0;
    u[(8, 5)] = c.half_y;
    u[(8, 0)] = 1.0;
    u[(9, 5)] = c.torsional_mu;
    u[(9, 2)] = -1.0;
    u[(10, 5)] = c.torsional_mu;
    u[(10, 2)] = 1.0;
    u
}

/// Least-norm stacked contact wrench balancing the floating-base rows of
/// the bias: solves `(J_cᵀ F)[0..6] = (b+g)[0..6]` with minimum `‖F‖`.
/// This is the statics-consistent force distribution at the current state.
pub fn static_contact_forces(bias_bg: &DVector<f64>, j_c: &DMatrix<f64>) -> Vec<Vector6<f64>> {
    let nc = j_c.nrows() / 6;
    if nc == 0 {
        return Vec::new();
    }
    let b_base = j_c.transpose().rows(0, 6).into_owned();
    let rhs = bias_bg.rows(0, 6).into_owned();
    let f = pinv_rel(&b_base, PINV_CUTOFF) * rhs;
    (0..nc)
        .map(|i| Vector6::from_column_slice(&f.as_slice()[6 * i..6 * i + 6]))
        .collect()
}

/// State-dependent dynamics shared by assembly, recovery, and diagnostics,
/// computed once per control tick.
pub struct TickDynamics {
    pub kin: KinState,
    pub mass_matrix: DMatrix<f64>,
    /// Bias `b + g` (Coriolis, centrifugal, gravity).
    pub bias: DVector<f64>,
    /// Stacked contact Jacobian, 6·n_contacts × nv.
    pub contact_jacobian: DMatrix<f64>,
    pub projected: ProjectedDynamics,
}

impl TickDynamics {
    pub fn compute(
        model: &RobotModel,
        state: &RobotState,
        contacts: &[ContactSpec],
        ics: &InternalConstraintSet,
    ) -> Result<TickDynamics, WbcError> {
        let kin = KinState::compute(model, state)?;
        let mass_matrix = mass_matrix_with(model, &kin);
        let bias = nonlinear_effects_with(model, state, &kin);
        let mut contact_jacobian = DMatrix::zeros(6 * contacts.len(), model.nv);
        for (i, c) in contacts.iter().enumerate() {
            let j = frame_jacobian_with(model, &kin, &c.frame)
                .map_err(|_| WbcError::MissingContactFrame(c.frame.clone()))?;
            contact_jacobian.rows_mut(6 * i, 6).copy_from(&j);
        }
        let projected = projected_dynamics(
            ics,
            model.actuated_v(),
            &mass_matrix,
            &bias,
            &contact_jacobian,
        );
        Ok(TickDynamics {
            kin,
            mass_matrix,
            bias,
            contact_jacobian,
            projected,
        })
    }
}

/// One task after evaluation against the current state: rows `j` over q̈
/// and the right-hand side `rhs = ẍ^d − J̇q̇`, so the residual being
/// minimized is `j·q̈ − rhs`.
pub struct AssembledTask {
    pub name: String,
    pub weight: f64,
    pub j: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

/// The assembled QP plus the affine torque map and everything diagnostics
/// need at the solution.
pub struct WbcAssembly {
    pub problem: QpProblem,
    pub nv: usize,
    pub n_contacts: usize,
    pub tasks: Vec<AssembledTask>,
    pub cones: Vec<DMatrix<f64>>,
    pub desired_forces: Vec<Vector6<f64>>,
    /// Actuated torque as an affine function of the decision vector:
    /// `τ = T_q q̈ + T_f F + t_c`.
    pub torque_q: DMatrix<f64>,
    pub torque_f: DMatrix<f64>,
    pub torque_c: DVector<f64>,
    pub torque_limits: DVector<f64>,
}

fn eval_task(
    model: &RobotModel,
    state: &RobotState,
    tick: &TickDynamics,
    spec: &TaskSpec,
    reference: Option<&TaskReference>,
) -> Result<AssembledTask, WbcError> {
    let bad = |problem: &str| WbcError::BadTask {
        task: spec.name.clone(),
        problem: problem.to_string(),
    };
    let frame = || -> Result<&str, WbcError> {
        spec.frame
            .as_deref()
            .ok_or_else(|| bad("missing frame name"))
    };
    let frame_rows = |name: &str| -> Result<(DMatrix<f64>, Vector6<f64>, Isometry3<f64>), WbcError> {
        let j = frame_jacobian_with(model, &tick.kin, name)?;
        let jdv = jacobian_dot_times_v_with(model, state, &tick.kin, name)?;
        let pose = tick.kin.frame_pose(model, name)?;
        Ok((j, jdv, pose))
    };

    let (j, rhs) = match spec.kind {
        TaskKind::FramePose => {
            let (j, jdv, pose) = frame_rows(frame()?)?;
            let vel = &j * &state.v;
            let mut acc_des = Vector6::zeros();
            if let Some(r) = reference {
                let TaskReference::Pose {
                    pose: pose_d,
                    velocity: vel_d,
                    acceleration: acc_ff,
                } = r
                else {
                    return Err(bad("reference kind does not match a pose task"));
                };
                let e_ang = (pose_d.rotation * pose.rotation.inverse()).scaled_axis();
                let e_lin = pose_d.translation.vector - pose.translation.vector;
                for k in 0..3 {
                    acc_des[k] = acc_ff[k] + spec.kd * (vel_d[k] - vel[k]) + spec.kp * e_ang[k];
                    acc_des[3 + k] =
                        acc_ff[3 + k] + spec.kd * (vel_d[3 + k] - vel[3 + k]) + spec.kp * e_lin[k];
                }
            }
            let rhs = DVector::from_iterator(6, (0..6).map(|k| acc_des[k] - jdv[k]));
            (j, rhs)
        }
        TaskKind::FrameOrientation => {
            let (j, jdv, pose) = frame_rows(frame()?)?;
            let vel = &j * &state.v;
            let mut acc_des = Vector3::zeros();
            if let Some(r) = reference {
                let TaskReference::Orientation {
                    rotation,
                    angular_velocity,
                    angular_acceleration,
                } = r
                else {
                    return Err(bad("reference kind does not match an orientation task"));
                };
                let e_ang = (rotation * pose.rotation.inverse()).scaled_axis();
                for k in 0..3 {
                    acc_des[k] = angular_acceleration[k]
                        + spec.kd * (angular_velocity[k] - vel[k])
                        + spec.kp * e_ang[k];
                }
            }
            let rhs = DVector::from_iterator(3, (0..3).map(|k| acc_des[k] - jdv[k]));
            (j.rows(0, 3).into_owned(), rhs)
        }
        TaskKind::FrameHeight => {
            let (j, jdv, pose) = frame_rows(frame()?)?;
            let vel = &j * &state.v;
            let mut acc_des = 0.0;
            if let Some(r) = reference {
                let TaskReference::Height {
                    z,
                    velocity,
                    acceleration,
                } = r
                else {
                    return Err(bad("reference kind does not match a height task"));
                };
                acc_des = acceleration
                    + spec.kd * (velocity - vel[5])
                    + spec.kp * (z - pose.translation.vector.z);
            }
            let rhs = DVector::from_element(1, acc_des - jdv[5]);
            (j.rows(5, 1).into_owned(), rhs)
        }
        TaskKind::Icp => {
            let (com, com_vel) = com_state_with(model, &tick.kin);
            if !(com.z > 1e-3) {
                return Err(bad("capture point needs a positive CoM height"));
            }
            let (j_com, jdv_com) = com_motion_with(model, state, &tick.kin);
            let omega = (model.gravity.norm() / com.z).sqrt();
            let mut acc_des = Vector2::zeros();
            if let Some(r) = reference {
                let TaskReference::Icp { point, velocity } = r else {
                    return Err(bad("reference kind does not match a capture-point task"));
                };
                let icp = com.xy() + com_vel.xy() / omega;
                let icp_vel_des = velocity - spec.kp * (icp - point);
                acc_des = omega * (icp_vel_des - com_vel.xy());
            }
            let rhs = DVector::from_iterator(2, (0..2).map(|k| acc_des[k] - jdv_com[k]));
            (j_com.rows(0, 2).into_owned(), rhs)
        }
        TaskKind::Posture => {
            let nj = model.nv - 6;
            let mut j = DMatrix::zeros(nj, model.nv);
            for r in 0..nj {
                j[(r, 6 + r)] = 1.0;
            }
            let mut rhs = DVector::zeros(nj);
            if let Some(r) = reference {
                let TaskReference::Posture {
                    positions,
                    velocities,
                } = r
                else {
                    return Err(bad("reference kind does not match a posture task"));
                };
                if positions.len() != nj || velocities.len() != nj {
                    return Err(bad("posture reference length must be nv - 6"));
                }
                for joint in &model.joints {
                    if joint.kind != JointKind::Revolute {
                        continue;
                    }
                    let r = joint.v_index - 6;
                    rhs[r] = spec.kp * (positions[r] - state.q[joint.q_index])
                        + spec.kd * (velocities[r] - state.v[joint.v_index]);
                }
            }
            (j, rhs)
        }
    };
    Ok(AssembledTask {
        name: spec.name.clone(),
        weight: spec.weight,
        j,
        rhs,
    })
}

/// Builds the tick's QP. Equality rows: the six floating-base rows of
/// `A q̈ + b + g = J_cᵀ F` followed by the internal constraint rows
/// `J_int q̈ = 0`. Inequality rows, in order: 11 cone rows per contact
/// (lower bound 0), one normal-force cap per contact, then one row per
/// actuated joint bounding the recovered torque. Box bounds clamp joint
/// accelerations; base accelerations and wrench components are unbounded.
pub fn assemble_wbc_qp(
    model: &RobotModel,
    state: &RobotState,
    tick: &TickDynamics,
    config: &WbcConfig,
    contacts: &[ContactSpec],
    refs: &ControlRefs,
    ics: &InternalConstraintSet,
) -> Result<WbcAssembly, WbcError> {
    let nv = model.nv;
    let nc = contacts.len();
    let n = nv + 6 * nc;
    let k = ics.k();
    let n_a = model.actuated_v().len();

    for name in refs.tasks.keys() {
        if !config.tasks.iter().any(|t| &t.name == name) {
            return Err(WbcError::BadTask {
                task: name.clone(),
                problem: "reference names no configured task".to_string(),
            });
        }
    }

    let mut tasks = Vec::with_capacity(config.tasks.len());
    for spec in &config.tasks {
        tasks.push(eval_task(model, state, tick, spec, refs.tasks.get(&spec.name))?);
    }

    // Desired wrenches: explicit override, or the statics split inflated to
    // cancel the λ_F shrinkage.
    let desired_forces = match &refs.desired_forces {
        Some(f) => {
            if f.len() != nc {
                return Err(WbcError::DimensionMismatch(format!(
                    "{} desired forces for {} contacts",
                    f.len(),
                    nc
                )));
            }
            f.clone()
        }
        None => static_contact_forces(&tick.bias, &tick.contact_jacobian)
            .into_iter()
            .zip(contacts)
            .map(|(f, c)| {
                let scale = if c.force_weight > 0.0 {
                    1.0 + config.lambda_force / c.force_weight
                } else {
                    1.0
                };
                f * scale
            })
            .collect(),
    };

    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut h_q = DMatrix::zeros(nv, nv);
    let mut g_q = DVector::zeros(nv);
    for t in &tasks {
        h_q += 2.0 * t.weight * t.j.transpose() * &t.j;
        g_q += -2.0 * t.weight * t.j.transpose() * &t.rhs;
    }
    for d in 0..nv {
        h_q[(d, d)] += 2.0 * config.lambda_qdd;
    }
    h.view_mut((0, 0), (nv, nv)).copy_from(&h_q);
    g.rows_mut(0, nv).copy_from(&g_q);
    for (i, c) in contacts.iter().enumerate() {
        let o = nv + 6 * i;
        for d in 0..6 {
            h[(o + d, o + d)] = 2.0 * (c.force_weight + config.lambda_force);
            g[o + d] = -2.0 * c.force_weight * desired_forces[i][d];
        }
    }

    let mut a_eq = DMatrix::zeros(6 + k, n);
    let mut b_eq = DVector::zeros(6 + k);
    a_eq.view_mut((0, 0), (6, nv))
        .copy_from(&tick.mass_matrix.rows(0, 6));
    if nc > 0 {
        let jct_base = tick.contact_jacobian.transpose().rows(0, 6).into_owned();
        a_eq.view_mut((0, nv), (6, 6 * nc)).copy_from(&(-jct_base));
    }
    for r in 0..6 {
        b_eq[r] = -tick.bias[r];
    }
    if k > 0 {
        a_eq.view_mut((6, 0), (k, nv)).copy_from(ics.jacobian());
    }

    // Torque rows: τ = recover · (A q̈ + Nᵀ(b+g) − (J_c N)ᵀ F)[6..].
    let nj = nv - 6;
    let recover = &tick.projected.actuation.recover;
    let torque_q = recover * tick.mass_matrix.rows(6, nj);
    let torque_f = -(recover * tick.projected.contact_map.rows(6, nj));
    let torque_c = recover * tick.projected.bias.rows(6, nj);
    let mut torque_limits = DVector::zeros(n_a);
    for (r, &ji) in model.actuated_joints().iter().enumerate() {
        torque_limits[r] = model.joints[ji].torque_limit;
    }

    let n_in = 12 * nc + n_a;
    let mut a_in = DMatrix::zeros(n_in, n);
    let mut lb_in = DVector::from_element(n_in, f64::NEG_INFINITY);
    let mut ub_in = DVector::from_element(n_in, f64::INFINITY);
    let mut cones = Vec::with_capacity(nc);
    for (i, c) in contacts.iter().enumerate() {
        let u = build_friction_cone(c);
        a_in.view_mut((11 * i, nv + 6 * i), (11, 6)).copy_from(&u);
        for r in 0..11 {
            lb_in[11 * i + r] = 0.0;
        }
        cones.push(u);
    }
    for (i, c) in contacts.iter().enumerate() {
        let r = 11 * nc + i;
        a_in[(r, nv + 6 * i + 5)] = 1.0;
        ub_in[r] = c.fz_max;
    }
    let t0 = 12 * nc;
    a_in.view_mut((t0, 0), (n_a, nv)).copy_from(&torque_q);
    if nc > 0 {
        a_in.view_mut((t0, nv), (n_a, 6 * nc)).copy_from(&torque_f);
    }
    for r in 0..n_a {
        lb_in[t0 + r] = -torque_limits[r] - torque_c[r];
        ub_in[t0 + r] = torque_limits[r] - torque_c[r];
    }

    let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(n, f64::INFINITY);
    for joint in &model.joints {
        if joint.kind != JointKind::Revolute {
            continue;
        }
        lb[joint.v_index] = -joint.acceleration_limit;
        ub[joint.v_index] = joint.acceleration_limit;
    }

    Ok(WbcAssembly {
        problem: QpProblem {
            h,
            g,
            a_eq,
            b_eq,
            a_in,
            lb_in,
            ub_in,
            lb,
            ub,
        },
        nv,
        n_contacts: nc,
        tasks,
        cones,
        desired_forces,
        torque_q,
        torque_f,
        torque_c,
        torque_limits,
    })
}

/// Actuated torques realizing `(q̈, F)` under the projected dynamics:
/// `τ = M̄ᵀ (A q̈ + Nᵀ(b+g) − (J_c N)ᵀ F)[6..]` with the truncated
/// dynamically consistent inverse baked into `projected`.
pub fn recover_torques(
    mass_matrix: &DMatrix<f64>,
    projected: &ProjectedDynamics,
    qdd: &DVector<f64>,
    forces: &DVector<f64>,
) -> DVector<f64> {
    let nj = mass_matrix.nrows() - 6;
    let r = mass_matrix * qdd + &projected.bias - &projected.contact_map * forces;
    &projected.actuation.recover * r.rows(6, nj)
}

/// Integrated position/velocity commands for the actuated joints, leaked
/// toward the measured state so the command cannot wind away from the
/// robot.
#[derive(Debug, Clone)]
pub struct JointCommand {
    pub q_des: DVector<f64>,
    pub v_des: DVector<f64>,
}

impl JointCommand {
    /// Command seeded from the measured actuated state.
    pub fn from_state(model: &RobotModel, state: &RobotState) -> JointCommand {
        let n_a = model.actuated_v().len();
        let mut q_des = DVector::zeros(n_a);
        let mut v_des = DVector::zeros(n_a);
        for (r, &ji) in model.actuated_joints().iter().enumerate() {
            q_des[r] = state.q[model.joints[ji].q_index];
            v_des[r] = state.v[model.joints[ji].v_index];
        }
        JointCommand { q_des, v_des }
    }
}

/// One leaky double-integration step:
/// `v ← q̇ + α_v (v − q̇) + q̈ dt`, `q ← q_m + α_q (q − q_m) + v dt`, each
/// clamped to the joint's velocity and position limits. A zero time
/// constant means no leak (`α = 1`).
pub fn integrate_joint_command(
    model: &RobotModel,
    state: &RobotState,
    cmd: &mut JointCommand,
    qdd_actuated: &DVector<f64>,
    dt: f64,
    velocity_decay_time: f64,
    position_decay_time: f64,
) {
    let alpha_v = if velocity_decay_time > 0.0 {
        (-dt / velocity_decay_time).exp()
    } else {
        1.0
    };
    let alpha_q = if position_decay_time > 0.0 {
        (-dt / position_decay_time).exp()
    } else {
        1.0
    };
    for (r, &ji) in model.actuated_joints().iter().enumerate() {
        let joint = &model.joints[ji];
        let q_m = state.q[joint.q_index];
        let v_m = state.v[joint.v_index];
        let mut v = v_m + alpha_v * (cmd.v_des[r] - v_m) + qdd_actuated[r] * dt;
        v = v.clamp(-joint.velocity_limit, joint.velocity_limit);
        let mut q = q_m + alpha_q * (cmd.q_des[r] - q_m) + v * dt;
        q = q.clamp(joint.position_limits.0, joint.position_limits.1);
        cmd.v_des[r] = v;
        cmd.q_des[r] = q;
    }
}

/// Result of one control tick.
#[derive(Debug, Clone)]
pub struct WbcOutput {
    /// Optimal generalized accelerations, length nv.
    pub qdd: DVector<f64>,
    /// Optimal contact wrenches, one per stance contact.
    pub forces: Vec<Vector6<f64>>,
    /// Actuated joint torques, [`RobotModel::actuated_v`] order.
    pub tau: DVector<f64>,
    /// Integrated joint position commands, same order.
    pub q_des: DVector<f64>,
    /// Integrated joint velocity commands, same order.
    pub v_des: DVector<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// `‖(A q̈ + b + g − J_cᵀ F)[0..6]‖∞` at the solution.
    pub base_residual: f64,
    /// `‖J_int q̈‖∞` at the solution.
    pub internal_residual: f64,
    /// Smallest cone-row value over all contacts; nonnegative means every
    /// wrench is inside its cone.
    pub cone_margin: f64,
    /// Per-task tracking residual `‖J q̈ − rhs‖` at the solution.
    pub task_errors: Vec<(String, f64)>,
}

/// Stateful controller: owns the internal constraint set, the warm-started
/// active set, and the integrated joint command.
pub struct WholeBodyController {
    pub config: WbcConfig,
    pub contacts: Vec<ContactSpec>,
    ics: InternalConstraintSet,
    warm: Option<Vec<usize>>,
    command: Option<JointCommand>,
}

impl WholeBodyController {
    pub fn new(
        model: &RobotModel,
        config: WbcConfig,
        stance_frames: &[&str],
    ) -> Result<WholeBodyController, WbcError> {
        config.validate()?;
        for f in stance_frames {
            if model.resolve_frame(f).is_none() {
                return Err(WbcError::MissingContactFrame(f.to_string()));
            }
        }
        let contacts = stance_frames
            .iter()
            .map(|f| ContactSpec::from_config(f, &config.contact))
            .collect();
        Ok(WholeBodyController {
            config,
            contacts,
            ics: InternalConstraintSet::from_model(model),
            warm: None,
            command: None,
        })
    }

    /// Drops the warm active set and the integrated command (use when the
    /// state jumps discontinuously).
    pub fn reset(&mut self) {
        self.warm = None;
        self.command = None;
    }

    pub fn control(
        &mut self,
        model: &RobotModel,
        state: &RobotState,
        refs: &ControlRefs,
    ) -> Result<WbcOutput, WbcError> {
        let tick = TickDynamics::compute(model, state, &self.contacts, &self.ics)?;
        let assembly = assemble_wbc_qp(
            model,
            state,
            &tick,
            &self.config,
            &self.contacts,
            refs,
            &self.ics,
        )?;
        let solution = match &self.warm {
            Some(w) => solve_qp_warm(&assembly.problem, w),
            None => solve_qp(&assembly.problem),
        }?;
        self.warm = Some(solution.active_set.clone());

        let nv = assembly.nv;
        let nc = assembly.n_contacts;
        let qdd = solution.x.rows(0, nv).into_owned();
        let forces_stacked = solution.x.rows(nv, 6 * nc).into_owned();
        let forces: Vec<Vector6<f64>> = (0..nc)
            .map(|i| Vector6::from_column_slice(&forces_stacked.as_slice()[6 * i..6 * i + 6]))
            .collect();
        let tau =
            &assembly.torque_q * &qdd + &assembly.torque_f * &forces_stacked + &assembly.torque_c;

        let mut qdd_actuated = DVector::zeros(model.actuated_v().len());
        for (r, &vi) in model.actuated_v().iter().enumerate() {
            qdd_actuated[r] = qdd[vi];
        }
        let mut command = self
            .command
            .take()
            .unwrap_or_else(|| JointCommand::from_state(model, state));
        integrate_joint_command(
            model,
            state,
            &mut command,
            &qdd_actuated,
            self.config.dt,
            self.config.velocity_decay_time,
            self.config.position_decay_time,
        );
        let (q_des, v_des) = (command.q_des.clone(), command.v_des.clone());
        self.command = Some(command);

        let base_res = (&tick.mass_matrix * &qdd + &tick.bias
            - tick.contact_jacobian.transpose() * &forces_stacked)
            .rows(0, 6)
            .amax();
        let internal_residual = if self.ics.k() > 0 {
            (self.ics.jacobian() * &qdd).amax()
        } else {
            0.0
        };
        let mut cone_margin = f64::INFINITY;
        for (i, u) in assembly.cones.iter().enumerate() {
            let m = u * forces[i];
            cone_margin = cone_margin.min(m.min());
        }
        let task_errors = assembly
            .tasks
            .iter()
            .map(|t| (t.name.clone(), (&t.j * &qdd - &t.rhs).norm()))
            .collect();

        Ok(WbcOutput {
            qdd,
            forces,
            tau,
            q_des,
            v_des,
            iterations: solution.iterations,
            kkt_residual: solution.kkt_residual,
            base_residual: base_res,
            internal_residual,
            cone_margin,
            task_errors,
        })
    }
}

/// One-shot controller tick without warm starting; the command integrator
/// is seeded from the measured state.
pub fn solve_wbc(
    model: &RobotModel,
    state: &RobotState,
    config: &WbcConfig,
    stance_frames: &[&str],
    refs: &ControlRefs,
) -> Result<WbcOutput, WbcError> {
    let mut c = WholeBodyController::new(model, config.clone(), stance_frames)?;
    c.control(model, state, refs)
}
