//! Constrained forward dynamics and closed-loop scenario execution.
//!
//! Ground contact is a bilateral weld of the stance soles: the scripted
//! scenarios never break contact, so stance feet are pinned and the
//! controller's cone constraints certify that the pinned reactions are
//! physically realizable. Each substep solves
//!
//! ```text
//!   [A  −Jᵀ] [q̈]   [S_aᵀτ + τ_ext − b − g]
//!   [J    0] [λ] = [−J̇q̇ − β J q̇       ]
//! ```
//!
//! where `J` stacks the 6D weld rows of every stance foot and the internal
//! rolling rows, and `β` is a Baumgarte gain damping constraint-velocity
//! drift. Integration is semi-implicit Euler.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    com_state_with, frame_jacobian_with, integrate_state, jacobian_dot_times_v_with,
    mass_matrix_with, nonlinear_effects_with, DynamicsError, KinState,
};
use crate::model::{load_model, JointKind, ModelError, RobotModel, RobotState};
use crate::rolling::{pinv_rel, InternalConstraintSet, PINV_CUTOFF};
use crate::wbc::{
    load_wbc_config, ControlRefs, TaskKind, TaskReference, WbcConfig, WbcError,
    WholeBodyController,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Controller(#[from] WbcError),
    #[error("constraint stack inconsistent, residual {residual:.3e}")]
    SingularKkt { residual: f64 },
    #[error("scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("scenario parse: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Scatters actuated torques into a generalized-force vector (`S_aᵀ τ`).
pub fn scatter_actuated(model: &RobotModel, tau: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(model.nv);
    for (r, &vi) in model.actuated_v().iter().enumerate() {
        out[vi] = tau[r];
    }
    out
}

/// Diagnostics of one constrained-dynamics substep.
pub struct StepInfo {
    pub qdd: DVector<f64>,
    /// Constraint impulses per unit time: stance wrenches first (6 per
    /// foot), then one internal force per rolling pair.
    pub lambda: DVector<f64>,
    /// `‖J q̇‖∞` after the step (weld + internal rows).
    pub constraint_velocity: f64,
}

/// Advances the welded-contact dynamics by one substep of length `dt`.
/// `external` is an additional generalized force (disturbances).
pub fn step_constrained_dynamics(
    model: &RobotModel,
    state: &RobotState,
    tau_actuated: &DVector<f64>,
    external: &DVector<f64>,
    stance_frames: &[&str],
    ics: &InternalConstraintSet,
    beta: f64,
    dt: f64,
) -> Result<(RobotState, StepInfo), SimError> {
    let ks = KinState::compute(model, state)?;
    let a = mass_matrix_with(model, &ks);
    let bias = nonlinear_effects_with(model, state, &ks);
    let nv = model.nv;
    let k = ics.k();
    let m = 6 * stance_frames.len() + k;

    let mut j = DMatrix::zeros(m, nv);
    let mut jdv = DVector::zeros(m);
    for (i, f) in stance_frames.iter().enumerate() {
        j.rows_mut(6 * i, 6)
            .copy_from(&frame_jacobian_with(model, &ks, f)?);
        jdv.rows_mut(6 * i, 6)
            .copy_from(&jacobian_dot_times_v_with(model, state, &ks, f)?);
    }
    if k > 0 {
        j.rows_mut(6 * stance_frames.len(), k)
            .copy_from(ics.jacobian());
    }

    let force = scatter_actuated(model, tau_actuated) + external - &bias;
    let chol = a
        .clone()
        .cholesky()
        .expect("mass matrix must be positive definite");
    let (qdd, lambda) = if m == 0 {
        (chol.solve(&force), DVector::zeros(0))
    } else {
        let rhs_c = -&jdv - beta * (&j * &state.v);
        let a_inv_jt = chol.solve(&j.transpose());
        let gram = &j * &a_inv_jt;
        let b = &rhs_c - &j * chol.solve(&force);
        let lambda = pinv_rel(&gram, PINV_CUTOFF) * &b;
        // A least-squares λ far from meeting the constraint rows means the
        // stack is inconsistent, not merely redundant. Self-stress
        // directions (the yaw-less legs have one through both welds) carry
        // second-order J̇q̇ mismatch, so the gate must sit well above that.
        let residual = (&gram * &lambda - &b).amax();
        if residual > 1e-4 * (1.0 + b.amax()) {
            return Err(SimError::SingularKkt { residual });
        }
        (chol.solve(&(force + j.transpose() * &lambda)), lambda)
    };

    let next = integrate_state(model, state, &qdd, dt);
    let constraint_velocity = if m == 0 { 0.0 } else { (&j * &next.v).amax() };
    Ok((
        next,
        StepInfo {
            qdd,
            lambda,
            constraint_velocity,
        },
    ))
}

/// A scripted external push: a constant world-frame force applied at a
/// frame origin over `[time, time + duration)`.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    pub time: f64,
    pub duration: f64,
    pub frame: String,
    pub force: [f64; 3],
}

/// Generalized force of one disturbance at time `t` (zero outside its
/// window): the world force maps through the linear rows of the frame
/// Jacobian.
pub fn disturbance_force(
    model: &RobotModel,
    ks: &KinState,
    d: &Disturbance,
    t: f64,
) -> Result<DVector<f64>, SimError> {
    if t < d.time || t >= d.time + d.duration {
        return Ok(DVector::zeros(model.nv));
    }
    let j = frame_jacobian_with(model, ks, &d.frame)?;
    let f = Vector3::new(d.force[0], d.force[1], d.force[2]);
    Ok(j.rows(3, 3).transpose() * f)
}

fn default_beta() -> f64 {
    20.0
}
fn default_one() -> f64 {
    1.0
}

/// One entry of the scenario script.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhaseDoc {
    /// Settling hold right after the initial pose is applied.
    Initialize { duration: f64 },
    /// Hold every captured reference.
    Balance { duration: f64 },
    /// Sinusoidal lateral CoM reference toward the left foot.
    SwingCom {
        duration: f64,
        /// Peak lateral CoM offset, m.
        amplitude: f64,
        #[serde(default = "default_one")]
        period: f64,
    },
    /// Sinusoidal base-height reference (raised-cosine dip).
    Squat {
        duration: f64,
        /// Peak-to-trough depth, m.
        amplitude: f64,
        #[serde(default = "default_one")]
        period: f64,
    },
}

impl PhaseDoc {
    pub fn duration(&self) -> f64 {
        match self {
            PhaseDoc::Initialize { duration }
            | PhaseDoc::Balance { duration }
            | PhaseDoc::SwingCom { duration, .. }
            | PhaseDoc::Squat { duration, .. } => *duration,
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            PhaseDoc::Initialize { .. } => "initialize",
            PhaseDoc::Balance { .. } => "balance",
            PhaseDoc::SwingCom { .. } => "swing_com",
            PhaseDoc::Squat { .. } => "squat",
        }
    }
}

/// On-disk scenario description. `model` and `controller` are paths
/// resolved relative to the scenario file's directory.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub name: String,
    pub model: String,
    pub controller: String,
    /// Stance contact frames; defaults to every contact frame of the model.
    #[serde(default)]
    pub stance: Vec<String>,
    pub sim_dt: f64,
    pub control_dt: f64,
    #[serde(default = "default_beta")]
    pub baumgarte_beta: f64,
    /// Joint angles of the starting pose; unlisted joints start at zero and
    /// rolling-pair proximal angles are overwritten to satisfy the coupling.
    #[serde(default)]
    pub initial_pose: BTreeMap<String, f64>,
    pub phases: Vec<PhaseDoc>,
    #[serde(default)]
    pub disturbances: Vec<Disturbance>,
}

/// A loaded, validated scenario.
pub struct Scenario {
    pub doc: ScenarioDoc,
    pub model: RobotModel,
    pub controller: WbcConfig,
}

impl Scenario {
    pub fn stance_frames(&self) -> Vec<String> {
        if self.doc.stance.is_empty() {
            self.model
                .contact_frames
                .iter()
                .map(|c| c.name.clone())
                .collect()
        } else {
            self.doc.stance.clone()
        }
    }

    pub fn total_time(&self) -> f64 {
        self.doc.phases.iter().map(|p| p.duration()).sum()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let d = &self.doc;
        let mut problems = Vec::new();
        if !(d.sim_dt > 0.0 && d.sim_dt <= 1e-3) {
            problems.push("sim_dt must be in (0, 1e-3]".to_string());
        }
        let ratio = d.control_dt / d.sim_dt;
        if !(d.control_dt >= d.sim_dt) || (ratio - ratio.round()).abs() > 1e-9 {
            problems.push("control_dt must be an integer multiple of sim_dt".to_string());
        }
        if d.baumgarte_beta < 0.0 {
            problems.push("baumgarte_beta must be nonnegative".to_string());
        }
        if d.phases.is_empty() {
            problems.push("at least one phase is required".to_string());
        }
        for p in &d.phases {
            if !(p.duration() > 0.0) {
                problems.push(format!("phase {} needs a positive duration", p.name()));
            }
            match p {
                PhaseDoc::SwingCom {
                    amplitude, period, ..
                }
                | PhaseDoc::Squat {
                    amplitude, period, ..
                } => {
                    if !(*period > 0.0) || *amplitude < 0.0 {
                        problems.push(format!(
                            "phase {}: amplitude must be nonnegative, period positive",
                            p.name()
                        ));
                    }
                }
                _ => {}
            }
        }
        for name in &d.stance {
            if self.model.resolve_frame(name).is_none() {
                problems.push(format!("unknown stance frame {name:?}"));
            }
        }
        for (name, _) in &d.initial_pose {
            match self.model.joint_index(name) {
                None => problems.push(format!("initial_pose: unknown joint {name:?}")),
                Some(ji) => {
                    if self.model.joints[ji].kind != JointKind::Revolute {
                        problems.push(format!("initial_pose: {name:?} is not a revolute joint"));
                    }
                }
            }
        }
        for dist in &d.disturbances {
            if self.model.resolve_frame(&dist.frame).is_none() {
                problems.push(format!("disturbance at unknown frame {:?}", dist.frame));
            }
            if dist.duration <= 0.0 {
                problems.push("disturbance duration must be positive".to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Scenario(problems.join("; ")))
        }
    }

    /// Starting state: requested joint angles, rolling-pair proximal
    /// coordinates forced consistent, and the base lowered so the stance
    /// soles sit at z = 0 on average.
    pub fn initial_state(&self) -> Result<RobotState, SimError> {
        let model = &self.model;
        let mut state = model.neutral_state();
        for (name, &angle) in &self.doc.initial_pose {
            let ji = model
                .joint_index(name)
                .ok_or_else(|| SimError::Scenario(format!("unknown joint {name:?}")))?;
            state.q[model.joints[ji].q_index] = angle;
        }
        for pair in &model.rolling_pairs {
            let qd = state.q[model.joints[pair.distal_joint].q_index];
            state.q[model.joints[pair.proximal_joint].q_index] = pair.ratio() * qd;
        }
        let ks = KinState::compute(model, &state)?;
        let stance = self.stance_frames();
        if !stance.is_empty() {
            let mut z = 0.0;
            for f in &stance {
                z += ks.frame_pose(model, f)?.translation.vector.z;
            }
            state.q[2] -= z / stance.len() as f64;
        }
        Ok(state)
    }
}

/// Loads a scenario file plus the model and controller configs it points
/// to.
pub fn load_scenario<P: AsRef<Path>>(path: P) -> Result<Scenario, SimError> {
    let path = path.as_ref();
    let doc: ScenarioDoc = toml::from_str(&std::fs::read_to_string(path)?)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            dir.join(pb)
        }
    };
    let model = load_model(resolve(&doc.model))?;
    let controller = load_wbc_config(resolve(&doc.controller))?;
    let scenario = Scenario {
        doc,
        model,
        controller,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// One logged control tick.
#[derive(Debug, Clone)]
pub struct TickRecord {
    pub t: f64,
    pub phase: &'static str,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub base_residual: f64,
    pub internal_qdd: f64,
    pub internal_vel: f64,
    pub rolling_angle_residual: f64,
    pub cone_margin: f64,
    pub com: Vector3<f64>,
    pub com_ref: Vector2<f64>,
    pub icp: Vector2<f64>,
    pub icp_ref: Vector2<f64>,
    pub base_z: f64,
    pub base_z_ref: f64,
    pub base_rpy: Vector3<f64>,
    pub base_rpy_ref: Vector3<f64>,
    pub fz: Vec<f64>,
    pub tau: DVector<f64>,
    pub qdd_max: f64,
}

/// Uniformly sampled run log; `rows` holds every `log_every`-th control
/// tick.
pub struct TrajectoryLog {
    pub stance: Vec<String>,
    pub n_tau: usize,
    pub rows: Vec<TickRecord>,
}

impl TrajectoryLog {
    pub fn header(&self) -> String {
        let mut h = String::from(
            "t,phase,iterations,kkt_residual,base_residual,internal_qdd,internal_vel,\
             rolling_angle_residual,cone_margin,com_x,com_y,com_z,com_ref_x,com_ref_y,\
             icp_x,icp_y,icp_ref_x,icp_ref_y,base_z,base_z_ref,roll,pitch,yaw,\
             roll_ref,pitch_ref,yaw_ref",
        );
        for s in &self.stance {
            let _ = write!(h, ",fz_{s}");
        }
        for i in 0..self.n_tau {
            let _ = write!(h, ",tau_{i}");
        }
        h.push_str(",qdd_max");
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{:.6},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                r.t,
                r.phase,
                r.iterations,
                r.kkt_residual,
                r.base_residual,
                r.internal_qdd,
                r.internal_vel,
                r.rolling_angle_residual,
                r.cone_margin
            );
            for v in [
                r.com.x,
                r.com.y,
                r.com.z,
                r.com_ref.x,
                r.com_ref.y,
                r.icp.x,
                r.icp.y,
                r.icp_ref.x,
                r.icp_ref.y,
                r.base_z,
                r.base_z_ref,
                r.base_rpy.x,
                r.base_rpy.y,
                r.base_rpy.z,
                r.base_rpy_ref.x,
                r.base_rpy_ref.y,
                r.base_rpy_ref.z,
            ] {
                let _ = write!(out, ",{v:.9e}");
            }
            for f in &r.fz {
                let _ = write!(out, ",{f:.9e}");
            }
            for k in 0..r.tau.len() {
                let _ = write!(out, ",{:.9e}", r.tau[k]);
            }
            let _ = write!(out, ",{:.9e}", r.qdd_max);
            out.push('\n');
        }
        out
    }
}

/// Aggregates accumulated over every control tick of one phase.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseSummary {
    pub name: &'static str,
    pub start: f64,
    pub end: f64,
    pub com_xy_rms: f64,
    pub icp_rms: f64,
    pub base_z_rms: f64,
    pub base_rpy_max_deg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureRecord {
    pub time: f64,
    pub error: String,
}

/// Whole-run report serialized next to the CSV log.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub ticks: usize,
    pub completed: bool,
    pub max_internal_vel: f64,
    pub max_rolling_angle_residual: f64,
    pub max_base_residual: f64,
    pub min_cone_margin: f64,
    pub max_solver_iterations: usize,
    pub mean_solver_iterations: f64,
    pub max_kkt_residual: f64,
    pub phases: Vec<PhaseSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureRecord>,
}

pub struct ScenarioResult {
    pub log: TrajectoryLog,
    pub summary: RunSummary,
    pub final_state: RobotState,
}

struct PhaseWindow {
    phase: PhaseDoc,
    start: f64,
    end: f64,
}

struct PhaseAccum {
    name: &'static str,
    start: f64,
    end: f64,
    n: usize,
    com_sq: f64,
    icp_sq: f64,
    z_sq: f64,
    rpy_max: f64,
}

/// Captured once at scenario start; every reference is derived from these.
struct Captured {
    foot_poses: BTreeMap<String, nalgebra::Isometry3<f64>>,
    base_pose: nalgebra::Isometry3<f64>,
    posture: DVector<f64>,
    com_xy: Vector2<f64>,
    omega: f64,
}

fn capture_references(
    model: &RobotModel,
    state: &RobotState,
    stance: &[String],
) -> Result<Captured, SimError> {
    let ks = KinState::compute(model, state)?;
    let mut foot_poses = BTreeMap::new();
    for f in stance {
        foot_poses.insert(f.clone(), ks.frame_pose(model, f)?);
    }
    let base_pose = ks.frame_pose(model, model.links[model.root_link()].name.as_str())?;
    let nj = model.nv - 6;
    let mut posture = DVector::zeros(nj);
    for joint in &model.joints {
        if joint.kind == JointKind::Revolute {
            posture[joint.v_index - 6] = state.q[joint.q_index];
        }
    }
    let (com, _) = com_state_with(model, &ks);
    let omega = (model.gravity.norm() / com.z.max(1e-3)).sqrt();
    Ok(Captured {
        foot_poses,
        base_pose,
        posture,
        com_xy: com.xy(),
        omega,
    })
}

/// CoM reference and derivatives for the active phase, plus the base
/// height reference.
struct TickRefs {
    refs: ControlRefs,
    com_ref: Vector2<f64>,
    icp_ref: Vector2<f64>,
    base_z_ref: f64,
    base_rpy_ref: Vector3<f64>,
}

fn build_references(
    cap: &Captured,
    config: &WbcConfig,
    window: &PhaseWindow,
    t: f64,
) -> TickRefs {
    let tp = t - window.start;
    let (com_ref, com_ref_vel, com_ref_acc) = match &window.phase {
        PhaseDoc::SwingCom {
            amplitude, period, ..
        } => {
            let w = 2.0 * std::f64::consts::PI / period;
            (
                cap.com_xy + Vector2::new(0.0, amplitude * (w * tp).sin()),
                Vector2::new(0.0, amplitude * w * (w * tp).cos()),
                Vector2::new(0.0, -amplitude * w * w * (w * tp).sin()),
            )
        }
        _ => (cap.com_xy, Vector2::zeros(), Vector2::zeros()),
    };
    let (dz, dz_vel, dz_acc) = match &window.phase {
        PhaseDoc::Squat {
            amplitude, period, ..
        } => {
            let w = 2.0 * std::f64::consts::PI / period;
            (
                -amplitude * (1.0 - (w * tp).cos()) / 2.0,
                -amplitude * w * (w * tp).sin() / 2.0,
                -amplitude * w * w * (w * tp).cos() / 2.0,
            )
        }
        _ => (0.0, 0.0, 0.0),
    };
    let icp_ref = com_ref + com_ref_vel / cap.omega;
    let icp_ref_vel = com_ref_vel + com_ref_acc / cap.omega;
    let base_z_ref = cap.base_pose.translation.vector.z + dz;

    let mut refs = ControlRefs::default();
    for task in &config.tasks {
        let r = match task.kind {
            TaskKind::FramePose => {
                let frame = task.frame.as_deref().unwrap_or("");
                let pose = cap
                    .foot_poses
                    .get(frame)
                    .copied()
                    .unwrap_or(cap.base_pose);
                TaskReference::Pose {
                    pose,
                    velocity: Vector6::zeros(),
                    acceleration: Vector6::zeros(),
                }
            }
            TaskKind::FrameOrientation => TaskReference::Orientation {
                rotation: cap.base_pose.rotation,
                angular_velocity: Vector3::zeros(),
                angular_acceleration: Vector3::zeros(),
            },
            TaskKind::FrameHeight => TaskReference::Height {
                z: base_z_ref,
                velocity: dz_vel,
                acceleration: dz_acc,
            },
            TaskKind::Icp => TaskReference::Icp {
                point: icp_ref,
                velocity: icp_ref_vel,
            },
            TaskKind::Posture => TaskReference::Posture {
                positions: cap.posture.clone(),
                velocities: DVector::zeros(cap.posture.len()),
            },
        };
        refs.tasks.insert(task.name.clone(), r);
    }
    let rpy = cap.base_pose.rotation.euler_angles();
    TickRefs {
        refs,
        com_ref,
        icp_ref,
        base_z_ref,
        base_rpy_ref: Vector3::new(rpy.0, rpy.1, rpy.2),
    }
}

/// Runs a scenario to completion (or to the first controller failure,
/// which truncates the log and sets the failure record). `log_every ≥ 1`
/// decimates the stored rows; summaries always cover every tick.
pub fn run_scenario(scenario: &Scenario, log_every: usize) -> Result<ScenarioResult, SimError> {
    scenario.validate()?;
    let model = &scenario.model;
    let stance = scenario.stance_frames();
    let stance_refs: Vec<&str> = stance.iter().map(|s| s.as_str()).collect();
    let log_every = log_every.max(1);

    let mut state = scenario.initial_state()?;
    let cap = capture_references(model, &state, &stance)?;
    let ics = InternalConstraintSet::from_model(model);
    let mut controller =
        WholeBodyController::new(model, scenario.controller.clone(), &stance_refs)?;

    let windows: Vec<PhaseWindow> = {
        let mut t0 = 0.0;
        scenario
            .doc
            .phases
            .iter()
            .map(|p| {
                let w = PhaseWindow {
                    phase: p.clone(),
                    start: t0,
                    end: t0 + p.duration(),
                };
                t0 = w.end;
                w
            })
            .collect()
    };
    let total = scenario.total_time();
    let ticks = (total / scenario.doc.control_dt).round() as usize;
    let substeps = (scenario.doc.control_dt / scenario.doc.sim_dt).round() as usize;

    let mut accums: Vec<PhaseAccum> = windows
        .iter()
        .map(|w| PhaseAccum {
            name: w.phase.name(),
            start: w.start,
            end: w.end,
            n: 0,
            com_sq: 0.0,
            icp_sq: 0.0,
            z_sq: 0.0,
            rpy_max: 0.0,
        })
        .collect();
    let mut rows = Vec::new();
    let mut max_internal_vel: f64 = 0.0;
    let mut max_angle_res: f64 = 0.0;
    let mut max_base_res: f64 = 0.0;
    let mut min_cone: f64 = f64::INFINITY;
    let mut max_iters = 0usize;
    let mut sum_iters = 0usize;
    let mut max_kkt: f64 = 0.0;
    let mut failure = None;
    let mut done_ticks = 0usize;

    'run: for tick in 0..ticks {
        let t = tick as f64 * scenario.doc.control_dt;
        let wi = windows
            .iter()
            .position(|w| t < w.end)
            .unwrap_or(windows.len() - 1);
        let tr = build_references(&cap, &scenario.controller, &windows[wi], t);

        let out = match controller.control(model, &state, &tr.refs) {
            Ok(o) => o,
            Err(e) => {
                failure = Some(FailureRecord {
                    time: t,
                    error: e.to_string(),
                });
                break 'run;
            }
        };

        let mut internal_vel: f64 = 0.0;
        for s in 0..substeps {
            let ts = t + s as f64 * scenario.doc.sim_dt;
            let ks = KinState::compute(model, &state)?;
            let mut external = DVector::zeros(model.nv);
            for d in &scenario.doc.disturbances {
                external += disturbance_force(model, &ks, d, ts)?;
            }
            let step = step_constrained_dynamics(
                model,
                &state,
                &out.tau,
                &external,
                &stance_refs,
                &ics,
                scenario.doc.baumgarte_beta,
                scenario.doc.sim_dt,
            );
            let (next, _info) = match step {
                Ok(s) => s,
                Err(e) => {
                    failure = Some(FailureRecord {
                        time: ts,
                        error: e.to_string(),
                    });
                    break 'run;
                }
            };
            state = next;
            internal_vel = internal_vel.max(if ics.k() > 0 {
                ics.velocity_residual(&state.v).amax()
            } else {
                0.0
            });
        }

        let ks = KinState::compute(model, &state)?;
        let (com, com_vel) = com_state_with(model, &ks);
        let icp = com.xy() + com_vel.xy() / cap.omega;
        let rpy = state.base_orientation().euler_angles();
        let base_rpy = Vector3::new(rpy.0, rpy.1, rpy.2);
        let angle_res = crate::rolling::constraint_residual(model, &state).amax();

        max_internal_vel = max_internal_vel.max(internal_vel);
        max_angle_res = max_angle_res.max(angle_res);
        max_base_res = max_base_res.max(out.base_residual);
        min_cone = min_cone.min(out.cone_margin);
        max_iters = max_iters.max(out.iterations);
        sum_iters += out.iterations;
        max_kkt = max_kkt.max(out.kkt_residual);
        done_ticks += 1;

        let acc = &mut accums[wi];
        acc.n += 1;
        acc.com_sq += (com.xy() - tr.com_ref).norm_squared();
        acc.icp_sq += (icp - tr.icp_ref).norm_squared();
        acc.z_sq += (state.q[2] - tr.base_z_ref).powi(2);
        acc.rpy_max = acc.rpy_max.max((base_rpy - tr.base_rpy_ref).amax());

        if tick % log_every == 0 {
            rows.push(TickRecord {
                t,
                phase: windows[wi].phase.name(),
                iterations: out.iterations,
                kkt_residual: out.kkt_residual,
                base_residual: out.base_residual,
                internal_qdd: out.internal_residual,
                internal_vel,
                rolling_angle_residual: angle_res,
                cone_margin: out.cone_margin,
                com,
                com_ref: tr.com_ref,
                icp,
                icp_ref: tr.icp_ref,
                base_z: state.q[2],
                base_z_ref: tr.base_z_ref,
                base_rpy,
                base_rpy_ref: tr.base_rpy_ref,
                fz: out.forces.iter().map(|f| f[5]).collect(),
                tau: out.tau.clone(),
                qdd_max: out.qdd.amax(),
            });
        }
    }

    let phases = accums
        .iter()
        .filter(|a| a.n > 0)
        .map(|a| PhaseSummary {
            name: a.name,
            start: a.start,
            end: a.end,
            com_xy_rms: (a.com_sq / a.n as f64).sqrt(),
            icp_rms: (a.icp_sq / a.n as f64).sqrt(),
            base_z_rms: (a.z_sq / a.n as f64).sqrt(),
            base_rpy_max_deg: a.rpy_max.to_degrees(),
        })
        .collect();
    let summary = RunSummary {
        scenario: scenario.doc.name.clone(),
        ticks: done_ticks,
        completed: failure.is_none(),
        max_internal_vel,
        max_rolling_angle_residual: max_angle_res,
        max_base_residual: max_base_res,
        min_cone_margin: min_cone,
        max_solver_iterations: max_iters,
        mean_solver_iterations: if done_ticks > 0 {
            sum_iters as f64 / done_ticks as f64
        } else {
            0.0
        },
        max_kkt_residual: max_kkt,
        phases,
        failure,
    };
    Ok(ScenarioResult {
        log: TrajectoryLog {
            stance,
            n_tau: model.actuated_v().len(),
            rows,
        },
        summary,
        final_state: state,
    })
}
