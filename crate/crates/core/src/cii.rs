//! Centroidal inertia isotropy: a pose-to-pose measure of how far the
//! centroidal inertia has moved from a nominal configuration,
//!
//! ```text
//!   cii(q, q₀) = det(I_G(q)⁻¹ I_G(q₀) − 1₃)
//! ```
//!
//! evaluated over a one-step workspace sweep: a grid of step targets, a
//! straight-line swing-foot path with a triangular apex, the base midway
//! between the feet, each sample posed by damped least-squares inverse
//! kinematics. Comparing the sweep range between two mass distributions of
//! the same topology quantifies how much proximal actuator placement calms
//! the centroidal inertia.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Isometry3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    centroidal_inertia_with, frame_jacobian_with, integrate_positions, DynamicsError, KinState,
};
use crate::model::{JointKind, RobotModel, RobotState};

pub const DEFAULT_IK_TOL: f64 = 1e-6;
pub const DEFAULT_IK_MAX_ITER: usize = 200;

#[derive(Debug, Error)]
pub enum CiiError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("centroidal inertia is numerically singular (condition {condition:.3e})")]
    SingularInertia { condition: f64 },
    #[error("inverse kinematics did not converge (best residual {best:.3e})")]
    IkDidNotConverge { best: f64 },
    #[error("sweep configuration invalid: {0}")]
    BadConfig(String),
}

/// `det(I_G⁻¹ I_G₀ − 1₃)`. Zero when the inertias agree; sign is kept
/// (the determinant of the difference can be negative).
pub fn cii_from_inertia(ig: &Matrix3<f64>, ig0: &Matrix3<f64>) -> Result<f64, CiiError> {
    let sv = ig.svd(false, false).singular_values;
    let condition = sv.max() / sv.min().max(f64::MIN_POSITIVE);
    if !condition.is_finite() || condition > 1e12 {
        return Err(CiiError::SingularInertia { condition });
    }
    let inv = ig
        .try_inverse()
        .ok_or(CiiError::SingularInertia { condition })?;
    Ok((inv * ig0 - Matrix3::identity()).determinant())
}

pub fn cii_value(
    model: &RobotModel,
    state: &RobotState,
    nominal: &RobotState,
) -> Result<f64, CiiError> {
    let ks = KinState::compute(model, state)?;
    let ks0 = KinState::compute(model, nominal)?;
    cii_from_inertia(
        &centroidal_inertia_with(model, &ks),
        &centroidal_inertia_with(model, &ks0),
    )
}

/// One inverse-kinematics goal. With `position_only` the orientation rows
/// are dropped; the sweep uses that for the base, whose orientation is an
/// outcome of the yaw-less legs rather than a free choice.
#[derive(Debug, Clone)]
pub struct IkTarget {
    pub frame: String,
    pub pose: Isometry3<f64>,
    pub position_only: bool,
}

impl IkTarget {
    pub fn pose(frame: &str, pose: Isometry3<f64>) -> Self {
        IkTarget {
            frame: frame.to_string(),
            pose,
            position_only: false,
        }
    }
    pub fn position(frame: &str, pose: Isometry3<f64>) -> Self {
        IkTarget {
            frame: frame.to_string(),
            pose,
            position_only: true,
        }
    }
    fn rows(&self) -> usize {
        if self.position_only {
            3
        } else {
            6
        }
    }
}

pub struct IkResult {
    pub state: RobotState,
    pub iterations: usize,
    pub residual: f64,
}

/// Expansion from independent rates to full rates: every column is a unit
/// coordinate except that a distal column carries `ρ` at its proximal row.
/// Stepping through this keeps rolling pairs consistent to the last bit.
fn coupling_expansion(model: &RobotModel) -> DMatrix<f64> {
    let nv = model.nv;
    let proximal: BTreeMap<usize, ()> = model
        .rolling_pairs
        .iter()
        .map(|p| (model.joints[p.proximal_joint].v_index, ()))
        .collect();
    let distal: BTreeMap<usize, (usize, f64)> = model
        .rolling_pairs
        .iter()
        .map(|p| {
            (
                model.joints[p.distal_joint].v_index,
                (model.joints[p.proximal_joint].v_index, p.ratio()),
            )
        })
        .collect();
    let nr = nv - proximal.len();
    let mut c = DMatrix::zeros(nv, nr);
    let mut col = 0;
    for v in 0..nv {
        if proximal.contains_key(&v) {
            continue;
        }
        c[(v, col)] = 1.0;
        if let Some(&(pv, ratio)) = distal.get(&v) {
            c[(pv, col)] = ratio;
        }
        col += 1;
    }
    c
}

fn pose_error(target: &IkTarget, pose: &Isometry3<f64>, e: &mut DVector<f64>, row: usize) {
    if !target.position_only {
        let e_rot = (target.pose.rotation * pose.rotation.inverse()).scaled_axis();
        e.rows_mut(row, 3).copy_from(&e_rot);
        e.rows_mut(row + 3, 3)
            .copy_from(&(target.pose.translation.vector - pose.translation.vector));
    } else {
        e.rows_mut(row, 3)
            .copy_from(&(target.pose.translation.vector - pose.translation.vector));
    }
}

/// Damped least-squares inverse kinematics over the independent
/// coordinates. Joint limits are clamped each step and proximal angles are
/// re-coupled afterwards, so every iterate is a valid mechanism state.
pub fn solve_ik(
    model: &RobotModel,
    targets: &[IkTarget],
    seed: &RobotState,
    tol: f64,
    max_iter: usize,
) -> Result<IkResult, CiiError> {
    let nv = model.nv;
    let m: usize = targets.iter().map(|t| t.rows()).sum();
    let c = coupling_expansion(model);
    let damping = 1e-8;
    let max_step = 0.5;

    let mut state = seed.clone();
    let mut best = f64::INFINITY;
    for iter in 0..=max_iter {
        let ks = KinState::compute(model, &state)?;
        let mut e = DVector::zeros(m);
        let mut j = DMatrix::zeros(m, nv);
        let mut row = 0;
        for t in targets {
            let pose = ks.frame_pose(model, &t.frame)?;
            pose_error(t, &pose, &mut e, row);
            let jf = frame_jacobian_with(model, &ks, &t.frame)?;
            if t.position_only {
                j.rows_mut(row, 3).copy_from(&jf.rows(3, 3));
            } else {
                j.rows_mut(row, 6).copy_from(&jf);
            }
            row += t.rows();
        }
        let residual = e.amax();
        best = best.min(residual);
        if residual < tol {
            return Ok(IkResult {
                state,
                iterations: iter,
                residual,
            });
        }
        if iter == max_iter {
            break;
        }

        let jr = &j * &c;
        let gram = &jr * jr.transpose() + DMatrix::identity(m, m) * damping;
        let y = gram
            .cholesky()
            .map(|ch| ch.solve(&e))
            .unwrap_or_else(|| DVector::zeros(m));
        let mut dz = jr.transpose() * y;
        let peak = dz.amax();
        if peak > max_step {
            dz *= max_step / peak;
        }
        let dq = &c * dz;
        state.q = integrate_positions(model, &state.q, &dq, 1.0);
        for joint in &model.joints {
            if joint.kind == JointKind::Revolute {
                let (lo, hi) = joint.position_limits;
                state.q[joint.q_index] = state.q[joint.q_index].clamp(lo, hi);
            }
        }
        for pair in &model.rolling_pairs {
            let qd = state.q[model.joints[pair.distal_joint].q_index];
            state.q[model.joints[pair.proximal_joint].q_index] = pair.ratio() * qd;
        }
    }
    Err(CiiError::IkDidNotConverge { best })
}

fn default_forward() -> [f64; 2] {
    [0.1, 0.2]
}
fn default_lateral() -> [f64; 2] {
    [-0.1, 0.1]
}
fn default_points() -> usize {
    10
}
fn default_swing_height() -> f64 {
    0.05
}
fn default_samples() -> usize {
    30
}
fn default_ik_tol() -> f64 {
    DEFAULT_IK_TOL
}
fn default_ik_max_iter() -> usize {
    DEFAULT_IK_MAX_ITER
}

/// One-step workspace sweep description. Step ranges are interpreted at a
/// 1.35 m standing height and scaled by `standing_height / 1.35` for the
/// model under test. Empty frame names and an empty nominal pose resolve
/// to model defaults (first two contact frames, root link, and a flat-foot
/// crouch with the knees bent 90°).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CiiSweepConfig {
    pub stance_frame: String,
    pub swing_frame: String,
    pub base_frame: String,
    pub nominal_pose: BTreeMap<String, f64>,
    pub forward: [f64; 2],
    pub lateral: [f64; 2],
    pub forward_points: usize,
    pub lateral_points: usize,
    pub swing_height: f64,
    pub samples: usize,
    pub ik_tol: f64,
    pub ik_max_iter: usize,
}

impl Default for CiiSweepConfig {
    fn default() -> Self {
        CiiSweepConfig {
            stance_frame: String::new(),
            swing_frame: String::new(),
            base_frame: String::new(),
            nominal_pose: BTreeMap::new(),
            forward: default_forward(),
            lateral: default_lateral(),
            forward_points: default_points(),
            lateral_points: default_points(),
            swing_height: default_swing_height(),
            samples: default_samples(),
            ik_tol: default_ik_tol(),
            ik_max_iter: default_ik_max_iter(),
        }
    }
}

/// Flat-foot crouch with every knee bent 90°: distal knee angles at π/4
/// (the coupling doubles them), hip and ankle pitch at ∓π/4 so the soles
/// stay level. Joints not matched by name stay at zero.
pub fn bent_knee_pose(model: &RobotModel) -> BTreeMap<String, f64> {
    let quarter = std::f64::consts::FRAC_PI_4;
    let mut pose = BTreeMap::new();
    for joint in &model.joints {
        if joint.kind != JointKind::Revolute {
            continue;
        }
        if joint.name.ends_with("hip_pitch") || joint.name.ends_with("ankle_pitch") {
            pose.insert(joint.name.clone(), -quarter);
        } else if joint.name.ends_with("knee_distal") {
            pose.insert(joint.name.clone(), quarter);
        }
    }
    pose
}

impl CiiSweepConfig {
    /// Fills empty frame names and an empty nominal pose from the model.
    pub fn resolved(&self, model: &RobotModel) -> Result<CiiSweepConfig, CiiError> {
        let mut cfg = self.clone();
        if cfg.stance_frame.is_empty() || cfg.swing_frame.is_empty() {
            if model.contact_frames.len() < 2 {
                return Err(CiiError::BadConfig(
                    "model needs two contact frames for the default sweep".to_string(),
                ));
            }
            if cfg.stance_frame.is_empty() {
                cfg.stance_frame = model.contact_frames[1].name.clone();
            }
            if cfg.swing_frame.is_empty() {
                cfg.swing_frame = model.contact_frames[0].name.clone();
            }
        }
        if cfg.base_frame.is_empty() {
            cfg.base_frame = model.links[model.root_link()].name.clone();
        }
        if cfg.nominal_pose.is_empty() {
            cfg.nominal_pose = bent_knee_pose(model);
        }
        cfg.validate(model)?;
        Ok(cfg)
    }

    pub fn validate(&self, model: &RobotModel) -> Result<(), CiiError> {
        let mut problems = Vec::new();
        if self.forward[0] > self.forward[1] || self.lateral[0] > self.lateral[1] {
            problems.push("step ranges must be well ordered".to_string());
        }
        if self.samples < 2 {
            problems.push("samples must be at least 2".to_string());
        }
        if self.forward_points < 1 || self.lateral_points < 1 {
            problems.push("grid needs at least one point per axis".to_string());
        }
        if self.swing_height < 0.0 {
            problems.push("swing_height must be nonnegative".to_string());
        }
        if !(self.ik_tol > 0.0) || self.ik_max_iter == 0 {
            problems.push("ik_tol must be positive and ik_max_iter nonzero".to_string());
        }
        for f in [&self.stance_frame, &self.swing_frame, &self.base_frame] {
            if !f.is_empty() && model.resolve_frame(f).is_none() {
                problems.push(format!("unknown frame {f:?}"));
            }
        }
        for name in self.nominal_pose.keys() {
            if model.joint_index(name).is_none() {
                problems.push(format!("nominal_pose: unknown joint {name:?}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CiiError::BadConfig(problems.join("; ")))
        }
    }

    /// Nominal state: the configured pose, rolling pairs coupled, base
    /// lowered so the stance sole sits at z = 0.
    pub fn nominal_state(&self, model: &RobotModel) -> Result<RobotState, CiiError> {
        let cfg = self.resolved(model)?;
        let mut state = model.neutral_state();
        for (name, &angle) in &cfg.nominal_pose {
            let ji = model
                .joint_index(name)
                .ok_or_else(|| CiiError::BadConfig(format!("unknown joint {name:?}")))?;
            state.q[model.joints[ji].q_index] = angle;
        }
        for pair in &model.rolling_pairs {
            let qd = state.q[model.joints[pair.distal_joint].q_index];
            state.q[model.joints[pair.proximal_joint].q_index] = pair.ratio() * qd;
        }
        let ks = KinState::compute(model, &state)?;
        let z = ks
            .frame_pose(model, &cfg.stance_frame)?
            .translation
            .vector
            .z;
        state.q[2] -= z;
        Ok(state)
    }
}

/// One posed configuration of the sweep. `forward`/`lateral` are the step
/// target in meters (already height-scaled); `sample` indexes the swing
/// trajectory.
pub struct SweepSample {
    pub forward: f64,
    pub lateral: f64,
    pub sample: usize,
    pub state: RobotState,
}

pub struct SweepResult {
    pub nominal: RobotState,
    pub samples: Vec<SweepSample>,
    /// Trajectory points whose IK failed; they are skipped, not fatal.
    pub skipped: usize,
}

fn linspace(range: [f64; 2], n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (range[0] + range[1])];
    }
    (0..n)
        .map(|i| range[0] + (range[1] - range[0]) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Poses every configuration of the one-step sweep: for each grid target
/// the swing foot walks a straight line with a triangular apex of the
/// configured height, the base point stays midway between the feet, and
/// each point is solved by IK seeded with the previous sample.
pub fn sample_step_configurations(
    model: &RobotModel,
    config: &CiiSweepConfig,
) -> Result<SweepResult, CiiError> {
    let cfg = config.resolved(model)?;
    let nominal = cfg.nominal_state(model)?;
    let ks0 = KinState::compute(model, &nominal)?;
    let stance_pose = ks0.frame_pose(model, &cfg.stance_frame)?;
    let swing_pose = ks0.frame_pose(model, &cfg.swing_frame)?;
    let base_pose = ks0.frame_pose(model, &cfg.base_frame)?;
    let scale = model.standing_height / 1.35;
    let mid0 = 0.5 * (stance_pose.translation.vector.xy() + swing_pose.translation.vector.xy());

    let forwards = linspace(cfg.forward.map(|v| v * scale), cfg.forward_points);
    let laterals = linspace(cfg.lateral.map(|v| v * scale), cfg.lateral_points);
    let swing_height = cfg.swing_height * scale;

    let mut samples = Vec::with_capacity(forwards.len() * laterals.len() * cfg.samples);
    let mut skipped = 0;
    for &fx in &forwards {
        for &ly in &laterals {
            let mut seed = nominal.clone();
            for i in 0..cfg.samples {
                let s = i as f64 / (cfg.samples - 1) as f64;
                let apex = 1.0 - (2.0 * s - 1.0).abs();
                let offset = Vector3::new(fx * s, ly * s, swing_height * apex);
                let mut swing_target = swing_pose;
                swing_target.translation.vector += offset;
                // The base tracks the shift of the foot midpoint, keeping
                // its nominal offset from it, so the zero step reproduces
                // the nominal state exactly.
                let mid = 0.5
                    * (stance_pose.translation.vector.xy()
                        + swing_target.translation.vector.xy());
                let mut base_target = base_pose;
                base_target.translation.vector.x += mid.x - mid0.x;
                base_target.translation.vector.y += mid.y - mid0.y;
                let targets = [
                    IkTarget::pose(&cfg.stance_frame, stance_pose),
                    IkTarget::pose(&cfg.swing_frame, swing_target),
                    IkTarget::position(&cfg.base_frame, base_target),
                ];
                match solve_ik(model, &targets, &seed, cfg.ik_tol, cfg.ik_max_iter) {
                    Ok(r) => {
                        seed = r.state.clone();
                        samples.push(SweepSample {
                            forward: fx,
                            lateral: ly,
                            sample: i,
                            state: r.state,
                        });
                    }
                    Err(CiiError::IkDidNotConverge { .. }) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(SweepResult {
        nominal,
        samples,
        skipped,
    })
}

/// Metric value of one sweep configuration.
#[derive(Debug, Clone, Serialize)]
pub struct CiiRow {
    pub forward: f64,
    pub lateral: f64,
    pub sample: usize,
    pub cii: f64,
    pub abs_cii: f64,
}

/// Sweep statistics for one model. The signed range follows the metric
/// definition; `max_abs` is reported alongside for scale.
#[derive(Debug, Clone, Serialize)]
pub struct CiiSeries {
    pub model: String,
    pub configurations: usize,
    pub skipped: usize,
    pub min: f64,
    pub max: f64,
    pub range: f64,
    pub max_abs: f64,
    #[serde(skip)]
    pub rows: Vec<CiiRow>,
}

impl CiiSeries {
    /// Flat table, one row per posed configuration.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("forward,lateral,sample,cii,abs_cii\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.6},{:.6},{},{:.12e},{:.12e}\n",
                r.forward, r.lateral, r.sample, r.cii, r.abs_cii
            ));
        }
        out
    }
}

pub fn run_sweep_series(model: &RobotModel, config: &CiiSweepConfig) -> Result<CiiSeries, CiiError> {
    let sweep = sample_step_configurations(model, config)?;
    let ks0 = KinState::compute(model, &sweep.nominal)?;
    let ig0 = centroidal_inertia_with(model, &ks0);
    let mut rows = Vec::with_capacity(sweep.samples.len());
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut max_abs: f64 = 0.0;
    for s in &sweep.samples {
        let ks = KinState::compute(model, &s.state)?;
        let cii = cii_from_inertia(&centroidal_inertia_with(model, &ks), &ig0)?;
        min = min.min(cii);
        max = max.max(cii);
        max_abs = max_abs.max(cii.abs());
        rows.push(CiiRow {
            forward: s.forward,
            lateral: s.lateral,
            sample: s.sample,
            cii,
            abs_cii: cii.abs(),
        });
    }
    if rows.is_empty() {
        return Err(CiiError::BadConfig(
            "sweep produced no configurations (all IK solves failed)".to_string(),
        ));
    }
    Ok(CiiSeries {
        model: model.name.clone(),
        configurations: rows.len(),
        skipped: sweep.skipped,
        min,
        max,
        range: max - min,
        max_abs,
        rows,
    })
}

/// Paired sweep over two mass distributions of the same topology. The
/// reduction is positive when the first model's range is the smaller one:
/// `(range_b − range_a) / range_b`.
#[derive(Debug, Clone, Serialize)]
pub struct CiiReport {
    pub first: CiiSeries,
    pub second: CiiSeries,
    pub range_reduction: f64,
}

pub fn cii_report(
    model_a: &RobotModel,
    model_b: &RobotModel,
    config: &CiiSweepConfig,
) -> Result<CiiReport, CiiError> {
    if model_a.joints.len() != model_b.joints.len()
        || model_a.links.len() != model_b.links.len()
    {
        return Err(CiiError::BadConfig(
            "paired models must share topology".to_string(),
        ));
    }
    let first = run_sweep_series(model_a, config)?;
    let second = run_sweep_series(model_b, config)?;
    let range_reduction = if second.range > 0.0 {
        (second.range - first.range) / second.range
    } else {
        0.0
    };
    Ok(CiiReport {
        first,
        second,
        range_reduction,
    })
}
