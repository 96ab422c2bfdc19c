//! Floating-base kinematics and dynamics.
//!
//! All spatial quantities are expressed on world axes referenced at the
//! world origin (see [`crate::spatial`]), so the recursions below contain no
//! coordinate transforms. Public Jacobians and accelerations are
//! re-referenced at the query frame's origin before being returned: rows are
//! `(angular; linear)` on world axes, and the linear rows describe the
//! motion of the frame origin point.
//!
//! The mass matrix comes from the composite rigid body algorithm, bias
//! forces from a recursive Newton-Euler pass with gravity folded into the
//! base acceleration.

use nalgebra::{DMatrix, DVector, Isometry3, Matrix3, Matrix6xX, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::model::{JointKind, RobotModel, RobotState};
use crate::spatial::{
    ang, crf, crm, motion, point_acceleration, point_velocity, shift_motion_to_point,
    spatial_inertia_at_origin, SpatialMotion,
};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("unknown frame {0:?}")]
    UnknownFrame(String),
    #[error("base quaternion norm deviates from 1 by {0:.3e}")]
    NonUnitQuaternion(f64),
}

/// Per-state kinematic and inertial data shared by every dynamics routine.
pub struct KinState {
    /// World pose of each link frame.
    pub link_pose: Vec<Isometry3<f64>>,
    /// Per joint: world-origin motion subspace, 6 columns for the floating
    /// base, 1 for a revolute joint.
    pub joint_subspace: Vec<Matrix6xX<f64>>,
    /// Origin-referenced spatial velocity of each link.
    pub link_vel: Vec<SpatialMotion>,
    /// Origin-referenced spatial inertia of each link.
    pub link_inertia: Vec<nalgebra::Matrix6<f64>>,
}

impl KinState {
    /// Runs the forward pass. Fails if the base quaternion is not unit
    /// length to within 1e-8; downstream algorithms assume a rotation.
    pub fn compute(model: &RobotModel, state: &RobotState) -> Result<KinState, DynamicsError> {
        let quat_norm = nalgebra::Quaternion::new(state.q[3], state.q[4], state.q[5], state.q[6])
            .norm();
        if (quat_norm - 1.0).abs() > 1e-8 {
            return Err(DynamicsError::NonUnitQuaternion((quat_norm - 1.0).abs()));
        }

        let n_links = model.links.len();
        let mut link_pose = vec![Isometry3::identity(); n_links];
        let mut joint_subspace = vec![Matrix6xX::zeros(0); model.joints.len()];
        let mut link_vel = vec![SpatialMotion::zeros(); n_links];
        let mut link_inertia = vec![nalgebra::Matrix6::zeros(); n_links];

        for &ji in &model.traversal {
            let joint = &model.joints[ji];
            match joint.kind {
                JointKind::FloatingBase => {
                    let base = state.base_pose();
                    let pose = base * joint.origin;
                    let r = base.rotation.to_rotation_matrix();
                    let p = base.translation.vector;
                    // Columns map the body-frame twist (ω_b; v_b) to the
                    // origin-referenced world twist.
                    let mut s = Matrix6xX::zeros(6);
                    for k in 0..3 {
                        let ax = r * Vector3::ith(k, 1.0);
                        s.column_mut(k).copy_from(&motion(ax, p.cross(&ax)));
                        let lin_ax = r * Vector3::ith(k, 1.0);
                        s.column_mut(k + 3)
                            .copy_from(&motion(Vector3::zeros(), lin_ax));
                    }
                    let qd = state.v.rows(0, 6);
                    link_vel[joint.child_link] = &s * qd;
                    joint_subspace[ji] = s;
                    link_pose[joint.child_link] = pose;
                }
                JointKind::Revolute => {
                    let parent = joint.parent_link.expect("revolute joint has a parent");
                    let q = state.q[joint.q_index];
                    let rot = UnitQuaternion::from_axis_angle(
                        &nalgebra::Unit::new_normalize(joint.axis),
                        q,
                    );
                    let pose = link_pose[parent] * joint.origin * rot;
                    let axis_w = pose.rotation * joint.axis;
                    let p = pose.translation.vector;
                    let mut s = Matrix6xX::zeros(1);
                    s.column_mut(0).copy_from(&motion(axis_w, p.cross(&axis_w)));
                    link_vel[joint.child_link] =
                        link_vel[parent] + s.column(0) * state.v[joint.v_index];
                    joint_subspace[ji] = s;
                    link_pose[joint.child_link] = pose;
                }
            }
        }

        for (li, link) in model.links.iter().enumerate() {
            let pose = &link_pose[li];
            let com_w = pose * nalgebra::Point3::from(link.com);
            let r = pose.rotation.to_rotation_matrix();
            let inertia_w = r.matrix() * link.inertia * r.matrix().transpose();
            link_inertia[li] =
                spatial_inertia_at_origin(link.mass, &com_w.coords, &inertia_w);
        }

        Ok(KinState {
            link_pose,
            joint_subspace,
            link_vel,
            link_inertia,
        })
    }

    /// World pose of a named frame (contact frame or link frame).
    pub fn frame_pose(
        &self,
        model: &RobotModel,
        frame: &str,
    ) -> Result<Isometry3<f64>, DynamicsError> {
        let (link, offset) = model
            .resolve_frame(frame)
            .ok_or_else(|| DynamicsError::UnknownFrame(frame.into()))?;
        Ok(self.link_pose[link] * offset)
    }
}

/// World poses of all link frames plus named-frame lookup.
pub fn forward_kinematics(
    model: &RobotModel,
    state: &RobotState,
) -> Result<KinState, DynamicsError> {
    KinState::compute(model, state)
}

/// Geometric Jacobian of a frame: 6×nv, rows `(angular; linear)` on world
/// axes, linear rows giving the velocity of the frame origin point.
pub fn frame_jacobian(
    model: &RobotModel,
    state: &RobotState,
    frame: &str,
) -> Result<DMatrix<f64>, DynamicsError> {
    let ks = KinState::compute(model, state)?;
    frame_jacobian_with(model, &ks, frame)
}

/// As [`frame_jacobian`], reusing a computed [`KinState`].
pub fn frame_jacobian_with(
    model: &RobotModel,
    ks: &KinState,
    frame: &str,
) -> Result<DMatrix<f64>, DynamicsError> {
    let (link, offset) = model
        .resolve_frame(frame)
        .ok_or_else(|| DynamicsError::UnknownFrame(frame.into()))?;
    let p_f = (ks.link_pose[link] * offset).translation.vector;
    let mut j = DMatrix::zeros(6, model.nv);
    for &ji in &model.link_ancestor_joints[link] {
        let joint = &model.joints[ji];
        let s = &ks.joint_subspace[ji];
        for c in 0..s.ncols() {
            let col = shift_motion_to_point(&s.column(c).into_owned(), &p_f);
            j.view_mut((0, joint.v_index + c), (6, 1)).copy_from(&col);
        }
    }
    Ok(j)
}

/// The drift term `J̇ q̇` of a frame: the 6D acceleration the frame origin
/// would undergo with zero joint accelerations and no gravity. Pairs with
/// [`frame_jacobian`] so that the frame acceleration is `J q̈ + J̇ q̇`.
pub fn jacobian_dot_times_v(
    model: &RobotModel,
    state: &RobotState,
    frame: &str,
) -> Result<nalgebra::Vector6<f64>, DynamicsError> {
    let ks = KinState::compute(model, state)?;
    jacobian_dot_times_v_with(model, state, &ks, frame)
}

/// As [`jacobian_dot_times_v`], reusing a computed [`KinState`].
pub fn jacobian_dot_times_v_with(
    model: &RobotModel,
    state: &RobotState,
    ks: &KinState,
    frame: &str,
) -> Result<nalgebra::Vector6<f64>, DynamicsError> {
    let (link, offset) = model
        .resolve_frame(frame)
        .ok_or_else(|| DynamicsError::UnknownFrame(frame.into()))?;
    // Bias spatial accelerations with q̈ = 0: a_i = a_parent + v_i × S q̇.
    let mut acc = vec![SpatialMotion::zeros(); model.links.len()];
    for &ji in &model.traversal {
        let joint = &model.joints[ji];
        let child = joint.child_link;
        let s = &ks.joint_subspace[ji];
        let qd = state.v.rows(joint.v_index, s.ncols());
        let parent_acc = joint
            .parent_link
            .map(|p| acc[p])
            .unwrap_or_else(SpatialMotion::zeros);
        acc[child] = parent_acc + crm(&ks.link_vel[child]) * (s * qd);
    }
    let p_f = (ks.link_pose[link] * offset).translation.vector;
    let a = acc[link];
    let v = ks.link_vel[link];
    Ok(motion(ang(&a), point_acceleration(&a, &v, &p_f)))
}

/// Joint-space mass matrix by the composite rigid body algorithm. Symmetric
/// positive definite for any model with positive link masses.
pub fn mass_matrix(model: &RobotModel, state: &RobotState) -> Result<DMatrix<f64>, DynamicsError> {
    let ks = KinState::compute(model, state)?;
    Ok(mass_matrix_with(model, &ks))
}

/// As [`mass_matrix`], reusing a computed [`KinState`].
pub fn mass_matrix_with(model: &RobotModel, ks: &KinState) -> DMatrix<f64> {
    let mut composite = ks.link_inertia.clone();
    for &ji in model.traversal.iter().rev() {
        let joint = &model.joints[ji];
        if let Some(p) = joint.parent_link {
            let child_inertia = composite[joint.child_link];
            composite[p] += child_inertia;
        }
    }
    let mut a = DMatrix::zeros(model.nv, model.nv);
    for &ji in &model.traversal {
        let joint = &model.joints[ji];
        let s_i = &ks.joint_subspace[ji];
        let f = composite[joint.child_link] * s_i;
        let block = s_i.transpose() * &f;
        a.view_mut((joint.v_index, joint.v_index), (s_i.ncols(), s_i.ncols()))
            .copy_from(&block);
        let mut l = joint.parent_link;
        while let Some(pl) = l {
            let pj = model.link_parent_joint[pl];
            let s_p = &ks.joint_subspace[pj];
            let pv = model.joints[pj].v_index;
            let cross = s_p.transpose() * &f;
            a.view_mut((pv, joint.v_index), (s_p.ncols(), s_i.ncols()))
                .copy_from(&cross);
            a.view_mut((joint.v_index, pv), (s_i.ncols(), s_p.ncols()))
                .copy_from(&cross.transpose());
            l = model.joints[pj].parent_link;
        }
    }
    a
}

/// Inverse dynamics: generalized forces realizing `qdd` at the given state
/// under the model's gravity, with no external wrenches.
pub fn inverse_dynamics(
    model: &RobotModel,
    state: &RobotState,
    qdd: &DVector<f64>,
) -> Result<DVector<f64>, DynamicsError> {
    let ks = KinState::compute(model, state)?;
    Ok(inverse_dynamics_with(model, state, &ks, qdd))
}

/// As [`inverse_dynamics`], reusing a computed [`KinState`].
pub fn inverse_dynamics_with(
    model: &RobotModel,
    state: &RobotState,
    ks: &KinState,
    qdd: &DVector<f64>,
) -> DVector<f64> {
    let n_links = model.links.len();
    // Gravity enters as a fictitious upward base acceleration, which makes
    // every link "accelerate against gravity" without explicit weight terms.
    let a0 = motion(Vector3::zeros(), -model.gravity);
    let mut acc = vec![SpatialMotion::zeros(); n_links];
    let mut force = vec![SpatialMotion::zeros(); n_links];
    for &ji in &model.traversal {
        let joint = &model.joints[ji];
        let child = joint.child_link;
        let s = &ks.joint_subspace[ji];
        let qd_block = state.v.rows(joint.v_index, s.ncols());
        let qdd_block = qdd.rows(joint.v_index, s.ncols());
        let parent_acc = joint.parent_link.map(|p| acc[p]).unwrap_or(a0);
        acc[child] = parent_acc + s * qdd_block + crm(&ks.link_vel[child]) * (s * qd_block);
        let i = &ks.link_inertia[child];
        force[child] = i * acc[child] + crf(&ks.link_vel[child]) * (i * ks.link_vel[child]);
    }
    let mut tau = DVector::zeros(model.nv);
    for &ji in model.traversal.iter().rev() {
        let joint = &model.joints[ji];
        let child = joint.child_link;
        let s = &ks.joint_subspace[ji];
        let block = s.transpose() * force[child];
        tau.rows_mut(joint.v_index, s.ncols()).copy_from(&block);
        if let Some(p) = joint.parent_link {
            let f = force[child];
            force[p] += f;
        }
    }
    tau
}

/// Bias forces `C(q, v) v + g(q)`: the generalized forces needed to sustain
/// zero acceleration.
pub fn nonlinear_effects(
    model: &RobotModel,
    state: &RobotState,
) -> Result<DVector<f64>, DynamicsError> {
    inverse_dynamics(model, state, &DVector::zeros(model.nv))
}

/// As [`nonlinear_effects`], reusing a computed [`KinState`].
pub fn nonlinear_effects_with(
    model: &RobotModel,
    state: &RobotState,
    ks: &KinState,
) -> DVector<f64> {
    inverse_dynamics_with(model, state, ks, &DVector::zeros(model.nv))
}

/// Composite rigid-body rotational inertia about the whole-body center of
/// mass, on world axes: the locked-joints inertia of the mechanism.
pub fn centroidal_inertia(
    model: &RobotModel,
    state: &RobotState,
) -> Result<Matrix3<f64>, DynamicsError> {
    let ks = KinState::compute(model, state)?;
    Ok(centroidal_inertia_with(model, &ks))
}

/// As [`centroidal_inertia`], reusing a computed [`KinState`].
pub fn centroidal_inertia_with(model: &RobotModel, ks: &KinState) -> Matrix3<f64> {
    let (com, _) = com_state_with(model, ks);
    let mut ig = Matrix3::zeros();
    for (li, link) in model.links.iter().enumerate() {
        let pose = &ks.link_pose[li];
        let r = pose.rotation.to_rotation_matrix();
        let inertia_w = r.matrix() * link.inertia * r.matrix().transpose();
        let d: Vector3<f64> = (pose * nalgebra::Point3::from(link.com)).coords - com;
        ig += inertia_w + link.mass * (d.norm_squared() * Matrix3::identity() - d * d.transpose());
    }
    ig
}

/// Whole-body center of mass position and velocity in world coordinates.
pub fn com_state(
    model: &RobotModel,
    state: &RobotState,
) -> Result<(Vector3<f64>, Vector3<f64>), DynamicsError> {
    let ks = KinState::compute(model, state)?;
    Ok(com_state_with(model, &ks))
}

/// As [`com_state`], reusing a computed [`KinState`].
pub fn com_state_with(model: &RobotModel, ks: &KinState) -> (Vector3<f64>, Vector3<f64>) {
    let mut com = Vector3::zeros();
    let mut vel = Vector3::zeros();
    let mut mass = 0.0;
    for (li, link) in model.links.iter().enumerate() {
        let com_w = (ks.link_pose[li] * nalgebra::Point3::from(link.com)).coords;
        com += link.mass * com_w;
        vel += link.mass * point_velocity(&ks.link_vel[li], &com_w);
        mass += link.mass;
    }
    (com / mass, vel / mass)
}

/// Center-of-mass Jacobian (3×nv) and its drift `J̇_com q̇`: the mass
/// weighted average of the link center-point Jacobians. The whole-body CoM
/// acceleration is `J_com q̈ + J̇_com q̇`.
pub fn com_motion(
    model: &RobotModel,
    state: &RobotState,
) -> Result<(DMatrix<f64>, Vector3<f64>), DynamicsError> {
    let ks = KinState::compute(model, state)?;
    Ok(com_motion_with(model, state, &ks))
}

/// As [`com_motion`], reusing a computed [`KinState`].
pub fn com_motion_with(
    model: &RobotModel,
    state: &RobotState,
    ks: &KinState,
) -> (DMatrix<f64>, Vector3<f64>) {
    let total_mass = model.total_mass();
    let mut j = DMatrix::zeros(3, model.nv);
    // Bias accelerations with q̈ = 0, no gravity.
    let mut acc = vec![SpatialMotion::zeros(); model.links.len()];
    for &ji in &model.traversal {
        let joint = &model.joints[ji];
        let child = joint.child_link;
        let s = &ks.joint_subspace[ji];
        let qd = state.v.rows(joint.v_index, s.ncols());
        let parent_acc = joint
            .parent_link
            .map(|p| acc[p])
            .unwrap_or_else(SpatialMotion::zeros);
        acc[child] = parent_acc + crm(&ks.link_vel[child]) * (s * qd);
    }
    let mut jdotv = Vector3::zeros();
    for (li, link) in model.links.iter().enumerate() {
        let w = link.mass / total_mass;
        let com_w = (ks.link_pose[li] * nalgebra::Point3::from(link.com)).coords;
        for &ji in &model.link_ancestor_joints[li] {
            let joint = &model.joints[ji];
            let s = &ks.joint_subspace[ji];
            for c in 0..s.ncols() {
                let col = s.column(c).into_owned();
                let lin_at_com = point_velocity(&col, &com_w);
                for r in 0..3 {
                    j[(r, joint.v_index + c)] += w * lin_at_com[r];
                }
            }
        }
        jdotv += w * point_acceleration(&acc[li], &ks.link_vel[li], &com_w);
    }
    (j, jdotv)
}

/// Integrates positions forward by `dt` at the given velocity. The base
/// orientation advances by the exponential of the body-frame angular
/// velocity and is renormalized; the base position advances along the
/// body-frame linear velocity rotated into the world.
pub fn integrate_positions(
    model: &RobotModel,
    q: &DVector<f64>,
    v: &DVector<f64>,
    dt: f64,
) -> DVector<f64> {
    let mut q_new = q.clone();
    let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        q[3], q[4], q[5], q[6],
    ));
    let w_b = Vector3::new(v[0], v[1], v[2]);
    let v_b = Vector3::new(v[3], v[4], v[5]);
    let p_new = Vector3::new(q[0], q[1], q[2]) + rot * v_b * dt;
    let rot_new =
        UnitQuaternion::from_quaternion((rot * UnitQuaternion::from_scaled_axis(w_b * dt)).into_inner());
    q_new[0] = p_new.x;
    q_new[1] = p_new.y;
    q_new[2] = p_new.z;
    let quat = rot_new.quaternion();
    q_new[3] = quat.w;
    q_new[4] = quat.i;
    q_new[5] = quat.j;
    q_new[6] = quat.k;
    for joint in &model.joints {
        if joint.kind == JointKind::Revolute {
            q_new[joint.q_index] = q[joint.q_index] + v[joint.v_index] * dt;
        }
    }
    q_new
}

/// Semi-implicit Euler step: velocity first, then positions at the new
/// velocity.
pub fn integrate_state(
    model: &RobotModel,
    state: &RobotState,
    a: &DVector<f64>,
    dt: f64,
) -> RobotState {
    let v_new = &state.v + a * dt;
    let q_new = integrate_positions(model, &state.q, &v_new, dt);
    RobotState { q: q_new, v: v_new }
}
