//! Torque maps between joint space and motor space.
//!
//! Two drive types are modeled. A belt-and-sheave hip drive scales torque by
//! the sheave ratio `r_fix / r_rot`. A rolling-knee drive acts on the distal
//! coordinate of a rolling pair: the pair's instantaneous center moves with
//! both surfaces, so for equal radii the torque about the rolling contact is
//! half the torque assigned to the distal axis, and a gear train between
//! motor and contact divides further by the product of its stage ratios.
//!
//! All maps here are exact scalar relations, so their inverses compose to
//! the identity and power is conserved across each map.

use std::collections::HashMap;

use thiserror::Error;

use crate::model::{RobotModel, Transmission};

#[derive(Debug, Error)]
pub enum ActuationError {
    #[error("joint {0:?} has no transmission")]
    NoTransmission(String),
    #[error("unknown joint {0:?}")]
    UnknownJoint(String),
}

/// Motor-side torques keyed by joint name.
pub type MotorTorques = HashMap<String, f64>;

/// Sheave drive: motor torque required for a desired joint torque.
pub fn hip_motor_torque(tau_joint: f64, r_fix: f64, r_rot: f64) -> f64 {
    tau_joint / (r_fix / r_rot)
}

/// Sheave drive: joint torque produced by a motor torque.
pub fn hip_joint_torque(tau_motor: f64, r_fix: f64, r_rot: f64) -> f64 {
    tau_motor * (r_fix / r_rot)
}

/// Rolling knee: torque about the pair's instantaneous center of rotation
/// equivalent to a torque on the distal axis. The contact point splits the
/// articulation in proportion `r_p : r_d`, so the lever from the distal axis
/// shrinks by `r_p / (r_p + r_d)`; equal radii give exactly half.
pub fn knee_icr_torque(tau_distal: f64, r_proximal: f64, r_distal: f64) -> f64 {
    tau_distal * r_proximal / (r_proximal + r_distal)
}

/// Rolling knee: distal-axis torque equivalent to a torque about the
/// instantaneous center.
pub fn knee_distal_torque(tau_icr: f64, r_proximal: f64, r_distal: f64) -> f64 {
    tau_icr * (r_proximal + r_distal) / r_proximal
}

/// Gear train: motor torque for a required output torque.
pub fn geared_motor_torque(tau_out: f64, stages: &[f64]) -> f64 {
    tau_out / stages.iter().product::<f64>()
}

/// Gear train: output torque from a motor torque.
pub fn geared_output_torque(tau_motor: f64, stages: &[f64]) -> f64 {
    tau_motor * stages.iter().product::<f64>()
}

/// Maps commanded joint torques (indexed like [`RobotModel::actuated_v`])
/// to motor torques for every joint with a transmission. Joints without a
/// transmission are direct drive and pass through unchanged.
pub fn motor_torques(model: &RobotModel, tau_actuated: &[f64]) -> MotorTorques {
    let mut out = MotorTorques::new();
    for (slot, &ji) in model.actuated_joints().iter().enumerate() {
        let tau = tau_actuated[slot];
        let name = model.joints[ji].name.clone();
        let motor = joint_to_motor(model, ji, tau);
        out.insert(name, motor);
    }
    out
}

fn joint_to_motor(model: &RobotModel, joint: usize, tau: f64) -> f64 {
    for t in &model.transmissions {
        match t {
            Transmission::HipSheave { joint: j, r_fix, r_rot } if *j == joint => {
                return hip_motor_torque(tau, *r_fix, *r_rot);
            }
            Transmission::KneeRolling { joint: j, gear_stages } if *j == joint => {
                let pair = model
                    .rolling_pairs
                    .iter()
                    .find(|p| p.distal_joint == joint)
                    .expect("validated: rolling-knee drive acts on a distal joint");
                let icr = knee_icr_torque(tau, pair.r_proximal, pair.r_distal);
                return geared_motor_torque(icr, gear_stages);
            }
            _ => {}
        }
    }
    tau
}

/// Inverse of [`motor_torques`] for a single named joint: joint torque
/// produced by the given motor torque.
pub fn joint_torque_from_motor(
    model: &RobotModel,
    joint_name: &str,
    tau_motor: f64,
) -> Result<f64, ActuationError> {
    let ji = model
        .joint_index(joint_name)
        .ok_or_else(|| ActuationError::UnknownJoint(joint_name.into()))?;
    for t in &model.transmissions {
        match t {
            Transmission::HipSheave { joint, r_fix, r_rot } if *joint == ji => {
                return Ok(hip_joint_torque(tau_motor, *r_fix, *r_rot));
            }
            Transmission::KneeRolling { joint, gear_stages } if *joint == ji => {
                let pair = model
                    .rolling_pairs
                    .iter()
                    .find(|p| p.distal_joint == ji)
                    .expect("validated: rolling-knee drive acts on a distal joint");
                let icr = geared_output_torque(tau_motor, gear_stages);
                return Ok(knee_distal_torque(icr, pair.r_proximal, pair.r_distal));
            }
            _ => {}
        }
    }
    Ok(tau_motor)
}
