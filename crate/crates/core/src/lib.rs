//! Whole-body control for legged robots with rolling-contact joints.
//!
//! A rolling-contact joint spreads one mechanical degree of freedom over two
//! kinematic coordinates (proximal and distal) coupled by a no-slip condition
//! on a pair of rolling surfaces. This crate models that coupling as an
//! internal kinematic constraint: the constraint Jacobian is constant, its
//! floating-base columns are zero, and a dynamically consistent null-space
//! projector removes the constraint from the equations of motion without
//! introducing extra decision variables.
//!
//! The crate provides:
//!
//! - a floating-base rigid-body model loaded from TOML ([`model`]),
//! - spatial-vector kinematics and dynamics: CRBA mass matrix, RNEA bias
//!   forces, frame Jacobians, centroidal quantities ([`dynamics`]),
//! - the internal-constraint machinery for rolling pairs ([`rolling`]),
//! - a dense dual active-set QP solver with warm starting ([`qp`]),
//! - an inverse-dynamics whole-body controller that optimizes joint
//!   accelerations and contact wrenches under friction-cone, acceleration,
//!   and torque limits ([`wbc`]),
//! - transmission maps between joint torques and motor torques
//!   ([`actuation`]),
//! - a centroidal inertia isotropy metric with an IK-driven stepping sweep
//!   for comparing mass distributions ([`cii`]),
//! - a constraint-consistent simulator and scenario runner ([`sim`]).

pub mod actuation;
pub mod cii;
pub mod dynamics;
pub mod model;
pub mod qp;
pub mod rolling;
pub mod sim;
pub mod spatial;
pub mod wbc;
