//! Robot model description, loading, validation, and state.
//!
//! A model is a kinematic tree: one floating-base joint at the root, then
//! revolute joints. Rolling-contact pairs couple two adjacent revolute
//! joints (proximal, distal) that share one mechanical degree of freedom.
//! Transmissions describe how motor torque reaches a joint but play no role
//! in the rigid-body equations of motion.
//!
//! Models are stored as TOML documents ([`ModelDoc`]); [`build_model`]
//! resolves names to indices and assigns coordinate layouts, and
//! [`validate_model`] checks the numeric invariants. [`load_model`] chains
//! all three and fails if any diagnostic is raised.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DVector, Isometry3, Matrix3, Quaternion, Translation3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while loading or constructing a model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    /// The document is not valid TOML or does not match the schema.
    #[error("model parse error: {0}")]
    Parse(String),
    /// The kinematic graph is malformed (dangling names, cycles, no root).
    #[error("model topology error: {0}")]
    Topology(String),
    /// Numeric or semantic invariants are violated; one entry per finding.
    #[error("model validation failed:\n  {}", diagnostics.join("\n  "))]
    Validation { diagnostics: Vec<String> },
}

// ---------------------------------------------------------------------------
// Document schema (mirrors the TOML file)
// ---------------------------------------------------------------------------

/// Pose as translation plus roll-pitch-yaw (radians), the rotation being
/// `Rz(yaw) · Ry(pitch) · Rx(roll)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseDoc {
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl Default for PoseDoc {
    fn default() -> Self {
        PoseDoc {
            xyz: [0.0; 3],
            rpy: [0.0; 3],
        }
    }
}

impl PoseDoc {
    pub fn to_isometry(&self) -> Isometry3<f64> {
        let rot = UnitQuaternion::from_euler_angles(self.rpy[0], self.rpy[1], self.rpy[2]);
        Isometry3::from_parts(
            Translation3::new(self.xyz[0], self.xyz[1], self.xyz[2]),
            rot,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LinkDoc {
    pub name: String,
    /// Mass in kg.
    pub mass: f64,
    /// Center of mass in the link frame.
    pub com: [f64; 3],
    /// Rotational inertia about the center of mass, link frame, row-major.
    pub inertia: [[f64; 3]; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct JointDoc {
    pub name: String,
    /// `"floating_base"` or `"revolute"`.
    pub kind: String,
    /// Parent link name, or `"world"` for the root joint.
    pub parent: String,
    /// Child link name.
    pub child: String,
    /// Joint frame in the parent link frame. The child link frame coincides
    /// with the joint frame at zero joint position.
    #[serde(default)]
    pub origin: PoseDoc,
    /// Rotation axis in the joint frame (revolute only).
    #[serde(default)]
    pub axis: Option<[f64; 3]>,
    #[serde(default)]
    pub position_limits: Option<[f64; 2]>,
    #[serde(default)]
    pub velocity_limit: Option<f64>,
    #[serde(default)]
    pub torque_limit: Option<f64>,
    #[serde(default)]
    pub acceleration_limit: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RollingPairDoc {
    pub proximal_joint: String,
    pub distal_joint: String,
    /// Rolling-surface radius on the proximal side, in meters.
    pub r_proximal: f64,
    /// Rolling-surface radius on the distal side, in meters.
    pub r_distal: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransmissionDoc {
    /// Belt-and-sheave drive: motor torque is joint torque divided by
    /// `r_fix / r_rot`.
    HipSheave {
        joint: String,
        r_fix: f64,
        r_rot: f64,
    },
    /// Drive acting on the distal coordinate of a rolling pair through a
    /// series of gear stages.
    KneeRolling { joint: String, gear_stages: Vec<f64> },
}

impl TransmissionDoc {
    pub fn joint(&self) -> &str {
        match self {
            TransmissionDoc::HipSheave { joint, .. } => joint,
            TransmissionDoc::KneeRolling { joint, .. } => joint,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ContactFrameDoc {
    pub name: String,
    pub link: String,
    /// Frame pose in the link frame.
    #[serde(default)]
    pub offset: PoseDoc,
}

/// Serialized form of a robot model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelDoc {
    pub name: String,
    /// Overall standing height in meters, used to scale workspace sweeps.
    pub standing_height: f64,
    /// World gravity vector; defaults to `[0, 0, -9.81]`.
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    pub links: Vec<LinkDoc>,
    pub joints: Vec<JointDoc>,
    #[serde(default)]
    pub rolling_pairs: Vec<RollingPairDoc>,
    #[serde(default)]
    pub transmissions: Vec<TransmissionDoc>,
    #[serde(default)]
    pub contact_frames: Vec<ContactFrameDoc>,
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

// ---------------------------------------------------------------------------
// Runtime model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Link {
    pub name: String,
    pub mass: f64,
    pub com: Vector3<f64>,
    pub inertia: Matrix3<f64>,
    /// Raw document fields, kept so serialization round-trips exactly.
    pub(crate) com_raw: [f64; 3],
    pub(crate) inertia_raw: [[f64; 3]; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    FloatingBase,
    Revolute,
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    /// `None` for the root joint (parent is the world).
    pub parent_link: Option<usize>,
    pub child_link: usize,
    pub origin: Isometry3<f64>,
    /// Unit rotation axis in the joint frame (revolute only).
    pub axis: Vector3<f64>,
    /// First position coordinate in `q`.
    pub q_index: usize,
    /// First velocity coordinate in `v`.
    pub v_index: usize,
    pub position_limits: (f64, f64),
    pub velocity_limit: f64,
    pub torque_limit: f64,
    pub acceleration_limit: f64,
    pub(crate) origin_raw: PoseDoc,
    pub(crate) axis_raw: Option<[f64; 3]>,
}

impl Joint {
    pub fn nq(&self) -> usize {
        match self.kind {
            JointKind::FloatingBase => 7,
            JointKind::Revolute => 1,
        }
    }
    pub fn nv(&self) -> usize {
        match self.kind {
            JointKind::FloatingBase => 6,
            JointKind::Revolute => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RollingPair {
    pub proximal_joint: usize,
    pub distal_joint: usize,
    pub r_proximal: f64,
    pub r_distal: f64,
}

impl RollingPair {
    /// Coupling ratio: a consistent state satisfies
    /// `q_proximal = ratio · q_distal`.
    pub fn ratio(&self) -> f64 {
        self.r_distal / self.r_proximal
    }
}

#[derive(Debug, Clone)]
pub enum Transmission {
    HipSheave {
        joint: usize,
        r_fix: f64,
        r_rot: f64,
    },
    KneeRolling {
        joint: usize,
        gear_stages: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct ContactFrame {
    pub name: String,
    pub link: usize,
    pub offset: Isometry3<f64>,
    pub(crate) offset_raw: PoseDoc,
}

/// Validated, index-resolved robot model.
#[derive(Debug, Clone)]
pub struct RobotModel {
    pub name: String,
    pub standing_height: f64,
    pub gravity: Vector3<f64>,
    pub links: Vec<Link>,
    /// Joints in declaration order; the root joint holds velocity
    /// coordinates `0..6` and revolute joints follow in declaration order.
    pub joints: Vec<Joint>,
    pub rolling_pairs: Vec<RollingPair>,
    pub transmissions: Vec<Transmission>,
    pub contact_frames: Vec<ContactFrame>,
    /// Position coordinate count: `7 + number of revolute joints`.
    pub nq: usize,
    /// Velocity coordinate count: `6 + number of revolute joints`.
    pub nv: usize,
    /// Joint indices in a root-first order with parents before children.
    pub(crate) traversal: Vec<usize>,
    /// For each link, the joint whose child it is.
    pub(crate) link_parent_joint: Vec<usize>,
    /// For each link, the chain of joint indices from the root to the link.
    pub(crate) link_ancestor_joints: Vec<Vec<usize>>,
    name_to_link: HashMap<String, usize>,
    name_to_joint: HashMap<String, usize>,
    name_to_contact: HashMap<String, usize>,
    /// Velocity indices of actuated coordinates: all revolute joints except
    /// proximal members of rolling pairs, ascending.
    actuated_v: Vec<usize>,
    /// Joint indices matching `actuated_v`.
    actuated_joints: Vec<usize>,
}

/// Generalized position and velocity.
///
/// Layout of `q`: base position `[0..3]`, base orientation as a unit
/// quaternion `[w, x, y, z]` at `[3..7]`, then one angle per revolute joint.
/// Layout of `v`: base angular velocity in the base frame `[0..3]`, base
/// linear velocity in the base frame `[3..6]`, then joint rates.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

impl RobotState {
    pub fn base_position(&self) -> Vector3<f64> {
        Vector3::new(self.q[0], self.q[1], self.q[2])
    }

    pub fn base_orientation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(Quaternion::new(
            self.q[3], self.q[4], self.q[5], self.q[6],
        ))
    }

    pub fn base_pose(&self) -> Isometry3<f64> {
        Isometry3::from_parts(self.base_position().into(), self.base_orientation())
    }

    pub fn set_base_pose(&mut self, pose: &Isometry3<f64>) {
        self.q[0] = pose.translation.x;
        self.q[1] = pose.translation.y;
        self.q[2] = pose.translation.z;
        let r = pose.rotation.quaternion();
        self.q[3] = r.w;
        self.q[4] = r.i;
        self.q[5] = r.j;
        self.q[6] = r.k;
    }
}

/// A frame usable as a task or contact target: either a contact frame or a
/// link frame. Contact frames take precedence on name collisions.
#[derive(Debug, Clone, Copy)]
pub struct FrameRef {
    pub link: usize,
    pub has_offset: bool,
    pub contact_index: Option<usize>,
}

impl RobotModel {
    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.name_to_link.get(name).copied()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.name_to_joint.get(name).copied()
    }

    pub fn contact_frame_index(&self, name: &str) -> Option<usize> {
        self.name_to_contact.get(name).copied()
    }

    /// Resolves a frame name against contact frames first, then link frames.
    pub fn resolve_frame(&self, name: &str) -> Option<(usize, Isometry3<f64>)> {
        if let Some(ci) = self.contact_frame_index(name) {
            let cf = &self.contact_frames[ci];
            return Some((cf.link, cf.offset));
        }
        self.link_index(name)
            .map(|li| (li, Isometry3::identity()))
    }

    /// Number of revolute joints.
    pub fn n_joints(&self) -> usize {
        self.joints.len() - 1
    }

    /// Velocity indices of the actuated coordinates, ascending. Excludes the
    /// floating base and the proximal coordinate of every rolling pair: the
    /// shared knee degree of freedom is commanded on the distal axis.
    pub fn actuated_v(&self) -> &[usize] {
        &self.actuated_v
    }

    /// Joint indices matching [`RobotModel::actuated_v`].
    pub fn actuated_joints(&self) -> &[usize] {
        &self.actuated_joints
    }

    pub fn root_link(&self) -> usize {
        self.joints[self.traversal[0]].child_link
    }

    /// Total mass in kg.
    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum()
    }

    /// State with the base at the origin, identity orientation, zero joint
    /// angles, zero velocity. Rolling-pair residuals are zero here.
    pub fn neutral_state(&self) -> RobotState {
        let mut q = DVector::zeros(self.nq);
        q[3] = 1.0;
        RobotState {
            q,
            v: DVector::zeros(self.nv),
        }
    }

    /// Random state for property tests and model checking: base pose and
    /// twist are drawn uniformly, joint angles within their limits clamped
    /// to ±1.3 rad, joint rates within ±2 rad/s. When `consistent` is set,
    /// proximal rolling-pair coordinates are overwritten so every pair
    /// residual and coupling-velocity defect is exactly zero.
    pub fn sample_state<R: Rng>(&self, rng: &mut R, consistent: bool) -> RobotState {
        let mut state = self.neutral_state();
        for k in 0..3 {
            state.q[k] = rng.gen_range(-0.5..0.5);
        }
        // Uniform random rotation: uniform axis, uniform angle in [0, π].
        let axis = loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        };
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let rot = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_unchecked(axis), angle);
        let mut pose = state.base_pose();
        pose.rotation = rot;
        state.set_base_pose(&pose);
        for j in self.joints.iter().filter(|j| j.kind == JointKind::Revolute) {
            let lo = j.position_limits.0.max(-1.3);
            let hi = j.position_limits.1.min(1.3);
            state.q[j.q_index] = if lo < hi { rng.gen_range(lo..hi) } else { lo };
            state.v[j.v_index] = rng.gen_range(-2.0..2.0);
        }
        for k in 0..6 {
            state.v[k] = rng.gen_range(-1.0..1.0);
        }
        if consistent {
            for pair in &self.rolling_pairs {
                let jp = &self.joints[pair.proximal_joint];
                let jd = &self.joints[pair.distal_joint];
                state.q[jp.q_index] = pair.ratio() * state.q[jd.q_index];
                state.v[jp.v_index] = pair.ratio() * state.v[jd.v_index];
            }
        }
        state
    }

    /// Rebuilds the serialized document for this model. Numeric fields are
    /// the original document values, so a save/load cycle is exact.
    pub fn to_doc(&self) -> ModelDoc {
        ModelDoc {
            name: self.name.clone(),
            standing_height: self.standing_height,
            gravity: [self.gravity.x, self.gravity.y, self.gravity.z],
            links: self
                .links
                .iter()
                .map(|l| LinkDoc {
                    name: l.name.clone(),
                    mass: l.mass,
                    com: l.com_raw,
                    inertia: l.inertia_raw,
                })
                .collect(),
            joints: self
                .joints
                .iter()
                .map(|j| JointDoc {
                    name: j.name.clone(),
                    kind: match j.kind {
                        JointKind::FloatingBase => "floating_base".into(),
                        JointKind::Revolute => "revolute".into(),
                    },
                    parent: match j.parent_link {
                        Some(li) => self.links[li].name.clone(),
                        None => "world".into(),
                    },
                    child: self.links[j.child_link].name.clone(),
                    origin: j.origin_raw.clone(),
                    axis: j.axis_raw,
                    position_limits: Some([j.position_limits.0, j.position_limits.1])
                        .filter(|_| j.kind == JointKind::Revolute),
                    velocity_limit: Some(j.velocity_limit)
                        .filter(|_| j.kind == JointKind::Revolute),
                    torque_limit: Some(j.torque_limit).filter(|_| j.kind == JointKind::Revolute),
                    acceleration_limit: Some(j.acceleration_limit)
                        .filter(|_| j.kind == JointKind::Revolute),
                })
                .collect(),
            rolling_pairs: self
                .rolling_pairs
                .iter()
                .map(|p| RollingPairDoc {
                    proximal_joint: self.joints[p.proximal_joint].name.clone(),
                    distal_joint: self.joints[p.distal_joint].name.clone(),
                    r_proximal: p.r_proximal,
                    r_distal: p.r_distal,
                })
                .collect(),
            transmissions: self
                .transmissions
                .iter()
                .map(|t| match t {
                    Transmission::HipSheave {
                        joint,
                        r_fix,
                        r_rot,
                    } => TransmissionDoc::HipSheave {
                        joint: self.joints[*joint].name.clone(),
                        r_fix: *r_fix,
                        r_rot: *r_rot,
                    },
                    Transmission::KneeRolling { joint, gear_stages } => {
                        TransmissionDoc::KneeRolling {
                            joint: self.joints[*joint].name.clone(),
                            gear_stages: gear_stages.clone(),
                        }
                    }
                })
                .collect(),
            contact_frames: self
                .contact_frames
                .iter()
                .map(|c| ContactFrameDoc {
                    name: c.name.clone(),
                    link: self.links[c.link].name.clone(),
                    offset: c.offset_raw.clone(),
                })
                .collect(),
        }
    }

    pub fn to_toml_string(&self) -> Result<String, ModelError> {
        toml::to_string_pretty(&self.to_doc()).map_err(|e| ModelError::Parse(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Parse / build / validate
// ---------------------------------------------------------------------------

/// Parses a TOML document into the schema without resolving anything.
pub fn parse_model(text: &str) -> Result<ModelDoc, ModelError> {
    toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))
}

/// Resolves names and coordinate layouts. Fails on structural problems
/// (unknown names, multiple roots, cycles); numeric checks live in
/// [`validate_model`].
pub fn build_model(doc: &ModelDoc) -> Result<RobotModel, ModelError> {
    let mut name_to_link = HashMap::new();
    for (i, l) in doc.links.iter().enumerate() {
        if name_to_link.insert(l.name.clone(), i).is_some() {
            return Err(ModelError::Topology(format!("duplicate link name {:?}", l.name)));
        }
    }
    let mut name_to_joint = HashMap::new();
    for (i, j) in doc.joints.iter().enumerate() {
        if name_to_joint.insert(j.name.clone(), i).is_some() {
            return Err(ModelError::Topology(format!("duplicate joint name {:?}", j.name)));
        }
    }

    let links: Vec<Link> = doc
        .links
        .iter()
        .map(|l| Link {
            name: l.name.clone(),
            mass: l.mass,
            com: Vector3::new(l.com[0], l.com[1], l.com[2]),
            inertia: Matrix3::from_fn(|r, c| l.inertia[r][c]),
            com_raw: l.com,
            inertia_raw: l.inertia,
        })
        .collect();

    let mut joints = Vec::with_capacity(doc.joints.len());
    let mut root = None;
    let mut q_cursor = 7usize;
    let mut v_cursor = 6usize;
    for (i, jd) in doc.joints.iter().enumerate() {
        let kind = match jd.kind.as_str() {
            "floating_base" => JointKind::FloatingBase,
            "revolute" => JointKind::Revolute,
            other => {
                return Err(ModelError::Parse(format!(
                    "joint {:?}: unknown kind {:?}",
                    jd.name, other
                )))
            }
        };
        let parent_link = if jd.parent == "world" {
            None
        } else {
            Some(*name_to_link.get(&jd.parent).ok_or_else(|| {
                ModelError::Topology(format!(
                    "joint {:?}: unknown parent link {:?}",
                    jd.name, jd.parent
                ))
            })?)
        };
        let child_link = *name_to_link.get(&jd.child).ok_or_else(|| {
            ModelError::Topology(format!(
                "joint {:?}: unknown child link {:?}",
                jd.name, jd.child
            ))
        })?;
        let (q_index, v_index) = match kind {
            JointKind::FloatingBase => {
                if parent_link.is_some() {
                    return Err(ModelError::Topology(format!(
                        "joint {:?}: floating base must have parent \"world\"",
                        jd.name
                    )));
                }
                if root.is_some() {
                    return Err(ModelError::Topology(
                        "more than one floating_base joint".into(),
                    ));
                }
                root = Some(i);
                (0, 0)
            }
            JointKind::Revolute => {
                if parent_link.is_none() {
                    return Err(ModelError::Topology(format!(
                        "joint {:?}: revolute joint cannot attach to the world",
                        jd.name
                    )));
                }
                let idx = (q_cursor, v_cursor);
                q_cursor += 1;
                v_cursor += 1;
                idx
            }
        };
        let axis = jd
            .axis
            .map(|a| Vector3::new(a[0], a[1], a[2]))
            .unwrap_or_else(Vector3::x);
        let axis_unit = if axis.norm() > 1e-12 {
            axis / axis.norm()
        } else {
            axis
        };
        joints.push(Joint {
            name: jd.name.clone(),
            kind,
            parent_link,
            child_link,
            origin: jd.origin.to_isometry(),
            axis: axis_unit,
            q_index,
            v_index,
            position_limits: jd
                .position_limits
                .map(|l| (l[0], l[1]))
                .unwrap_or((-f64::INFINITY, f64::INFINITY)),
            velocity_limit: jd.velocity_limit.unwrap_or(f64::INFINITY),
            torque_limit: jd.torque_limit.unwrap_or(f64::INFINITY),
            acceleration_limit: jd.acceleration_limit.unwrap_or(f64::INFINITY),
            origin_raw: jd.origin.clone(),
            axis_raw: jd.axis,
        });
    }
    let root = root.ok_or_else(|| ModelError::Topology("no floating_base joint".into()))?;

    // Each link must be the child of exactly one joint.
    let mut link_parent_joint = vec![usize::MAX; links.len()];
    for (i, j) in joints.iter().enumerate() {
        if link_parent_joint[j.child_link] != usize::MAX {
            return Err(ModelError::Topology(format!(
                "link {:?} has two parent joints",
                links[j.child_link].name
            )));
        }
        link_parent_joint[j.child_link] = i;
    }
    if let Some(li) = link_parent_joint.iter().position(|&p| p == usize::MAX) {
        return Err(ModelError::Topology(format!(
            "link {:?} is not the child of any joint",
            links[li].name
        )));
    }

    // Breadth-first traversal from the root; detects unreachable subgraphs
    // (which with the exactly-one-parent property implies a cycle).
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); links.len()];
    for (i, j) in joints.iter().enumerate() {
        if let Some(p) = j.parent_link {
            children[p].push(i);
        }
    }
    let mut traversal = vec![root];
    let mut head = 0;
    while head < traversal.len() {
        let link = joints[traversal[head]].child_link;
        traversal.extend(children[link].iter().copied());
        head += 1;
    }
    if traversal.len() != joints.len() {
        return Err(ModelError::Topology(
            "kinematic graph is not a single tree rooted at the floating base".into(),
        ));
    }

    let mut link_ancestor_joints: Vec<Vec<usize>> = vec![Vec::new(); links.len()];
    for &ji in &traversal {
        let j = &joints[ji];
        let mut chain = match j.parent_link {
            Some(p) => link_ancestor_joints[p].clone(),
            None => Vec::new(),
        };
        chain.push(ji);
        link_ancestor_joints[j.child_link] = chain;
    }

    let mut rolling_pairs = Vec::new();
    for pd in &doc.rolling_pairs {
        let proximal_joint = *name_to_joint.get(&pd.proximal_joint).ok_or_else(|| {
            ModelError::Topology(format!("rolling pair: unknown joint {:?}", pd.proximal_joint))
        })?;
        let distal_joint = *name_to_joint.get(&pd.distal_joint).ok_or_else(|| {
            ModelError::Topology(format!("rolling pair: unknown joint {:?}", pd.distal_joint))
        })?;
        rolling_pairs.push(RollingPair {
            proximal_joint,
            distal_joint,
            r_proximal: pd.r_proximal,
            r_distal: pd.r_distal,
        });
    }

    let mut transmissions = Vec::new();
    for td in &doc.transmissions {
        let ji = *name_to_joint.get(td.joint()).ok_or_else(|| {
            ModelError::Topology(format!("transmission: unknown joint {:?}", td.joint()))
        })?;
        transmissions.push(match td {
            TransmissionDoc::HipSheave { r_fix, r_rot, .. } => Transmission::HipSheave {
                joint: ji,
                r_fix: *r_fix,
                r_rot: *r_rot,
            },
            TransmissionDoc::KneeRolling { gear_stages, .. } => Transmission::KneeRolling {
                joint: ji,
                gear_stages: gear_stages.clone(),
            },
        });
    }

    let mut name_to_contact = HashMap::new();
    let mut contact_frames = Vec::new();
    for (i, cd) in doc.contact_frames.iter().enumerate() {
        let link = *name_to_link.get(&cd.link).ok_or_else(|| {
            ModelError::Topology(format!(
                "contact frame {:?}: unknown link {:?}",
                cd.name, cd.link
            ))
        })?;
        if name_to_contact.insert(cd.name.clone(), i).is_some() {
            return Err(ModelError::Topology(format!(
                "duplicate contact frame name {:?}",
                cd.name
            )));
        }
        contact_frames.push(ContactFrame {
            name: cd.name.clone(),
            link,
            offset: cd.offset.to_isometry(),
            offset_raw: cd.offset.clone(),
        });
    }

    let proximal_set: Vec<usize> = rolling_pairs.iter().map(|p| p.proximal_joint).collect();
    let mut actuated_v = Vec::new();
    let mut actuated_joints = Vec::new();
    for (i, j) in joints.iter().enumerate() {
        if j.kind == JointKind::Revolute && !proximal_set.contains(&i) {
            actuated_v.push(j.v_index);
            actuated_joints.push(i);
        }
    }

    Ok(RobotModel {
        name: doc.name.clone(),
        standing_height: doc.standing_height,
        gravity: Vector3::new(doc.gravity[0], doc.gravity[1], doc.gravity[2]),
        links,
        joints,
        rolling_pairs,
        transmissions,
        contact_frames,
        nq: q_cursor,
        nv: v_cursor,
        traversal,
        link_parent_joint,
        link_ancestor_joints,
        name_to_link,
        name_to_joint,
        name_to_contact,
        actuated_v,
        actuated_joints,
    })
}

/// Checks numeric and semantic invariants. Returns one human-readable
/// diagnostic per violation; an empty list means the model is valid.
pub fn validate_model(model: &RobotModel) -> Vec<String> {
    let mut diags = Vec::new();

    if !(model.standing_height > 0.0) {
        diags.push(format!(
            "standing_height must be positive, got {}",
            model.standing_height
        ));
    }

    for l in &model.links {
        if !(l.mass > 0.0) {
            diags.push(format!("link {:?}: mass must be positive, got {}", l.name, l.mass));
        }
        let sym_err = (l.inertia - l.inertia.transpose()).abs().max();
        if sym_err > 1e-9 {
            diags.push(format!(
                "link {:?}: inertia matrix is not symmetric (max asymmetry {:.3e})",
                l.name, sym_err
            ));
        } else {
            let eig = l.inertia.symmetric_eigenvalues();
            let mut ev = [eig[0], eig[1], eig[2]];
            ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if ev[0] <= 0.0 {
                diags.push(format!(
                    "link {:?}: inertia has non-positive eigenvalue {:.6}",
                    l.name, ev[0]
                ));
            } else if ev[0] + ev[1] < ev[2] * (1.0 - 1e-9) {
                diags.push(format!(
                    "link {:?}: inertia eigenvalues violate the triangle inequality ({:.6} + {:.6} < {:.6})",
                    l.name, ev[0], ev[1], ev[2]
                ));
            }
        }
    }

    for j in &model.joints {
        if j.kind != JointKind::Revolute {
            continue;
        }
        match j.axis_raw {
            Some(a) => {
                let n = Vector3::new(a[0], a[1], a[2]).norm();
                if n < 1e-12 {
                    diags.push(format!("joint {:?}: rotation axis is zero", j.name));
                }
            }
            None => diags.push(format!("joint {:?}: revolute joint needs an axis", j.name)),
        }
        if !(j.position_limits.0 < j.position_limits.1) {
            diags.push(format!(
                "joint {:?}: position limits must satisfy lower < upper, got [{}, {}]",
                j.name, j.position_limits.0, j.position_limits.1
            ));
        }
        if !(j.velocity_limit > 0.0) {
            diags.push(format!("joint {:?}: velocity limit must be positive", j.name));
        }
        if !(j.torque_limit > 0.0) {
            diags.push(format!("joint {:?}: torque limit must be positive", j.name));
        }
        if !(j.acceleration_limit > 0.0) {
            diags.push(format!(
                "joint {:?}: acceleration limit must be positive",
                j.name
            ));
        }
    }

    let mut seen_pair_members = Vec::new();
    for (pi, p) in model.rolling_pairs.iter().enumerate() {
        let jp = &model.joints[p.proximal_joint];
        let jd = &model.joints[p.distal_joint];
        if !(p.r_proximal > 0.0) || !(p.r_distal > 0.0) {
            diags.push(format!(
                "rolling pair {} ({} / {}): radii must be positive",
                pi, jp.name, jd.name
            ));
        }
        if jp.kind != JointKind::Revolute || jd.kind != JointKind::Revolute {
            diags.push(format!(
                "rolling pair {} ({} / {}): both joints must be revolute",
                pi, jp.name, jd.name
            ));
            continue;
        }
        // The pair must be serially chained and occupy adjacent velocity
        // coordinates; the constraint-Jacobian layout depends on this.
        if jd.parent_link != Some(jp.child_link) {
            diags.push(format!(
                "rolling pair {} ({} / {}): distal joint must be the child of the proximal joint's link",
                pi, jp.name, jd.name
            ));
        }
        if jd.v_index != jp.v_index + 1 {
            diags.push(format!(
                "rolling pair {} ({} / {}): pair coordinates must be adjacent (got v rows {} and {})",
                pi, jp.name, jd.name, jp.v_index, jd.v_index
            ));
        }
        for m in [p.proximal_joint, p.distal_joint] {
            if seen_pair_members.contains(&m) {
                diags.push(format!(
                    "joint {:?} appears in more than one rolling pair",
                    model.joints[m].name
                ));
            }
            seen_pair_members.push(m);
        }
    }

    for (ti, t) in model.transmissions.iter().enumerate() {
        match t {
            Transmission::HipSheave { joint, r_fix, r_rot } => {
                if !(*r_fix > 0.0) || !(*r_rot > 0.0) {
                    diags.push(format!(
                        "transmission {} on joint {:?}: sheave radii must be positive",
                        ti, model.joints[*joint].name
                    ));
                }
            }
            Transmission::KneeRolling { joint, gear_stages } => {
                if gear_stages.is_empty() || gear_stages.iter().any(|g| !(*g > 0.0)) {
                    diags.push(format!(
                        "transmission {} on joint {:?}: gear stages must be positive and non-empty",
                        ti, model.joints[*joint].name
                    ));
                }
                if !model.rolling_pairs.iter().any(|p| p.distal_joint == *joint) {
                    diags.push(format!(
                        "transmission {} on joint {:?}: rolling-knee drive must act on the distal joint of a rolling pair",
                        ti, model.joints[*joint].name
                    ));
                }
            }
        }
    }

    for c in &model.contact_frames {
        if model.name_to_link.contains_key(&c.name) {
            diags.push(format!(
                "contact frame {:?} shadows a link of the same name",
                c.name
            ));
        }
    }

    diags
}

/// Parses, builds, and validates a model document.
pub fn load_model_from_str(text: &str) -> Result<RobotModel, ModelError> {
    let doc = parse_model(text)?;
    let model = build_model(&doc)?;
    let diagnostics = validate_model(&model);
    if diagnostics.is_empty() {
        Ok(model)
    } else {
        Err(ModelError::Validation { diagnostics })
    }
}

/// Loads a model from a TOML file.
pub fn load_model<P: AsRef<Path>>(path: P) -> Result<RobotModel, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    load_model_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_doc() -> ModelDoc {
        parse_model(
            r#"
            name = "toy"
            standing_height = 1.0

            [[links]]
            name = "body"
            mass = 2.0
            com = [0.0, 0.0, 0.1]
            inertia = [[0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]]

            [[links]]
            name = "arm"
            mass = 1.0
            com = [0.0, 0.0, -0.25]
            inertia = [[0.02, 0.0, 0.0], [0.0, 0.02, 0.0], [0.0, 0.0, 0.001]]

            [[joints]]
            name = "root"
            kind = "floating_base"
            parent = "world"
            child = "body"

            [[joints]]
            name = "shoulder"
            kind = "revolute"
            parent = "body"
            child = "arm"
            origin = { xyz = [0.0, 0.0, -0.1] }
            axis = [0.0, 1.0, 0.0]
            position_limits = [-1.5, 1.5]
            velocity_limit = 10.0
            torque_limit = 50.0
            acceleration_limit = 200.0
            "#,
        )
        .unwrap()
    }

    #[test]
    fn builds_and_validates_minimal_model() {
        let model = build_model(&minimal_doc()).unwrap();
        assert_eq!(model.nq, 8);
        assert_eq!(model.nv, 7);
        assert_eq!(model.n_joints(), 1);
        assert!(validate_model(&model).is_empty());
        assert_eq!(model.actuated_v(), &[6]);
        assert_eq!(model.total_mass(), 3.0);
    }

    #[test]
    fn neutral_state_has_identity_base() {
        let model = build_model(&minimal_doc()).unwrap();
        let s = model.neutral_state();
        assert_eq!(s.q.len(), 8);
        assert_eq!(s.v.len(), 7);
        assert_eq!(s.base_pose(), Isometry3::identity());
    }

    #[test]
    fn negative_mass_is_diagnosed_with_link_name() {
        let mut doc = minimal_doc();
        doc.links[1].mass = -1.0;
        let model = build_model(&doc).unwrap();
        let diags = validate_model(&model);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].contains("arm"), "diagnostic was: {}", diags[0]);
        assert!(matches!(
            load_model_from_str(&toml::to_string(&doc).unwrap()),
            Err(ModelError::Validation { .. })
        ));
    }

    #[test]
    fn indefinite_inertia_is_diagnosed_with_link_name() {
        let mut doc = minimal_doc();
        doc.links[0].inertia = [[-0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]];
        let model = build_model(&doc).unwrap();
        let diags = validate_model(&model);
        assert!(diags.iter().any(|d| d.contains("body") && d.contains("eigenvalue")));
    }

    #[test]
    fn triangle_inequality_violation_is_diagnosed() {
        let mut doc = minimal_doc();
        // Eigenvalues 0.01 + 0.01 < 0.1.
        doc.links[0].inertia = [[0.01, 0.0, 0.0], [0.0, 0.01, 0.0], [0.0, 0.0, 0.1]];
        let model = build_model(&doc).unwrap();
        let diags = validate_model(&model);
        assert!(diags.iter().any(|d| d.contains("triangle")));
    }

    #[test]
    fn dangling_parent_is_topology_error() {
        let mut doc = minimal_doc();
        doc.joints[1].parent = "nonexistent".into();
        assert!(matches!(build_model(&doc), Err(ModelError::Topology(_))));
    }

    #[test]
    fn two_floating_bases_rejected() {
        let mut doc = minimal_doc();
        doc.joints[1].kind = "floating_base".into();
        doc.joints[1].parent = "world".into();
        assert!(matches!(build_model(&doc), Err(ModelError::Topology(_))));
    }

    #[test]
    fn malformed_toml_is_parse_error() {
        assert!(matches!(
            load_model_from_str("name = \"x\"\nstanding_height = [oops"),
            Err(ModelError::Parse(_))
        ));
    }

    #[test]
    fn serialization_round_trips_exactly() {
        let doc = minimal_doc();
        let model = build_model(&doc).unwrap();
        let text = model.to_toml_string().unwrap();
        let model2 = load_model_from_str(&text).unwrap();
        assert_eq!(model.to_doc(), model2.to_doc());
        // Derived quantities agree bit-for-bit.
        assert_eq!(model.joints[1].origin, model2.joints[1].origin);
        assert_eq!(model.links[0].inertia, model2.links[0].inertia);
    }

    #[test]
    fn sample_state_respects_limits_and_consistency() {
        use rand::SeedableRng;
        let model = build_model(&minimal_doc()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let s = model.sample_state(&mut rng, true);
            let q = s.q[model.joints[1].q_index];
            assert!((-1.3..=1.3).contains(&q));
            let quat_norm = s.base_orientation().quaternion().norm();
            assert!((quat_norm - 1.0).abs() < 1e-12);
        }
    }
}
