//! Internal kinematic constraints for rolling-contact pairs.
//!
//! A rolling pair couples two adjacent revolute coordinates by a no-slip
//! condition between two rolling surfaces. In velocity space this is one
//! constant linear equation per pair,
//!
//! ```text
//!   q̇_proximal − (r_distal / r_proximal) · q̇_distal = 0,
//! ```
//!
//! so the constraint Jacobian has entry +1 at the proximal column and
//! −r_d/r_p at the distal column, zeros elsewhere. Its floating-base columns
//! are identically zero and its time derivative vanishes, which is what lets
//! the controller treat the constraint with a constant projector instead of
//! extra decision variables.

use nalgebra::{DMatrix, DVector};

use crate::model::{RobotModel, RobotState};

/// SVD pseudo-inverse with a relative singular-value cutoff: singular values
/// below `rel · σ_max` are treated as zero. Every pseudo-inverse in this
/// crate uses `rel = 1e-8`.
pub fn pinv_rel(m: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = rel * sigma_max;
    let u = svd.u.as_ref().expect("svd requested u");
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let mut inv_s = DMatrix::zeros(v_t.nrows(), u.ncols());
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > cutoff && *s > 0.0 {
            inv_s[(i, i)] = 1.0 / s;
        }
    }
    v_t.transpose() * inv_s * u.transpose()
}

/// Default relative cutoff for rank decisions.
pub const PINV_CUTOFF: f64 = 1e-8;

/// A stacked set of internal velocity constraints `J_int v = 0`.
///
/// Normally built from a model's rolling pairs; synthetic sets can be
/// constructed from an arbitrary matrix to analyze hypothetical internal
/// couplings.
#[derive(Debug, Clone)]
pub struct InternalConstraintSet {
    jacobian: DMatrix<f64>,
}

impl InternalConstraintSet {
    /// One row per rolling pair, in declaration order.
    pub fn from_model(model: &RobotModel) -> InternalConstraintSet {
        let k = model.rolling_pairs.len();
        let mut j = DMatrix::zeros(k, model.nv);
        for (r, pair) in model.rolling_pairs.iter().enumerate() {
            let vp = model.joints[pair.proximal_joint].v_index;
            let vd = model.joints[pair.distal_joint].v_index;
            j[(r, vp)] = 1.0;
            j[(r, vd)] = -pair.ratio();
        }
        InternalConstraintSet { jacobian: j }
    }

    /// Wraps an arbitrary constraint matrix.
    pub fn from_matrix(jacobian: DMatrix<f64>) -> InternalConstraintSet {
        InternalConstraintSet { jacobian }
    }

    /// Number of constraint rows.
    pub fn k(&self) -> usize {
        self.jacobian.nrows()
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    /// Velocity-level violation `J_int v`.
    pub fn velocity_residual(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.jacobian * v
    }
}

/// Position-level constraint violation, one entry per rolling pair:
/// `q_proximal − (r_d / r_p) · q_distal`. Zero on any reachable motion of
/// the physical mechanism.
pub fn constraint_residual(model: &RobotModel, state: &RobotState) -> DVector<f64> {
    DVector::from_iterator(
        model.rolling_pairs.len(),
        model.rolling_pairs.iter().map(|pair| {
            let qp = state.q[model.joints[pair.proximal_joint].q_index];
            let qd = state.q[model.joints[pair.distal_joint].q_index];
            qp - pair.ratio() * qd
        }),
    )
}

/// Net articulation angle of each rolling pair: the sum of the proximal and
/// distal coordinates. With equal radii this is twice the distal coordinate.
pub fn knee_angles(model: &RobotModel, state: &RobotState) -> Vec<f64> {
    model
        .rolling_pairs
        .iter()
        .map(|pair| {
            state.q[model.joints[pair.proximal_joint].q_index]
                + state.q[model.joints[pair.distal_joint].q_index]
        })
        .collect()
}

/// Dynamically consistent pseudo-inverse `J̄ = A⁻¹ Jᵀ (J A⁻¹ Jᵀ)†`.
///
/// `J̄ J` is then the identity on the constraint row space measured in the
/// kinetic-energy metric, and `I − J̄ J` projects onto constraint-consistent
/// motions without injecting base wrenches.
pub fn dyn_consistent_pseudoinverse(j: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let chol = a
        .clone()
        .cholesky()
        .expect("mass matrix must be positive definite");
    let a_inv_jt = chol.solve(&j.transpose());
    let gram = j * &a_inv_jt;
    a_inv_jt * pinv_rel(&gram, PINV_CUTOFF)
}

/// Null-space projector `N = I − J̄ J` of an internal constraint set in the
/// metric of the mass matrix `A`.
pub fn nullspace_projector(ics: &InternalConstraintSet, a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if ics.k() == 0 {
        return DMatrix::identity(n, n);
    }
    let jbar = dyn_consistent_pseudoinverse(ics.jacobian(), a);
    DMatrix::identity(n, n) - jbar * ics.jacobian()
}

/// Internal constraint forces that close the force balance
///
/// ```text
///   A q̈ + b + g = S_aᵀ τ + J_cᵀ F_r + J_intᵀ F_int.
/// ```
///
/// `deficit` is everything already known, `A q̈ + b + g − S_aᵀ τ − J_cᵀ F_r`;
/// the returned `F_int` is its dynamically consistent preimage under
/// `J_intᵀ`.
pub fn solve_internal_forces(
    ics: &InternalConstraintSet,
    a: &DMatrix<f64>,
    deficit: &DVector<f64>,
) -> DVector<f64> {
    let chol = a
        .clone()
        .cholesky()
        .expect("mass matrix must be positive definite");
    let a_inv_deficit = chol.solve(deficit);
    let a_inv_jt = chol.solve(&ics.jacobian().transpose());
    let gram = ics.jacobian() * a_inv_jt;
    pinv_rel(&gram, PINV_CUTOFF) * (ics.jacobian() * a_inv_deficit)
}

/// State-dependent pieces of the internally constrained dynamics, gathered
/// once per control tick and shared by QP assembly and torque recovery.
#[derive(Debug, Clone)]
pub struct ProjectedDynamics {
    /// Null-space projector `N = I − J̄ J`, nv × nv.
    pub n: DMatrix<f64>,
    /// Dynamically consistent inverse `J̄`, nv × k.
    pub jbar: DMatrix<f64>,
    /// Projected bias `Nᵀ(b + g)`, length nv.
    pub bias: DVector<f64>,
    /// Projected contact map `(J_c N)ᵀ`, nv × 6·n_contacts (zero width
    /// without contacts).
    pub contact_map: DMatrix<f64>,
    /// Reduced actuation maps standing in for `(S_a N)ᵀ` and its truncated
    /// dynamically consistent inverse.
    pub actuation: ReducedActuation,
}

/// Builds [`ProjectedDynamics`] for one state: `a` is the mass matrix,
/// `bias_bg` the full bias `b + g`, and `j_c` the stacked contact Jacobian
/// (may have zero rows).
pub fn projected_dynamics(
    ics: &InternalConstraintSet,
    actuated_v: &[usize],
    a: &DMatrix<f64>,
    bias_bg: &DVector<f64>,
    j_c: &DMatrix<f64>,
) -> ProjectedDynamics {
    let nv = a.nrows();
    let (n, jbar) = if ics.k() == 0 {
        (DMatrix::identity(nv, nv), DMatrix::zeros(nv, 0))
    } else {
        let jbar = dyn_consistent_pseudoinverse(ics.jacobian(), a);
        (DMatrix::identity(nv, nv) - &jbar * ics.jacobian(), jbar)
    };
    let bias = n.transpose() * bias_bg;
    let contact_map = n.transpose() * j_c.transpose();
    let actuation = reduced_actuation(ics, actuated_v, a);
    ProjectedDynamics {
        n,
        jbar,
        bias,
        contact_map,
        actuation,
    }
}

/// Torque-space maps for the actuated coordinates when internal constraints
/// are projected out.
///
/// With the joint block `N_t` of the projector and its actuated rows `M_t`,
/// torque recovery solves `M_tᵀ τ = r_joint` through the weighted
/// pseudo-inverse with weight `Φ = (A⁻¹)` restricted to joint coordinates.
/// That choice makes `M̄_t M_t = N_t` hold exactly whenever the constraint
/// really is internal (zero floating-base columns), so no actuation
/// authority is lost by dropping the floating-base rows.
#[derive(Debug, Clone)]
pub struct ReducedActuation {
    /// Joint block of the null-space projector, n_j × n_j.
    pub n_t: DMatrix<f64>,
    /// Actuated rows of `N_t`, n_a × n_j.
    pub m_t: DMatrix<f64>,
    /// Maps the joint rows of a projected force balance to actuated
    /// torques, n_a × n_j: `τ = recover · r_joint`.
    pub recover: DMatrix<f64>,
    /// Joint block of `A⁻¹`, the weighting metric, n_j × n_j.
    pub phi: DMatrix<f64>,
}

/// Builds the reduced actuation maps for the given constraint set, actuated
/// velocity indices, and mass matrix.
pub fn reduced_actuation(
    ics: &InternalConstraintSet,
    actuated_v: &[usize],
    a: &DMatrix<f64>,
) -> ReducedActuation {
    let nv = a.nrows();
    let nj = nv - 6;
    let n = nullspace_projector(ics, a);
    let n_t = n.view((6, 6), (nj, nj)).into_owned();
    let mut m_t = DMatrix::zeros(actuated_v.len(), nj);
    for (r, &vi) in actuated_v.iter().enumerate() {
        m_t.row_mut(r).copy_from(&n_t.row(vi - 6));
    }
    let a_inv = a
        .clone()
        .cholesky()
        .expect("mass matrix must be positive definite")
        .inverse();
    let phi = a_inv.view((6, 6), (nj, nj)).into_owned();
    let gram = &m_t * &phi * m_t.transpose();
    let recover = pinv_rel(&gram, PINV_CUTOFF) * &m_t * &phi;
    ReducedActuation {
        n_t,
        m_t,
        recover,
        phi,
    }
}

/// Verifies that dropping the floating-base rows of the projected actuation
/// map loses nothing: `M̄_t M_t = N_t` with the `A⁻¹`-weighted
/// pseudo-inverse, and the actuated rows of the projector carry no
/// floating-base coupling. Returns the pass flag and the worst defect.
pub fn check_actuation_validity(
    ics: &InternalConstraintSet,
    actuated_v: &[usize],
    a: &DMatrix<f64>,
) -> (bool, f64) {
    let ra = reduced_actuation(ics, actuated_v, a);
    let n = nullspace_projector(ics, a);

    // Base-column coupling of the actuated projector rows; exactly zero for
    // genuine internal constraints.
    let mut base_coupling: f64 = 0.0;
    for &vi in actuated_v {
        for c in 0..6 {
            base_coupling = base_coupling.max(n[(vi, c)].abs());
        }
    }

    let m_bar = &ra.phi * ra.m_t.transpose() * pinv_rel(&(&ra.m_t * &ra.phi * ra.m_t.transpose()), PINV_CUTOFF);
    let identity_defect = (m_bar * &ra.m_t - &ra.n_t).abs().max();

    let defect = base_coupling.max(identity_defect);
    (defect < 1e-8, defect)
}
