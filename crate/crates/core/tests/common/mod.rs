//! Shared oracles for the integration suite: a brute-force quadratic
//! program solver, finite-difference kinematics, and a hand-derived
//! double-pendulum mass matrix.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, UnitQuaternion};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rcwbc::dynamics::{
    frame_jacobian, inverse_dynamics, integrate_positions, jacobian_dot_times_v, mass_matrix,
};
use rcwbc::model::{load_model, load_model_from_str, RobotModel, RobotState};
use rcwbc::qp::{solve_qp, QpError, QpProblem};

pub fn asset(rel: &str) -> String {
    format!("{}/../../assets/{}", env!("CARGO_MANIFEST_DIR"), rel)
}

pub fn biped() -> RobotModel {
    load_model(asset("models/biped_rcj.toml")).unwrap()
}

// ---------------------------------------------------------------------------
// Quadratic programming oracle
// ---------------------------------------------------------------------------

/// One-sided row `n·x ≥ h`.
struct OneSided {
    n: DVector<f64>,
    h: f64,
}

fn one_sided_rows(p: &QpProblem) -> Vec<OneSided> {
    let n = p.n();
    let mut rows = Vec::new();
    for r in 0..p.a_in.nrows() {
        let a = p.a_in.row(r).transpose().into_owned();
        if p.lb_in[r].is_finite() {
            rows.push(OneSided {
                n: a.clone(),
                h: p.lb_in[r],
            });
        }
        if p.ub_in[r].is_finite() {
            rows.push(OneSided { n: -a, h: -p.ub_in[r] });
        }
    }
    for j in 0..n {
        if p.lb[j].is_finite() {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            rows.push(OneSided { n: e, h: p.lb[j] });
        }
        if p.ub[j].is_finite() {
            let mut e = DVector::zeros(n);
            e[j] = -1.0;
            rows.push(OneSided { n: e, h: -p.ub[j] });
        }
    }
    rows
}

/// Global minimizer by exhaustive active-set enumeration: every subset of
/// the one-sided constraints is treated as active with the equalities,
/// the KKT system is solved directly, and the candidate is kept when its
/// multipliers are nonnegative and the inactive rows hold. The Hessians
/// used in the suite are positive definite, so any KKT point is the
/// optimum; `None` means no subset admits one, i.e. the problem is
/// infeasible.
pub fn brute_force_qp(p: &QpProblem) -> Option<DVector<f64>> {
    let n = p.n();
    let me = p.a_eq.nrows();
    let ones = one_sided_rows(p);
    let m1 = ones.len();
    assert!(m1 <= 16, "oracle enumeration capped at 16 one-sided rows");
    let tol = 1e-8;

    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m1) {
        let active: Vec<usize> = (0..m1).filter(|i| mask >> i & 1 == 1).collect();
        if active.len() + me > n {
            continue;
        }
        let ka = active.len();
        let dim = n + me + ka;
        let mut k = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        k.view_mut((0, 0), (n, n)).copy_from(&p.h);
        rhs.rows_mut(0, n).copy_from(&(-&p.g));
        if me > 0 {
            k.view_mut((n, 0), (me, n)).copy_from(&p.a_eq);
            k.view_mut((0, n), (n, me)).copy_from(&p.a_eq.transpose());
            rhs.rows_mut(n, me).copy_from(&p.b_eq);
        }
        // Stationarity is H x + g = A_eqᵀ ν + Σ μ_i n_i with μ ≥ 0, so the
        // multiplier columns enter negated on the left-hand side.
        for (r, &i) in active.iter().enumerate() {
            k.view_mut((n + me + r, 0), (1, n))
                .copy_from(&ones[i].n.transpose());
            k.view_mut((0, n + me + r), (n, 1)).copy_from(&(-&ones[i].n));
            rhs[n + me + r] = ones[i].h;
        }
        let Some(z) = k.clone().lu().solve(&rhs) else {
            continue;
        };
        if (&k * &z - &rhs).amax() > 1e-7 * (1.0 + rhs.amax()) {
            continue;
        }
        let x = z.rows(0, n).into_owned();
        if (0..ka).any(|r| z[n + me + r] < -tol) {
            continue;
        }
        if (0..m1)
            .filter(|i| mask >> i & 1 == 0)
            .any(|i| ones[i].n.dot(&x) < ones[i].h - tol)
        {
            continue;
        }
        let obj = 0.5 * x.dot(&(&p.h * &x)) + p.g.dot(&x);
        if best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, x));
        }
    }
    best.map(|(_, x)| x)
}

/// Random problem with a positive-definite Hessian. Feasible problems are
/// built around a known interior point; infeasible ones append a
/// contradictory pair of rows on a shared direction.
pub fn random_qp(rng: &mut ChaCha8Rng, feasible: bool) -> QpProblem {
    let n = rng.gen_range(1..=20);
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let h = &m * m.transpose() + DMatrix::identity(n, n) * rng.gen_range(0.1..1.0);
    let g = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let x_feas = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));

    let me = rng.gen_range(0..=3.min(n - 1));
    let a_eq = DMatrix::from_fn(me, n, |_, _| rng.gen_range(-1.0..1.0));
    let b_eq = &a_eq * &x_feas;

    let mi = rng.gen_range(0..=3);
    let a_in = DMatrix::from_fn(mi, n, |_, _| rng.gen_range(-1.0..1.0));
    let mut lb_in = DVector::from_element(mi, f64::NEG_INFINITY);
    let mut ub_in = DVector::from_element(mi, f64::INFINITY);
    for r in 0..mi {
        let y = a_in.row(r).transpose().dot(&x_feas);
        let lower = rng.gen_bool(0.5);
        if lower || rng.gen_bool(0.5) {
            lb_in[r] = y - rng.gen_range(0.05..1.5);
        }
        if !lower || rng.gen_bool(0.5) {
            ub_in[r] = y + rng.gen_range(0.05..1.5);
        }
    }

    let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(n, f64::INFINITY);
    for _ in 0..3.min(n) {
        let j = rng.gen_range(0..n);
        if rng.gen_bool(0.5) {
            lb[j] = x_feas[j] - rng.gen_range(0.05..1.5);
        }
        if rng.gen_bool(0.5) {
            ub[j] = x_feas[j] + rng.gen_range(0.05..1.5);
        }
    }

    let mut p = QpProblem {
        h,
        g,
        a_eq,
        b_eq,
        a_in,
        lb_in,
        ub_in,
        lb,
        ub,
    };
    if !feasible {
        let dir = DMatrix::from_fn(1, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut a = DMatrix::zeros(p.a_in.nrows() + 2, n);
        a.view_mut((0, 0), (p.a_in.nrows(), n)).copy_from(&p.a_in);
        a.view_mut((p.a_in.nrows(), 0), (1, n)).copy_from(&dir);
        a.view_mut((p.a_in.nrows() + 1, 0), (1, n)).copy_from(&dir);
        let gap = rng.gen_range(0.5..2.0);
        let mut lb_in = p.lb_in.clone().insert_rows(p.lb_in.nrows(), 2, 0.0);
        let mut ub_in = p.ub_in.clone().insert_rows(p.ub_in.nrows(), 2, 0.0);
        let base = a.row(p.a_in.nrows()).transpose().dot(&x_feas);
        lb_in[p.a_in.nrows()] = base + gap;
        ub_in[p.a_in.nrows()] = f64::INFINITY;
        lb_in[p.a_in.nrows() + 1] = f64::NEG_INFINITY;
        ub_in[p.a_in.nrows() + 1] = base;
        p.a_in = a;
        p.lb_in = lb_in;
        p.ub_in = ub_in;
    }
    p
}

pub struct QpSweepStats {
    pub solved: usize,
    pub infeasible_agreed: usize,
    pub worst_dx: f64,
    pub worst_kkt: f64,
}

/// Solves `count` random problems (every eighth one infeasible) and
/// compares each against [`brute_force_qp`]. Panics on any disagreement
/// beyond the stated bounds.
pub fn qp_oracle_sweep(seed: u64, count: usize) -> QpSweepStats {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = QpSweepStats {
        solved: 0,
        infeasible_agreed: 0,
        worst_dx: 0.0,
        worst_kkt: 0.0,
    };
    for case in 0..count {
        let feasible = case % 8 != 7;
        let p = random_qp(&mut rng, feasible);
        let oracle = brute_force_qp(&p);
        match (solve_qp(&p), oracle) {
            (Ok(sol), Some(x_ref)) => {
                let dx = (&sol.x - &x_ref).amax();
                assert!(
                    dx < 1e-6,
                    "case {case}: solver and oracle disagree by {dx:.3e}"
                );
                assert!(
                    sol.kkt_residual < 1e-8,
                    "case {case}: kkt residual {:.3e}",
                    sol.kkt_residual
                );
                stats.worst_dx = stats.worst_dx.max(dx);
                stats.worst_kkt = stats.worst_kkt.max(sol.kkt_residual);
                stats.solved += 1;
            }
            (Err(QpError::InfeasibleProblem { .. }), None) => {
                stats.infeasible_agreed += 1;
            }
            (Ok(_), None) => panic!("case {case}: solver accepted an infeasible problem"),
            (Err(e), Some(_)) => panic!("case {case}: solver rejected a feasible problem: {e}"),
            (Err(e), None) => panic!("case {case}: expected infeasibility certificate, got {e}"),
        }
    }
    stats
}

// ---------------------------------------------------------------------------
// Dynamics oracles
// ---------------------------------------------------------------------------

/// Worst entry-wise disagreement between the composite-rigid-body mass
/// matrix and columns reconstructed from inverse dynamics,
/// `A e_i = ID(q, 0, e_i) − ID(q, 0, 0)`, plus the symmetry defect.
pub fn crba_vs_rnea_defect(model: &RobotModel, state: &RobotState) -> f64 {
    let mut probe = state.clone();
    probe.v.fill(0.0);
    let a = mass_matrix(model, &probe).unwrap();
    let bias = inverse_dynamics(model, &probe, &DVector::zeros(model.nv)).unwrap();
    let mut worst = (&a - a.transpose()).amax();
    for i in 0..model.nv {
        let mut e = DVector::zeros(model.nv);
        e[i] = 1.0;
        let col = inverse_dynamics(model, &probe, &e).unwrap() - &bias;
        worst = worst.max((a.column(i) - col).amax());
    }
    worst
}

/// Central-difference check of a frame Jacobian: linear rows against the
/// frame origin, angular rows against the body rotation, both on world
/// axes. Returns the worst entry disagreement.
pub fn fd_jacobian_defect(model: &RobotModel, state: &RobotState, frame: &str) -> f64 {
    let h = 1e-6;
    let j = frame_jacobian(model, state, frame).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..model.nv {
        let mut dir = DVector::zeros(model.nv);
        dir[i] = 1.0;
        let qp = integrate_positions(model, &state.q, &dir, h);
        let qm = integrate_positions(model, &state.q, &dir, -h);
        let sp = RobotState {
            q: qp,
            v: DVector::zeros(model.nv),
        };
        let sm = RobotState {
            q: qm,
            v: DVector::zeros(model.nv),
        };
        let pp = rcwbc::dynamics::forward_kinematics(model, &sp)
            .unwrap()
            .frame_pose(model, frame)
            .unwrap();
        let pm = rcwbc::dynamics::forward_kinematics(model, &sm)
            .unwrap()
            .frame_pose(model, frame)
            .unwrap();
        let dlin = (pp.translation.vector - pm.translation.vector) / (2.0 * h);
        let drot = pp.rotation * pm.rotation.inverse();
        let dang = drot
            .axis_angle()
            .map(|(axis, angle)| axis.into_inner() * angle / (2.0 * h))
            .unwrap_or_else(nalgebra::Vector3::zeros);
        for r in 0..3 {
            worst = worst.max((j[(r, i)] - dang[r]).abs());
            worst = worst.max((j[(r + 3, i)] - dlin[r]).abs());
        }
    }
    worst
}

/// Central-difference check of the Jacobian drift term:
/// `J̇ q̇ ≈ (J(q ⊕ v h) − J(q ⊖ v h)) v / 2h`.
pub fn fd_jdot_v_defect(model: &RobotModel, state: &RobotState, frame: &str) -> f64 {
    let h = 1e-6;
    let jdv = jacobian_dot_times_v(model, state, frame).unwrap();
    let sp = RobotState {
        q: integrate_positions(model, &state.q, &state.v, h),
        v: state.v.clone(),
    };
    let sm = RobotState {
        q: integrate_positions(model, &state.q, &state.v, -h),
        v: state.v.clone(),
    };
    let jp = frame_jacobian(model, &sp, frame).unwrap();
    let jm = frame_jacobian(model, &sm, frame).unwrap();
    let fd = (jp - jm) * &state.v / (2.0 * h);
    (jdv - fd).amax()
}

/// Planar double pendulum hung from a floating mount; the joint block of
/// the floating-base mass matrix equals the pinned-base mass matrix, for
/// which the closed form is
///
/// ```text
///   A11 = I1 + I2 + m1 lc1² + m2 (l1² + lc2² + 2 l1 lc2 cos q2)
///   A12 = I2 + m2 (lc2² + l1 lc2 cos q2)
///   A22 = I2 + m2 lc2²
/// ```
pub struct DoublePendulum {
    pub model: RobotModel,
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub lc1: f64,
    pub lc2: f64,
    pub i1: f64,
    pub i2: f64,
}

pub fn double_pendulum() -> DoublePendulum {
    let (m1, m2) = (1.4, 0.9);
    let (l1, lc1, lc2) = (0.45, 0.21, 0.33);
    let (i1, i2) = (0.02, 0.013);
    let doc = format!(
        r#"
name = "double_pendulum"
standing_height = 1.0

[[links]]
name = "mount"
mass = 5.0
com = [0.0, 0.0, 0.0]
inertia = [[0.05, 0.0, 0.0], [0.0, 0.05, 0.0], [0.0, 0.0, 0.05]]

[[links]]
name = "upper"
mass = {m1}
com = [0.0, 0.0, -{lc1}]
inertia = [[{i1}, 0.0, 0.0], [0.0, {i1}, 0.0], [0.0, 0.0, 0.003]]

[[links]]
name = "lower"
mass = {m2}
com = [0.0, 0.0, -{lc2}]
inertia = [[{i2}, 0.0, 0.0], [0.0, {i2}, 0.0], [0.0, 0.0, 0.002]]

[[joints]]
name = "root"
kind = "floating_base"
parent = "world"
child = "mount"

[[joints]]
name = "shoulder"
kind = "revolute"
parent = "mount"
child = "upper"
axis = [0.0, 1.0, 0.0]
position_limits = [-3.1, 3.1]

[[joints]]
name = "elbow"
kind = "revolute"
parent = "upper"
child = "lower"
axis = [0.0, 1.0, 0.0]
origin = {{ xyz = [0.0, 0.0, -{l1}] }}
position_limits = [-3.1, 3.1]
"#
    );
    DoublePendulum {
        model: load_model_from_str(&doc).unwrap(),
        m1,
        m2,
        l1,
        lc1,
        lc2,
        i1,
        i2,
    }
}

impl DoublePendulum {
    pub fn closed_form(&self, q2: f64) -> [f64; 3] {
        let c2 = q2.cos();
        let a11 = self.i1
            + self.i2
            + self.m1 * self.lc1 * self.lc1
            + self.m2
                * (self.l1 * self.l1 + self.lc2 * self.lc2 + 2.0 * self.l1 * self.lc2 * c2);
        let a12 = self.i2 + self.m2 * (self.lc2 * self.lc2 + self.l1 * self.lc2 * c2);
        let a22 = self.i2 + self.m2 * self.lc2 * self.lc2;
        [a11, a12, a22]
    }

    /// Worst disagreement of the joint block against the closed form at
    /// the given joint angles, with the base left at identity.
    pub fn mass_matrix_defect(&self, q1: f64, q2: f64) -> f64 {
        let mut state = self.model.neutral_state();
        let sh = self.model.joint_index("shoulder").unwrap();
        let el = self.model.joint_index("elbow").unwrap();
        state.q[self.model.joints[sh].q_index] = q1;
        state.q[self.model.joints[el].q_index] = q2;
        let a = mass_matrix(&self.model, &state).unwrap();
        let [a11, a12, a22] = self.closed_form(q2);
        let b = a.view((6, 6), (2, 2));
        (b[(0, 0)] - a11)
            .abs()
            .max((b[(0, 1)] - a12).abs())
            .max((b[(1, 0)] - a12).abs())
            .max((b[(1, 1)] - a22).abs())
    }
}

/// Random base rotation helper for state randomizations that need raw
/// quaternion access.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(
        rng.gen_range(-3.0..3.0),
        rng.gen_range(-1.5..1.5),
        rng.gen_range(-3.0..3.0),
    )
}
