//! Dense convex quadratic programming by a dual active-set method.
//!
//! ```text
//!   minimize    ½ xᵀ H x + gᵀ x
//!   subject to  A_eq x = b_eq
//!               lb_in ≤ A_in x ≤ ub_in
//!               lb ≤ x ≤ ub
//! ```
//!
//! The solver starts at the unconstrained minimizer, forces the equalities
//! in first, then repeatedly adds the most violated inequality while staying
//! dual feasible, taking partial steps that drop blocking constraints. Every
//! iterate is the exact optimum of the subproblem with its active set, so
//! the first primal-feasible iterate is the solution. Equality constraints
//! are never dropped and their multipliers are unrestricted in sign.
//!
//! Factorizations are redone from scratch each step; problem sizes in this
//! crate stay small (tens of variables) and robustness is worth more here
//! than the rank-one updates of the classical implementation.
//!
//! Warm starting re-solves the equality-constrained subproblem for a caller
//! supplied active set; if that point is primal feasible with nonnegative
//! inequality multipliers it is returned after a single iteration, otherwise
//! the solver falls back to a cold start.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    /// No point satisfies all constraints. Carries the residual of the
    /// constraint that could not be satisfied as the certificate.
    #[error("infeasible problem (unsatisfiable constraint residual {residual:.3e})")]
    InfeasibleProblem { residual: f64 },
    #[error("active-set iteration limit {0} reached")]
    MaxIterations(usize),
    /// The Hessian could not be factored even after a small diagonal shift,
    /// or an equality subsystem was numerically singular.
    #[error("ill-conditioned problem: factorization failed")]
    IllConditioned,
}

/// Problem data. Infinite bounds mark absent constraints; rows with both
/// bounds infinite and variables with an infinite box are simply skipped.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub lb_in: DVector<f64>,
    pub ub_in: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem skeleton with the given variable count.
    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> QpProblem {
        let n = g.len();
        QpProblem {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            lb_in: DVector::zeros(0),
            ub_in: DVector::zeros(0),
            lb: DVector::from_element(n, f64::NEG_INFINITY),
            ub: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }
}

/// Signed multipliers for the public constraint form; the stationarity
/// condition they satisfy is
///
/// ```text
///   H x + g = A_eqᵀ eq + A_inᵀ (in_lower − in_upper) + (box_lower − box_upper).
/// ```
#[derive(Debug, Clone)]
pub struct QpDuals {
    pub eq: DVector<f64>,
    pub in_lower: DVector<f64>,
    pub in_upper: DVector<f64>,
    pub box_lower: DVector<f64>,
    pub box_upper: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub duals: QpDuals,
    /// Active one-sided inequality ids, usable to warm start the next solve
    /// of a structurally identical problem.
    pub active_set: Vec<usize>,
    /// Active-set changes performed (equality seeding not counted).
    pub iterations: usize,
    /// Worst violation among stationarity, primal and dual feasibility, and
    /// complementary slackness at the returned point.
    pub kkt_residual: f64,
}

/// One-sided constraints `n·x ≥ h` derived from the two-sided rows and the
/// box; ids are stable for a fixed problem structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    InLower(usize),
    InUpper(usize),
    BoxLower(usize),
    BoxUpper(usize),
}

struct Canonical {
    kinds: Vec<RowKind>,
    normals: Vec<DVector<f64>>,
    offsets: Vec<f64>,
}

fn canonicalize(p: &QpProblem) -> Canonical {
    let n = p.n();
    let mut kinds = Vec::new();
    let mut normals = Vec::new();
    let mut offsets = Vec::new();
    for i in 0..p.a_in.nrows() {
        let row = p.a_in.row(i).transpose();
        if p.lb_in[i].is_finite() {
            kinds.push(RowKind::InLower(i));
            normals.push(row.clone());
            offsets.push(p.lb_in[i]);
        }
        if p.ub_in[i].is_finite() {
            kinds.push(RowKind::InUpper(i));
            normals.push(-&row);
            offsets.push(-p.ub_in[i]);
        }
    }
    for j in 0..n {
        if p.lb[j].is_finite() {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            kinds.push(RowKind::BoxLower(j));
            normals.push(e);
            offsets.push(p.lb[j]);
        }
        if p.ub[j].is_finite() {
            let mut e = DVector::zeros(n);
            e[j] = -1.0;
            kinds.push(RowKind::BoxUpper(j));
            normals.push(e);
            offsets.push(-p.ub[j]);
        }
    }
    Canonical {
        kinds,
        normals,
        offsets,
    }
}

struct ActiveEntry {
    /// Canonical inequality id, or `None` for an equality row.
    id: Option<usize>,
    normal: DVector<f64>,
    u: f64,
}

struct Solver<'a> {
    p: &'a QpProblem,
    canon: Canonical,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    x: DVector<f64>,
    active: Vec<ActiveEntry>,
    iterations: usize,
    max_iterations: usize,
}

/// Relative zero threshold for a projected step direction.
const EPS_Z: f64 = 1e-11;
/// Threshold below which a dual step component cannot block.
const EPS_R: f64 = 1e-12;
/// A constraint is treated as satisfied when its slack exceeds −FEAS_TOL
/// times its scale.
const FEAS_TOL: f64 = 1e-10;

fn factor_hessian(h: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, QpError> {
    let sym = (h + h.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return Ok(c);
    }
    // Positive semidefinite Hessians are admitted with a tiny ridge; callers
    // needing exact semidefinite handling should regularize themselves.
    let scale = sym.diagonal().amax().max(1.0);
    let shifted = &sym + DMatrix::identity(h.nrows(), h.nrows()) * (1e-12 * scale);
    shifted.cholesky().ok_or(QpError::IllConditioned)
}

impl<'a> Solver<'a> {
    fn new(p: &'a QpProblem) -> Result<Solver<'a>, QpError> {
        let chol = factor_hessian(&p.h)?;
        let x = chol.solve(&(-&p.g));
        let canon = canonicalize(p);
        let max_iterations = 50 * (p.n() + canon.kinds.len() + p.a_eq.nrows()).max(10);
        Ok(Solver {
            p,
            canon,
            chol,
            x,
            active: Vec::new(),
            iterations: 0,
            max_iterations,
        })
    }

    /// Primal and dual step directions for adding a constraint with normal
    /// `n_plus`: `z` moves the primal solution, `r` is the rate at which the
    /// active multipliers must yield.
    fn step_directions(&self, n_plus: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let w = self.chol.solve(n_plus);
        let m = self.active.len();
        if m == 0 {
            return (w, DVector::zeros(0));
        }
        let mut b = DMatrix::zeros(self.p.n(), m);
        for (k, e) in self.active.iter().enumerate() {
            b.set_column(k, &self.chol.solve(&e.normal));
        }
        let mut nmat = DMatrix::zeros(m, self.p.n());
        for (k, e) in self.active.iter().enumerate() {
            nmat.row_mut(k).copy_from(&e.normal.transpose());
        }
        let s = &nmat * &b;
        let rhs = &nmat * &w;
        let r = match s.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => match s.clone().lu().solve(&rhs) {
                Some(sol) => sol,
                // Dependent active set should be unreachable (only
                // independent normals are added); fall back to least squares.
                None => crate::rolling::pinv_rel(&s, 1e-12) * &rhs,
            },
        };
        let z = w - b * &r;
        (z, r)
    }

    fn z_is_zero(&self, z: &DVector<f64>, w: &DVector<f64>) -> bool {
        z.amax() <= EPS_Z * w.amax().max(1.0)
    }

    /// Drives one constraint into the active set, taking partial steps and
    /// dropping blockers as needed. `equality` entries admit negative
    /// multipliers and never participate in blocking.
    fn add_constraint(
        &mut self,
        normal: DVector<f64>,
        offset: f64,
        id: Option<usize>,
    ) -> Result<(), QpError> {
        // Multiplier of the incoming constraint, accumulated across partial
        // steps so stationarity holds at every iterate.
        let mut u_plus = 0.0;
        loop {
            self.iterations += 1;
            if self.iterations > self.max_iterations {
                return Err(QpError::MaxIterations(self.max_iterations));
            }
            let slack = normal.dot(&self.x) - offset;
            let scale = 1.0 + offset.abs();
            if slack >= -FEAS_TOL * scale {
                // Satisfied exactly at the boundary (or through earlier
                // drops); keep it active with whatever weight it has earned.
                self.active.push(ActiveEntry {
                    id,
                    normal,
                    u: u_plus,
                });
                return Ok(());
            }
            let w = self.chol.solve(&normal);
            let (z, r) = self.step_directions(&normal);
            let z_zero = self.z_is_zero(&z, &w);

            // Blocking step bound from active inequality multipliers.
            let mut t1 = f64::INFINITY;
            let mut blocker = None;
            for (k, e) in self.active.iter().enumerate() {
                if e.id.is_some() && r[k] > EPS_R {
                    let bound = e.u / r[k];
                    if bound < t1 {
                        t1 = bound;
                        blocker = Some(k);
                    }
                }
            }
            // Step length that satisfies the new constraint.
            let t2 = if z_zero {
                f64::INFINITY
            } else {
                -slack / normal.dot(&z)
            };

            if !t1.is_finite() && !t2.is_finite() {
                return Err(QpError::InfeasibleProblem {
                    residual: slack.abs(),
                });
            }

            if t2 <= t1 {
                // Full step: the constraint becomes active.
                self.x += &z * t2;
                for (k, e) in self.active.iter_mut().enumerate() {
                    e.u -= t2 * r[k];
                }
                self.active.push(ActiveEntry {
                    id,
                    normal,
                    u: u_plus + t2,
                });
                return Ok(());
            }
            // Partial step: a blocking multiplier hits zero first; drop it
            // and retry with the same incoming constraint.
            let k = blocker.expect("finite t1 implies a blocker");
            if !z_zero {
                self.x += &z * t1;
            }
            for (j, e) in self.active.iter_mut().enumerate() {
                e.u -= t1 * r[j];
            }
            u_plus += t1;
            self.active.remove(k);
        }
    }

    fn seed_equalities(&mut self) -> Result<(), QpError> {
        for e in 0..self.p.a_eq.nrows() {
            let a = self.p.a_eq.row(e).transpose();
            let b = self.p.b_eq[e];
            let slack = a.dot(&self.x) - b;
            let (z, _) = self.step_directions(&a);
            let w = self.chol.solve(&a);
            if self.z_is_zero(&z, &w) {
                // Linearly dependent on the rows already active.
                let scale = 1.0 + b.abs();
                if slack.abs() <= 1e-8 * scale {
                    continue; // consistent duplicate row
                }
                return Err(QpError::InfeasibleProblem {
                    residual: slack.abs(),
                });
            }
            // Orient the row so the current point is on the violated side,
            // then force it in; with only equalities active nothing blocks.
            let (normal, offset) = if slack > 0.0 { (-a, -b) } else { (a, b) };
            let iters_before = self.iterations;
            self.add_constraint(normal, offset, None)?;
            // Equality seeding is setup, not active-set search.
            self.iterations = iters_before;
        }
        Ok(())
    }

    fn most_violated(&self) -> Option<(usize, f64)> {
        let mut worst: Option<(usize, f64)> = None;
        for (i, n) in self.canon.normals.iter().enumerate() {
            if self.active.iter().any(|e| e.id == Some(i)) {
                continue;
            }
            let h = self.canon.offsets[i];
            let slack = n.dot(&self.x) - h;
            let tol = FEAS_TOL * (1.0 + h.abs());
            if slack < -tol {
                match worst {
                    Some((_, s)) if s <= slack => {}
                    _ => worst = Some((i, slack)),
                }
            }
        }
        worst
    }

    fn run(&mut self) -> Result<(), QpError> {
        self.seed_equalities()?;
        while let Some((i, _)) = self.most_violated() {
            let normal = self.canon.normals[i].clone();
            let offset = self.canon.offsets[i];
            self.add_constraint(normal, offset, Some(i))?;
        }
        Ok(())
    }

    fn into_solution(self) -> QpSolution {
        let p = self.p;
        let m_in = p.a_in.nrows();
        let n = p.n();
        let mut duals = QpDuals {
            eq: DVector::zeros(p.a_eq.nrows()),
            in_lower: DVector::zeros(m_in),
            in_upper: DVector::zeros(m_in),
            box_lower: DVector::zeros(n),
            box_upper: DVector::zeros(n),
        };
        let mut active_set = Vec::new();
        let mut eq_cursor = 0usize;
        for e in &self.active {
            match e.id {
                None => {
                    // Equality rows were seeded in order; recover the signed
                    // multiplier for the original row orientation.
                    while eq_cursor < p.a_eq.nrows() {
                        let a = p.a_eq.row(eq_cursor).transpose();
                        let same = (&a - &e.normal).amax() <= 1e-12 * (1.0 + a.amax());
                        let flipped = (&a + &e.normal).amax() <= 1e-12 * (1.0 + a.amax());
                        if same || flipped {
                            duals.eq[eq_cursor] = if same { e.u } else { -e.u };
                            eq_cursor += 1;
                            break;
                        }
                        eq_cursor += 1;
                    }
                }
                Some(id) => {
                    active_set.push(id);
                    match self.canon.kinds[id] {
                        RowKind::InLower(i) => duals.in_lower[i] = e.u,
                        RowKind::InUpper(i) => duals.in_upper[i] = e.u,
                        RowKind::BoxLower(j) => duals.box_lower[j] = e.u,
                        RowKind::BoxUpper(j) => duals.box_upper[j] = e.u,
                    }
                }
            }
        }
        active_set.sort_unstable();
        let objective = 0.5 * (self.x.transpose() * &p.h * &self.x)[(0, 0)] + p.g.dot(&self.x);
        let kkt = kkt_residual(p, &self.x, &duals);
        QpSolution {
            x: self.x,
            objective,
            duals,
            active_set,
            iterations: self.iterations,
            kkt_residual: kkt,
        }
    }
}

/// Solves the problem from a cold start.
pub fn solve_qp(p: &QpProblem) -> Result<QpSolution, QpError> {
    let mut solver = Solver::new(p)?;
    solver.run()?;
    Ok(solver.into_solution())
}

/// Solves with a warm-started active set (canonical ids from a previous
/// [`QpSolution::active_set`] of a structurally identical problem). When the
/// guess is exactly the optimal active set the solve costs one equality
/// subproblem; otherwise the cost is a cold solve.
pub fn solve_qp_warm(p: &QpProblem, warm: &[usize]) -> Result<QpSolution, QpError> {
    if let Some(sol) = try_warm(p, warm)? {
        return Ok(sol);
    }
    solve_qp(p)
}

fn try_warm(p: &QpProblem, warm: &[usize]) -> Result<Option<QpSolution>, QpError> {
    let canon = canonicalize(p);
    if warm.iter().any(|&i| i >= canon.kinds.len()) {
        return Ok(None);
    }
    let m_eq = p.a_eq.nrows();
    let m = m_eq + warm.len();
    let n = p.n();
    if m > n {
        return Ok(None);
    }
    // Equality-constrained subproblem for the guessed active set:
    //   [H Aᵀ] [x ]   [−g]
    //   [A 0 ] [−u] = [ b].
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n))
        .copy_from(&((&p.h + p.h.transpose()) * 0.5));
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-&p.g));
    for e in 0..m_eq {
        let a = p.a_eq.row(e);
        kkt.view_mut((n + e, 0), (1, n)).copy_from(&a);
        kkt.view_mut((0, n + e), (n, 1)).copy_from(&a.transpose());
        rhs[n + e] = p.b_eq[e];
    }
    for (k, &id) in warm.iter().enumerate() {
        let a = canon.normals[id].transpose();
        kkt.view_mut((n + m_eq + k, 0), (1, n)).copy_from(&a);
        kkt.view_mut((0, n + m_eq + k), (n, 1))
            .copy_from(&a.transpose());
        rhs[n + m_eq + k] = canon.offsets[id];
    }
    let sol = match kkt.lu().solve(&rhs) {
        Some(s) => s,
        None => return Ok(None),
    };
    let x = sol.rows(0, n).into_owned();
    let u_eq = sol.rows(n, m_eq).into_owned();
    let u_in = sol.rows(n + m_eq, warm.len()).into_owned();
    // The KKT block gives multipliers with the opposite sign convention.
    let u_eq = -u_eq;
    let u_in = -u_in;
    if u_in.iter().any(|&u| u < -1e-10) {
        return Ok(None);
    }
    for (i, nrm) in canon.normals.iter().enumerate() {
        let slack = nrm.dot(&x) - canon.offsets[i];
        if slack < -FEAS_TOL * (1.0 + canon.offsets[i].abs()) {
            return Ok(None);
        }
    }
    let mut duals = QpDuals {
        eq: u_eq,
        in_lower: DVector::zeros(p.a_in.nrows()),
        in_upper: DVector::zeros(p.a_in.nrows()),
        box_lower: DVector::zeros(n),
        box_upper: DVector::zeros(n),
    };
    for (k, &id) in warm.iter().enumerate() {
        match canon.kinds[id] {
            RowKind::InLower(i) => duals.in_lower[i] = u_in[k],
            RowKind::InUpper(i) => duals.in_upper[i] = u_in[k],
            RowKind::BoxLower(j) => duals.box_lower[j] = u_in[k],
            RowKind::BoxUpper(j) => duals.box_upper[j] = u_in[k],
        }
    }
    let objective = 0.5 * (x.transpose() * &p.h * &x)[(0, 0)] + p.g.dot(&x);
    let kkt_res = kkt_residual(p, &x, &duals);
    let mut active_set = warm.to_vec();
    active_set.sort_unstable();
    Ok(Some(QpSolution {
        x,
        objective,
        duals,
        active_set,
        iterations: 1,
        kkt_residual: kkt_res,
    }))
}

/// Worst KKT violation of a candidate primal-dual point: stationarity,
/// primal feasibility, dual nonnegativity, and complementary slackness.
pub fn kkt_residual(p: &QpProblem, x: &DVector<f64>, duals: &QpDuals) -> f64 {
    let mut worst: f64 = 0.0;
    // Stationarity.
    let mut grad = &p.h * x + &p.g;
    if p.a_eq.nrows() > 0 {
        grad -= p.a_eq.transpose() * &duals.eq;
    }
    if p.a_in.nrows() > 0 {
        grad -= p.a_in.transpose() * (&duals.in_lower - &duals.in_upper);
    }
    grad -= &duals.box_lower - &duals.box_upper;
    worst = worst.max(grad.amax());
    // Primal feasibility.
    for e in 0..p.a_eq.nrows() {
        worst = worst.max((p.a_eq.row(e).transpose().dot(x) - p.b_eq[e]).abs());
    }
    for i in 0..p.a_in.nrows() {
        let v = p.a_in.row(i).transpose().dot(x);
        if p.lb_in[i].is_finite() {
            worst = worst.max((p.lb_in[i] - v).max(0.0));
            worst = worst.max(-duals.in_lower[i]);
            worst = worst.max((duals.in_lower[i] * (v - p.lb_in[i])).abs());
        }
        if p.ub_in[i].is_finite() {
            worst = worst.max((v - p.ub_in[i]).max(0.0));
            worst = worst.max(-duals.in_upper[i]);
            worst = worst.max((duals.in_upper[i] * (p.ub_in[i] - v)).abs());
        }
    }
    for j in 0..p.n() {
        if p.lb[j].is_finite() {
            worst = worst.max((p.lb[j] - x[j]).max(0.0));
            worst = worst.max(-duals.box_lower[j]);
            worst = worst.max((duals.box_lower[j] * (x[j] - p.lb[j])).abs());
        }
        if p.ub[j].is_finite() {
            worst = worst.max((x[j] - p.ub[j]).max(0.0));
            worst = worst.max(-duals.box_upper[j]);
            worst = worst.max((duals.box_upper[j] * (p.ub[j] - x[j])).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn identity_problem(n: usize) -> QpProblem {
        QpProblem::unconstrained(DMatrix::identity(n, n), DVector::zeros(n))
    }

    #[test]
    fn single_bound_activates_in_one_iteration() {
        let mut p = identity_problem(2);
        p.lb[0] = 1.0;
        let sol = solve_qp(&p).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1], 0.0, epsilon = 1e-12);
        assert_eq!(sol.iterations, 1);
        assert!(sol.kkt_residual < 1e-10);
        assert_relative_eq!(sol.duals.box_lower[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn equality_only_is_a_direct_kkt_solve() {
        let mut p = identity_problem(2);
        p.a_eq = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        p.b_eq = DVector::from_vec(vec![2.0]);
        let sol = solve_qp(&p).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1], 1.0, epsilon = 1e-12);
        assert_eq!(sol.iterations, 0);
        assert!(sol.kkt_residual < 1e-10);
        // Gradient x must equal A_eqᵀ λ: (1,1) = λ(1,1).
        assert_relative_eq!(sol.duals.eq[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn contradictory_constraints_are_infeasible_with_certificate() {
        let mut p = identity_problem(2);
        p.a_in = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        p.lb_in = DVector::from_vec(vec![1.0, 0.5]);
        p.ub_in = DVector::from_vec(vec![f64::INFINITY, f64::INFINITY]);
        match solve_qp(&p) {
            Err(QpError::InfeasibleProblem { residual }) => assert!(residual > 0.5),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn two_sided_row_and_box_interact() {
        // min ½‖x − (3, −3)‖²  s.t.  x₀ + x₁ ∈ [−1, 1], x₁ ≥ −1.
        let mut p = identity_problem(2);
        p.g = DVector::from_vec(vec![-3.0, 3.0]);
        p.a_in = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        p.lb_in = DVector::from_vec(vec![-1.0]);
        p.ub_in = DVector::from_vec(vec![1.0]);
        p.lb[1] = -1.0;
        let sol = solve_qp(&p).unwrap();
        // Unconstrained optimum (3, −3): sum = 0 inside [−1, 1], but x₁
        // violates its box; clamping x₁ to −1 leaves the row satisfied at
        // the boundary sum = 2 > 1, so the row's upper side also binds.
        assert!(sol.kkt_residual < 1e-9, "kkt {}", sol.kkt_residual);
        let v = sol.x[0] + sol.x[1];
        assert!(v <= 1.0 + 1e-9);
        assert!(sol.x[1] >= -1.0 - 1e-9);
        assert_relative_eq!(sol.x[0], 2.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x[1], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn warm_start_reuses_active_set_in_one_iteration() {
        let mut p = identity_problem(3);
        p.g = DVector::from_vec(vec![-2.0, 0.5, 0.0]);
        p.lb[0] = 0.0;
        p.ub[0] = 1.0;
        p.lb[1] = 0.0;
        let cold = solve_qp(&p).unwrap();
        let mut p2 = p.clone();
        p2.g[2] = 0.3; // mild perturbation, same active set
        let warm = solve_qp_warm(&p2, &cold.active_set).unwrap();
        assert_eq!(warm.iterations, 1);
        let cold2 = solve_qp(&p2).unwrap();
        assert_relative_eq!(warm.x, cold2.x, epsilon = 1e-10);
    }

    #[test]
    fn warm_start_with_wrong_set_falls_back_to_cold() {
        let mut p = identity_problem(2);
        p.lb[0] = 1.0;
        let sol = solve_qp_warm(&p, &[]).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-12);
        // Empty warm set is primal-infeasible at the unconstrained optimum,
        // so the cold path ran and reported its own iterations.
        assert!(sol.iterations >= 1);
    }

    #[test]
    fn kkt_residual_detects_perturbation() {
        let mut p = identity_problem(2);
        p.lb[0] = 1.0;
        let sol = solve_qp(&p).unwrap();
        let mut x_bad = sol.x.clone();
        x_bad[1] += 1e-3;
        assert!(kkt_residual(&p, &x_bad, &sol.duals) >= 1e-4);
    }

    #[test]
    fn semidefinite_hessian_is_accepted() {
        // H has a zero eigenvalue; the ridge keeps the solve well posed and
        // the box makes the problem bounded.
        let mut p = QpProblem::unconstrained(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
        );
        p.lb[1] = -5.0;
        let sol = solve_qp(&p).unwrap();
        // The ridge sends the unconstrained iterate far away before the box
        // pulls it back, so a few digits are lost on the way.
        assert_relative_eq!(sol.x[1], -5.0, epsilon = 1e-3);
        assert!(sol.kkt_residual < 1e-3);
    }

    #[test]
    fn degenerate_duplicate_rows_do_not_cycle() {
        // The same constraint twice: the second copy is dependent but
        // consistent once the first is active.
        let mut p = identity_problem(2);
        p.a_in = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        p.lb_in = DVector::from_vec(vec![1.0, 1.0]);
        p.ub_in = DVector::from_vec(vec![f64::INFINITY, f64::INFINITY]);
        let sol = solve_qp(&p).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-10);
        assert!(sol.kkt_residual < 1e-9);
    }

    #[test]
    fn duplicate_equality_rows_are_tolerated() {
        let mut p = identity_problem(2);
        p.a_eq = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        p.b_eq = DVector::from_vec(vec![2.0, 2.0]);
        let sol = solve_qp(&p).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn inconsistent_equality_rows_are_infeasible() {
        let mut p = identity_problem(2);
        p.a_eq = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        p.b_eq = DVector::from_vec(vec![2.0, 3.0]);
        assert!(matches!(
            solve_qp(&p),
            Err(QpError::InfeasibleProblem { .. })
        ));
    }
}
