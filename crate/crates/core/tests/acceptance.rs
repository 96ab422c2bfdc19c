//! Acceptance gate: one test per criterion, each printing a single
//! pass/fail line with its headline numbers and elapsed time.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcwbc::actuation::{
    geared_motor_torque, geared_output_torque, hip_joint_torque, hip_motor_torque,
    joint_torque_from_motor, knee_distal_torque, knee_icr_torque, motor_torques,
};
use rcwbc::cii::{cii_report, cii_value, run_sweep_series, CiiSweepConfig};
use rcwbc::dynamics::{frame_jacobian_with, mass_matrix, nonlinear_effects_with, KinState};
use rcwbc::model::load_model;
use rcwbc::rolling::{
    check_actuation_validity, constraint_residual, knee_angles, nullspace_projector,
    solve_internal_forces, InternalConstraintSet,
};
use rcwbc::sim::{load_scenario, run_scenario, scatter_actuated, ScenarioResult};
use rcwbc::wbc::{solve_wbc, ControlRefs};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {n} {name}: {} ({detail})",
        if pass { "pass" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} {name}: {detail}");
}

#[test]
fn criterion_1_rolling_kinematics() {
    let t0 = Instant::now();
    let model = common::biped();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let state = model.sample_state(&mut rng, true);
        let knees = knee_angles(&model, &state);
        for (pair, knee) in model.rolling_pairs.iter().zip(&knees) {
            let qp = state.q[model.joints[pair.proximal_joint].q_index];
            let qd = state.q[model.joints[pair.distal_joint].q_index];
            worst = worst.max((knee - (qp + qd)).abs());
            worst = worst.max((knee - 2.0 * qd).abs());
        }
        worst = worst.max(constraint_residual(&model, &state).amax());
    }
    let dt = t0.elapsed().as_secs_f64();
    report(
        1,
        "rolling kinematics",
        worst < 1e-12 && dt < 1.0,
        &format!("1000 states, worst residual {worst:.2e}, {dt:.2} s"),
    );
}

#[test]
fn criterion_2_projector_suite() {
    let t0 = Instant::now();
    let model = common::biped();
    let ics = InternalConstraintSet::from_model(&model);
    let base_cols = ics.jacobian().view((0, 0), (ics.k(), 6)).amax();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut jn: f64 = 0.0;
    let mut idem: f64 = 0.0;
    let mut valid = true;
    for _ in 0..100 {
        let state = model.sample_state(&mut rng, true);
        let a = mass_matrix(&model, &state).unwrap();
        let n = nullspace_projector(&ics, &a);
        jn = jn.max((ics.jacobian() * &n).amax());
        idem = idem.max((&n * &n - &n).amax());
        valid &= check_actuation_validity(&ics, model.actuated_v(), &a).0;
    }
    let dt = t0.elapsed().as_secs_f64();
    report(
        2,
        "projector suite",
        jn < 1e-9 && idem < 1e-9 && base_cols == 0.0 && valid && dt < 5.0,
        &format!(
            "100 states, |J N| {jn:.2e}, |N^2 - N| {idem:.2e}, base columns {base_cols:.1e}, \
             actuation valid {valid}, {dt:.2} s"
        ),
    );
}

#[test]
fn criterion_3_dynamics_oracles() {
    let t0 = Instant::now();
    let model = common::biped();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut crba: f64 = 0.0;
    for _ in 0..20 {
        let state = model.sample_state(&mut rng, true);
        crba = crba.max(common::crba_vs_rnea_defect(&model, &state));
    }
    let mut fd: f64 = 0.0;
    for _ in 0..6 {
        let state = model.sample_state(&mut rng, true);
        for frame in ["l_foot", "r_foot", "pelvis"] {
            fd = fd.max(common::fd_jacobian_defect(&model, &state, frame));
            fd = fd.max(common::fd_jdot_v_defect(&model, &state, frame));
        }
    }
    let dp = common::double_pendulum();
    let mut pend: f64 = 0.0;
    for _ in 0..50 {
        pend = pend.max(dp.mass_matrix_defect(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)));
    }
    let dt = t0.elapsed().as_secs_f64();
    report(
        3,
        "dynamics oracles",
        crba < 1e-9 && fd < 1e-4 && pend < 1e-10 && dt < 10.0,
        &format!(
            "crba/rnea {crba:.2e}, finite differences {fd:.2e}, double pendulum {pend:.2e}, \
             {dt:.2} s"
        ),
    );
}

#[test]
fn criterion_4_qp_vs_brute_force() {
    let t0 = Instant::now();
    let stats = common::qp_oracle_sweep(104, 200);
    let dt = t0.elapsed().as_secs_f64();
    report(
        4,
        "qp solver vs enumeration",
        stats.worst_dx < 1e-6 && stats.worst_kkt < 1e-8 && dt < 30.0,
        &format!(
            "{} solved + {} infeasible, worst |x - oracle| {:.2e}, worst kkt {:.2e}, {dt:.2} s",
            stats.solved, stats.infeasible_agreed, stats.worst_dx, stats.worst_kkt
        ),
    );
}

#[test]
fn criterion_5_statics() {
    let t0 = Instant::now();
    let scenario = load_scenario(common::asset("scenarios/balance_push.toml")).unwrap();
    let model = &scenario.model;
    let state = scenario.initial_state().unwrap();
    let stance = scenario.stance_frames();
    let stance_refs: Vec<&str> = stance.iter().map(|s| s.as_str()).collect();
    let out = solve_wbc(
        model,
        &state,
        &scenario.controller,
        &stance_refs,
        &ControlRefs::default(),
    )
    .unwrap();

    let qdd = out.qdd.amax();
    let weight = model.total_mass() * model.gravity.norm();
    let fz: f64 = out.forces.iter().map(|f| f[5]).sum();
    let fz_defect = (fz - weight).abs();

    let ks = KinState::compute(model, &state).unwrap();
    let a = rcwbc::dynamics::mass_matrix_with(model, &ks);
    let bias = nonlinear_effects_with(model, &state, &ks);
    let mut applied = scatter_actuated(model, &out.tau);
    for (frame, f) in stance_refs.iter().zip(&out.forces) {
        let j = frame_jacobian_with(model, &ks, frame).unwrap();
        applied += j.transpose() * f;
    }
    let deficit = &a * &out.qdd + &bias - &applied;
    let ics = InternalConstraintSet::from_model(model);
    let f_int = solve_internal_forces(&ics, &a, &deficit);
    let torque_residual = (&deficit - ics.jacobian().transpose() * f_int).amax();

    let dt = t0.elapsed().as_secs_f64();
    report(
        5,
        "whole-body statics",
        qdd < 1e-6 && fz_defect < 1e-4 && torque_residual < 1e-6 && dt < 1.0,
        &format!(
            "|qdd| {qdd:.2e}, vertical force defect {fz_defect:.2e} N, \
             torque balance residual {torque_residual:.2e}, {dt:.2} s"
        ),
    );
}

fn xy_error(r: &rcwbc::sim::TickRecord) -> f64 {
    (r.com.xy() - r.com_ref).norm()
}

fn run(path: &str) -> ScenarioResult {
    let scenario = load_scenario(common::asset(path)).unwrap();
    let result = run_scenario(&scenario, 1).unwrap();
    assert!(
        result.summary.completed && result.summary.failure.is_none(),
        "{path}: run did not complete: {:?}",
        result.summary.failure
    );
    result
}

#[test]
fn criterion_6_push_recovery() {
    let t0 = Instant::now();
    let result = run("scenarios/balance_push.toml");
    let rows = &result.log.rows;

    let window = |a: f64, b: f64| rows.iter().filter(move |r| r.t >= a && r.t < b);
    let peak_push = window(4.0, 5.5).map(xy_error).fold(0.0, f64::max);
    let settled = window(7.0, 8.0).map(xy_error).fold(0.0, f64::max);
    let peak_impulse = window(8.0, 9.0).map(xy_error).fold(0.0, f64::max);
    let settled_impulse = window(10.05, 12.0).map(xy_error).fold(0.0, f64::max);
    let internal = result.summary.max_internal_vel;

    let pass = (0.02..0.04).contains(&peak_push)
        && settled < 5e-3
        && peak_impulse > 5e-3
        && settled_impulse < 5e-3
        && internal < 1e-5;
    let dt = t0.elapsed().as_secs_f64();
    report(
        6,
        "push recovery",
        pass && dt < 120.0,
        &format!(
            "push peak {:.1} mm, settled {:.2} mm within 2 s; impulse peak {:.1} mm, \
             settled {:.2} mm; |J_int v| {internal:.1e}; {dt:.1} s",
            1e3 * peak_push,
            1e3 * settled,
            1e3 * peak_impulse,
            1e3 * settled_impulse
        ),
    );
}

#[test]
fn criterion_7_sway_and_squat_tracking() {
    let t0 = Instant::now();
    let sway = run("scenarios/com_sway.toml");
    let ys: Vec<f64> = sway
        .log
        .rows
        .iter()
        .filter(|r| r.t >= 6.0)
        .map(|r| r.com.y)
        .collect();
    let amp = 0.5 * (ys.iter().cloned().fold(f64::MIN, f64::max)
        - ys.iter().cloned().fold(f64::MAX, f64::min));
    let amp_err = (amp - 0.05).abs() / 0.05;
    let rpy_max = sway
        .summary
        .phases
        .iter()
        .map(|p| p.base_rpy_max_deg)
        .fold(0.0, f64::max);

    let squat = run("scenarios/squat.toml");
    let z_rms = squat
        .summary
        .phases
        .iter()
        .find(|p| p.name == "squat")
        .unwrap()
        .base_z_rms;

    let dt = t0.elapsed().as_secs_f64();
    report(
        7,
        "sway and squat tracking",
        amp_err < 0.10 && rpy_max < 1.0 && z_rms < 0.01 && dt < 240.0,
        &format!(
            "sway amplitude {:.1} mm (error {:.1}%), base rpy max {rpy_max:.3} deg, \
             squat height rms {:.1} mm, {dt:.1} s",
            1e3 * amp,
            1e2 * amp_err,
            1e3 * z_rms
        ),
    );
}

#[test]
fn criterion_8_centroidal_inertia_isotropy() {
    let t0 = Instant::now();
    let model = common::biped();
    let collocated = load_model(common::asset("models/biped_rcj_collocated.toml")).unwrap();
    let cfg = CiiSweepConfig::default();

    let series = run_sweep_series(&model, &cfg).unwrap();
    let expected = cfg.forward_points * cfg.lateral_points * cfg.samples;
    let nominal = cfg
        .resolved(&model)
        .unwrap()
        .nominal_state(&model)
        .unwrap();
    let self_cii = cii_value(&model, &nominal, &nominal).unwrap().abs();
    let rep = cii_report(&model, &collocated, &cfg).unwrap();

    let dt = t0.elapsed().as_secs_f64();
    report(
        8,
        "centroidal inertia isotropy",
        series.configurations == expected
            && series.skipped == 0
            && self_cii < 1e-12
            && rep.range_reduction > 0.0
            && dt < 60.0,
        &format!(
            "{} configurations, self value {self_cii:.1e}, proximal-vs-collocated range \
             reduction {:+.1}% (full-scale hardware context: 36%), {dt:.1} s",
            series.configurations,
            1e2 * rep.range_reduction
        ),
    );
}

#[test]
fn criterion_9_actuation_maps() {
    let t0 = Instant::now();
    let model = common::biped();
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut worst: f64 = 0.0;
    let mut half: f64 = 0.0;
    for _ in 0..200 {
        let tau = rng.gen_range(-150.0..150.0);
        let r = rng.gen_range(0.02..0.06);
        half = half.max((knee_icr_torque(tau, r, r) - 0.5 * tau).abs() / tau.abs());

        let (rp, rd) = (rng.gen_range(0.02..0.06), rng.gen_range(0.02..0.06));
        let stages = [rng.gen_range(1.5..4.0), rng.gen_range(1.5..4.0)];
        let motor = geared_motor_torque(knee_icr_torque(tau, rp, rd), &stages);
        let back = knee_distal_torque(geared_output_torque(motor, &stages), rp, rd);
        worst = worst.max((back - tau).abs() / tau.abs().max(1.0));

        let (rf, rr) = (rng.gen_range(0.03..0.09), rng.gen_range(0.02..0.05));
        let hip_back = hip_joint_torque(hip_motor_torque(tau, rf, rr), rf, rr);
        worst = worst.max((hip_back - tau).abs() / tau.abs().max(1.0));

        // Power conservation: the articulation turns at (1 + rd/rp) times
        // the distal rate, while the contact torque shrinks by rp/(rp+rd).
        let qd = rng.gen_range(-3.0..3.0);
        let icr = knee_icr_torque(tau, rp, rd);
        let power_defect = (icr * (1.0 + rd / rp) * qd - tau * qd).abs() / (tau * qd).abs().max(1.0);
        worst = worst.max(power_defect);
    }
    let n_a = model.actuated_v().len();
    let tau_vec: Vec<f64> = (0..n_a).map(|i| 5.0 * (i as f64 + 1.0)).collect();
    let motors = motor_torques(&model, &tau_vec);
    for (slot, &ji) in model.actuated_joints().iter().enumerate() {
        let name = &model.joints[ji].name;
        let back = joint_torque_from_motor(&model, name, motors[name]).unwrap();
        worst = worst.max((back - tau_vec[slot]).abs() / tau_vec[slot].abs());
    }
    let dt = t0.elapsed().as_secs_f64();
    report(
        9,
        "actuation maps",
        half < 1e-12 && worst < 1e-12 && dt < 1.0,
        &format!(
            "equal radii half-torque defect {half:.2e}; worst round-trip/power \
             defect {worst:.2e}; {dt:.2} s"
        ),
    );
}
