//! Rigid-body dynamics against independent oracles: inverse-dynamics
//! reconstruction of the mass matrix, finite-difference kinematics, and a
//! hand-derived double pendulum.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn mass_matrix_columns_match_inverse_dynamics() {
    let model = common::biped();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let state = model.sample_state(&mut rng, true);
        worst = worst.max(common::crba_vs_rnea_defect(&model, &state));
    }
    println!("worst column/symmetry defect {worst:.2e}");
    assert!(worst < 1e-9);
}

#[test]
fn frame_jacobians_match_finite_differences() {
    let model = common::biped();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let state = model.sample_state(&mut rng, true);
        for frame in ["l_foot", "r_foot", "pelvis", "r_shin"] {
            worst = worst.max(common::fd_jacobian_defect(&model, &state, frame));
        }
    }
    println!("worst jacobian entry defect {worst:.2e}");
    assert!(worst < 1e-4);
}

#[test]
fn jacobian_drift_matches_finite_differences() {
    let model = common::biped();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let state = model.sample_state(&mut rng, true);
        for frame in ["l_foot", "r_foot", "pelvis"] {
            worst = worst.max(common::fd_jdot_v_defect(&model, &state, frame));
        }
    }
    println!("worst drift defect {worst:.2e}");
    assert!(worst < 1e-4);
}

#[test]
fn double_pendulum_matches_closed_form() {
    let dp = common::double_pendulum();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut worst = dp.mass_matrix_defect(0.0, 0.0);
    worst = worst.max(dp.mass_matrix_defect(0.3, std::f64::consts::FRAC_PI_2));
    for _ in 0..50 {
        use rand::Rng;
        let q1 = rng.gen_range(-3.0..3.0);
        let q2 = rng.gen_range(-3.0..3.0);
        worst = worst.max(dp.mass_matrix_defect(q1, q2));
    }
    println!("worst closed-form defect {worst:.2e}");
    assert!(worst < 1e-10);
}
